"""Scale-invariant keypoints, 128-D gradient descriptors and ratio-test matching.

A compact difference-of-Gaussians detector following Lowe (2004): Gaussian
scale space, 3x3x3 extrema, quadratic sub-pixel refinement, contrast and
edge rejection, dominant orientations from a 36-bin histogram and a 4x4x8
descriptor with trilinear binning.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .raster import GrayImage

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class SiftConfig:
    sigma: float = 1.6
    intervals: int = 3
    min_octave_size: int = 16
    upsample: bool = False
    assumed_blur: float = 0.5
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 5
    max_interp_steps: int = 5
    orientation_bins: int = 36
    orientation_peak_ratio: float = 0.8
    descriptor_width: int = 4
    descriptor_bins: int = 8
    descriptor_clip: float = 0.2
    equalize: bool = False


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints as rows ``(x, y, scale, orientation)`` plus unit-norm descriptors."""

    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self) -> None:
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 4)
        desc = np.asarray(self.descriptors, dtype=np.float64).reshape(-1, DESCRIPTOR_DIM)
        if kp.shape[0] != desc.shape[0]:
            raise ValueError("keypoint and descriptor counts differ")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    def keypoint(self, i: int) -> Keypoint:
        return Keypoint(*map(float, self.keypoints[i]))

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.keypoints[idx], self.descriptors[idx])

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(np.zeros((0, 4)), np.zeros((0, DESCRIPTOR_DIM)))


# ---------------------------------------------------------------------------
# Scale space
# ---------------------------------------------------------------------------


def equalize_histogram(pixels: np.ndarray, nbins: int = 256) -> np.ndarray:
    hist, edges = np.histogram(pixels, bins=nbins, range=(0.0, 1.0))
    cdf = np.cumsum(hist).astype(np.float64)
    cdf /= cdf[-1]
    centers = 0.5 * (edges[:-1] + edges[1:])
    return np.interp(pixels, centers, cdf)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=4.0)


def _octave_count(shape, min_size: int) -> int:
    n, size = 0, min(shape)
    while size >= min_size:
        n += 1
        size //= 2
    return n


def build_pyramid(pixels: np.ndarray, cfg: SiftConfig):
    """Return (gaussians, dogs): per octave, lists of ``intervals+3`` and ``intervals+2`` images."""
    img = pixels.astype(np.float64)
    blur = cfg.assumed_blur
    if cfg.upsample:
        img = ndimage.zoom(img, 2, order=1, mode="nearest")
        blur *= 2
    img = _blur(img, math.sqrt(max(cfg.sigma**2 - blur**2, 0.01)))

    s = cfg.intervals
    k = 2 ** (1.0 / s)
    increments = [math.sqrt((k**i * cfg.sigma) ** 2 - (k ** (i - 1) * cfg.sigma) ** 2) for i in range(1, s + 3)]

    gaussians, dogs = [], []
    for _ in range(_octave_count(img.shape, cfg.min_octave_size)):
        levels = [img]
        for inc in increments:
            levels.append(_blur(levels[-1], inc))
        gaussians.append(levels)
        dogs.append(np.stack([b - a for a, b in zip(levels, levels[1:])]))
        img = levels[s][::2, ::2]
    return gaussians, dogs


def _derivatives(dog: np.ndarray, s: int, i: int, j: int):
    c = dog[s, i, j]
    dx = 0.5 * (dog[s, i, j + 1] - dog[s, i, j - 1])
    dy = 0.5 * (dog[s, i + 1, j] - dog[s, i - 1, j])
    ds = 0.5 * (dog[s + 1, i, j] - dog[s - 1, i, j])
    dxx = dog[s, i, j + 1] - 2 * c + dog[s, i, j - 1]
    dyy = dog[s, i + 1, j] - 2 * c + dog[s, i - 1, j]
    dss = dog[s + 1, i, j] - 2 * c + dog[s - 1, i, j]
    dxy = 0.25 * (dog[s, i + 1, j + 1] - dog[s, i + 1, j - 1] - dog[s, i - 1, j + 1] + dog[s, i - 1, j - 1])
    dxs = 0.25 * (dog[s + 1, i, j + 1] - dog[s + 1, i, j - 1] - dog[s - 1, i, j + 1] + dog[s - 1, i, j - 1])
    dys = 0.25 * (dog[s + 1, i + 1, j] - dog[s + 1, i - 1, j] - dog[s - 1, i + 1, j] + dog[s - 1, i - 1, j])
    grad = np.array([dx, dy, ds])
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return grad, hess


def _candidate_extrema(dog: np.ndarray, cfg: SiftConfig) -> np.ndarray:
    prethresh = 0.5 * cfg.contrast_threshold / cfg.intervals
    mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
    mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
    hit = ((dog == mx) & (dog > prethresh)) | ((dog == mn) & (dog < -prethresh))
    hit[0] = hit[-1] = False
    b = cfg.border
    hit[:, :b, :] = hit[:, -b:, :] = False
    hit[:, :, :b] = hit[:, :, -b:] = False
    return np.argwhere(hit)


def _localize(dog: np.ndarray, s: int, i: int, j: int, cfg: SiftConfig):
    n_s, h, w = dog.shape
    b = cfg.border
    for _ in range(cfg.max_interp_steps):
        grad, hess = _derivatives(dog, s, i, j)
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            break
        j += int(round(offset[0]))
        i += int(round(offset[1]))
        s += int(round(offset[2]))
        if s < 1 or s > n_s - 2 or i < b or i >= h - b or j < b or j >= w - b:
            return None
    else:
        return None

    value = dog[s, i, j] + 0.5 * float(grad @ offset)
    if abs(value) < cfg.contrast_threshold:
        return None
    tr = hess[0, 0] + hess[1, 1]
    det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
    r = cfg.edge_ratio
    if det <= 0 or tr * tr * r >= (r + 1) ** 2 * det:
        return None
    return s, i, j, offset


# ---------------------------------------------------------------------------
# Orientation and descriptor
# ---------------------------------------------------------------------------


class _GradientCache:
    def __init__(self, gaussians):
        self._gaussians = gaussians
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def get(self, octave: int, level: int):
        key = (octave, level)
        if key not in self._cache:
            img = self._gaussians[octave][level]
            dx = np.zeros_like(img)
            dy = np.zeros_like(img)
            dx[:, 1:-1] = img[:, 2:] - img[:, :-2]
            dy[1:-1, :] = img[2:, :] - img[:-2, :]
            self._cache[key] = (np.hypot(dx, dy), np.arctan2(dy, dx))
        return self._cache[key]


def _window(shape, cy: float, cx: float, radius: int):
    h, w = shape
    iy, ix = int(round(cy)), int(round(cx))
    ys = np.arange(max(iy - radius, 1), min(iy + radius, h - 2) + 1)
    xs = np.arange(max(ix - radius, 1), min(ix + radius, w - 2) + 1)
    return np.meshgrid(ys, xs, indexing="ij")


def _orientations(mag, ang, cy, cx, sigma_oct, cfg: SiftConfig) -> list[float]:
    nb = cfg.orientation_bins
    sig_w = 1.5 * sigma_oct
    yy, xx = _window(mag.shape, cy, cx, int(round(3 * sig_w)))
    weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig_w**2))
    bins = np.floor(nb * ang[yy, xx] / (2 * np.pi)).astype(int) % nb
    hist = np.bincount(bins.ravel(), weights=(weight * mag[yy, xx]).ravel(), minlength=nb)
    # 5-tap circular smoothing
    hist = (np.roll(hist, 2) + np.roll(hist, -2) + 4 * (np.roll(hist, 1) + np.roll(hist, -1)) + 6 * hist) / 16.0
    peak = hist.max()
    if peak <= 0:
        return []
    out = []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    for b in np.flatnonzero((hist > left) & (hist > right) & (hist >= cfg.orientation_peak_ratio * peak)):
        denom = left[b] - 2 * hist[b] + right[b]
        shift = 0.5 * (left[b] - right[b]) / denom if denom != 0 else 0.0
        theta = 2 * np.pi * (b + 0.5 + shift) / nb
        out.append(float(theta % (2 * np.pi)))
    return out


def _descriptor(mag, ang, cy, cx, sigma_oct, theta, cfg: SiftConfig) -> np.ndarray:
    d, n = cfg.descriptor_width, cfg.descriptor_bins
    hist_width = 3.0 * sigma_oct
    radius = int(round(hist_width * math.sqrt(2) * (d + 1) * 0.5))
    radius = min(radius, int(math.hypot(*mag.shape)))
    yy, xx = _window(mag.shape, cy, cx, radius)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    # rotate sample offsets into the keypoint frame, in histogram-cell units
    rx = (cos_t * dx + sin_t * dy) / hist_width
    ry = (-sin_t * dx + cos_t * dy) / hist_width
    rbin = ry + d / 2 - 0.5
    cbin = rx + d / 2 - 0.5
    inside = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    rbin, cbin = rbin[inside], cbin[inside]
    weight = np.exp(-(rx[inside] ** 2 + ry[inside] ** 2) / (2 * (0.5 * d) ** 2)) * mag[yy, xx][inside]
    obin = ((ang[yy, xx][inside] - theta) % (2 * np.pi)) * n / (2 * np.pi)

    r0, c0, o0 = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0
    hist = np.zeros((d + 2, d + 2, n))
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            for do, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r0 + 1 + dr, c0 + 1 + dc, (o0 + do) % n), weight * wr * wc * wo)
    vec = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(vec)
    if norm == 0:
        return vec
    vec = np.minimum(vec / norm, cfg.descriptor_clip)
    return vec / np.linalg.norm(vec)


def detect_and_describe(image: GrayImage | np.ndarray, config: SiftConfig | None = None) -> FeatureSet:
    """Detect DoG keypoints and compute descriptors.

    Output is sorted by ``(y, x, scale, orientation)`` so results do not depend
    on processing order.
    """
    cfg = config or SiftConfig()
    pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image, dtype=np.float64)
    if min(pixels.shape) < 2 * cfg.min_octave_size:
        raise ImageTooSmallError(f"image {pixels.shape} is smaller than {2 * cfg.min_octave_size}x{2 * cfg.min_octave_size}")
    if cfg.equalize:
        pixels = equalize_histogram(pixels)

    gaussians, dogs = build_pyramid(pixels, cfg)
    grads = _GradientCache(gaussians)
    scale_factor = 0.5 if cfg.upsample else 1.0
    kps, descs = [], []
    for octave, dog in enumerate(dogs):
        for s, i, j in _candidate_extrema(dog, cfg):
            loc = _localize(dog, int(s), int(i), int(j), cfg)
            if loc is None:
                continue
            s2, i2, j2, off = loc
            cx, cy = j2 + off[0], i2 + off[1]
            sigma_oct = cfg.sigma * 2 ** ((s2 + off[2]) / cfg.intervals)
            mag, ang = grads.get(octave, s2)
            mult = 2**octave * scale_factor
            for theta in _orientations(mag, ang, cy, cx, sigma_oct, cfg):
                vec = _descriptor(mag, ang, cy, cx, sigma_oct, theta, cfg)
                if not np.any(vec):
                    continue
                kps.append((cx * mult, cy * mult, sigma_oct * mult, theta))
                descs.append(vec)
    if not kps:
        return FeatureSet.empty()
    kp = np.array(kps)
    desc = np.array(descs)
    order = np.lexsort((kp[:, 3], kp[:, 2], kp[:, 0], kp[:, 1]))
    h, w = pixels.shape
    keep = order[(kp[order, 0] >= 0) & (kp[order, 0] <= w - 1) & (kp[order, 1] >= 0) & (kp[order, 1] <= h - 1)]
    logger.debug("detected %d descriptors on %dx%d image", len(keep), w, h)
    return FeatureSet(kp[keep], desc[keep])


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def pairwise_distances(queries: np.ndarray, targets: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Euclidean distances by explicit differences (no dot-product expansion)."""
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    out = np.empty((q.shape[0], t.shape[0]))
    for start in range(0, q.shape[0], chunk):
        diff = q[start:start + chunk, None, :] - t[None, :, :]
        out[start:start + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def two_nearest(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Indices and distances of the two smallest entries per row; ties go to the lower index."""
    rows = np.arange(dist.shape[0])
    i1 = np.argmin(dist, axis=1)
    d1 = dist[rows, i1]
    masked = dist.copy()
    masked[rows, i1] = np.inf
    i2 = np.argmin(masked, axis=1)
    d2 = masked[rows, i2]
    return i1, d1, i2, d2


def passes_ratio(d1, d2, ratio: float):
    d1 = np.asarray(d1)
    d2 = np.asarray(d2)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (d2 > 0) & (d1 / np.where(d2 > 0, d2, 1.0) <= ratio)


def match_ratio_test(queries, targets, ratio: float = 0.7) -> list[tuple[int, int, float]]:
    """Lowe ratio-test matches ``(query_idx, target_idx, distance)``."""
    q = queries.descriptors if isinstance(queries, FeatureSet) else np.asarray(queries)
    t = targets.descriptors if isinstance(targets, FeatureSet) else np.asarray(targets)
    if t.shape[0] < 2:
        raise ValueError("ratio test needs at least two targets")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if q.shape[0] == 0:
        return []
    i1, d1, _, d2 = two_nearest(pairwise_distances(q, t))
    ok = passes_ratio(d1, d2, ratio)
    return [(int(qi), int(i1[qi]), float(d1[qi])) for qi in np.flatnonzero(ok)]


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<II")


def write_features(path: str | Path, features: FeatureSet) -> None:
    """``uint32 count, uint32 dim`` then ``count`` float32 (x, y, scale, orientation) records, then vectors."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(len(features), DESCRIPTOR_DIM))
        fh.write(features.keypoints.astype("<f4").tobytes())
        fh.write(features.descriptors.astype("<f4").tobytes())


def read_features(path: str | Path) -> FeatureSet:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ValueError(f"{path}: truncated descriptor file")
    count, dim = _HEADER.unpack_from(buf)
    if dim != DESCRIPTOR_DIM:
        raise ValueError(f"{path}: descriptor dimension {dim}, expected {DESCRIPTOR_DIM}")
    expected = _HEADER.size + count * (4 + dim) * 4
    if len(buf) != expected:
        raise ValueError(f"{path}: {len(buf)} bytes, expected {expected}")
    kp = np.frombuffer(buf, dtype="<f4", count=count * 4, offset=_HEADER.size).reshape(count, 4)
    desc = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=_HEADER.size + count * 16).reshape(count, dim)
    return FeatureSet(kp.astype(np.float64), desc.astype(np.float64))
