"""Orthophoto descriptors lifted onto DEM points and quantised into visual words."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import DESCRIPTOR_DIM, FeatureSet
from .raster import DemGrid

logger = logging.getLogger(__name__)

DEFAULT_K = 256
FULL_SCALE_K = 100_000


@dataclass(frozen=True)
class Point3D:
    x: float
    y: float
    z: float
    descriptor_ids: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """DEM points that carry at least one orthophoto descriptor.

    ``descriptor_point[i]`` is the point id of descriptor ``i`` or -1 when the
    descriptor fell outside the DEM.
    """

    xyz: np.ndarray
    pixels: np.ndarray           # (n, 2) integer (row, col)
    descriptor_point: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def descriptor_ids(self, point_id: int) -> np.ndarray:
        return np.flatnonzero(self.descriptor_point == point_id)

    def __getitem__(self, point_id: int) -> Point3D:
        x, y, z = self.xyz[point_id]
        return Point3D(float(x), float(y), float(z), tuple(int(i) for i in self.descriptor_ids(point_id)))


def lift_to_3d(features: FeatureSet, dem: DemGrid, ortho_to_dem: np.ndarray | None = None) -> PointCloud:
    """Group descriptors by the DEM pixel under their keypoint.

    Keypoint coordinates are orthophoto pixels; ``ortho_to_dem`` (3x3) maps
    them to DEM pixels and defaults to identity (pixel-registered orthophoto).
    """
    xy = features.xy
    if ortho_to_dem is not None and len(features):
        h = np.c_[xy, np.ones(len(xy))] @ np.asarray(ortho_to_dem, dtype=np.float64).T
        xy = h[:, :2] / h[:, 2:3]
    cols = np.rint(xy[:, 0]).astype(np.int64) if len(features) else np.zeros(0, np.int64)
    rows = np.rint(xy[:, 1]).astype(np.int64) if len(features) else np.zeros(0, np.int64)
    inside = (rows >= 0) & (rows < dem.height) & (cols >= 0) & (cols < dem.width)
    dropped = int((~inside).sum())
    if dropped:
        logger.info("dropped %d descriptors outside the DEM extent", dropped)

    flat = rows * dem.width + cols
    uniq, inverse = np.unique(flat[inside], return_inverse=True)
    descriptor_point = np.full(len(features), -1, dtype=np.int64)
    descriptor_point[np.flatnonzero(inside)] = inverse
    pr, pc = np.divmod(uniq, dem.width)
    x, y = dem.pixel_to_world(pc, pr)
    z = dem.elevations[pr, pc].astype(np.float64)
    xyz = np.column_stack([x, y, z]) if uniq.size else np.zeros((0, 3))
    return PointCloud(xyz=xyz, pixels=np.column_stack([pr, pc]).astype(np.int64), descriptor_point=descriptor_point, dropped=dropped)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


class ObjectiveIncreaseError(AssertionError):
    pass


def squared_distances(x: np.ndarray, c: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty((x.shape[0], c.shape[0]))
    for start in range(0, x.shape[0], chunk):
        diff = x[start:start + chunk, None, :] - c[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    closest = squared_distances(x, x[centers[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers.append(idx)
        closest = np.minimum(closest, squared_distances(x, x[idx][None, :])[:, 0])
    return x[centers].copy()


def _assign(x, centroids):
    d2 = squared_distances(x, centroids)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(x.shape[0]), labels]


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 50, check_monotone: bool = True) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    Stops when no assignment changes or after ``max_iters`` updates. Empty
    clusters are re-seeded at the point farthest from its centroid. With
    ``check_monotone`` the within-cluster sum of squares is verified to be
    non-increasing after every iteration.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} vectors")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels, d2 = _assign(x, centroids)
    history = [float(d2.sum())]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            taken = set()
            far = np.argsort(-d2, kind="stable")
            for c in np.flatnonzero(~nonempty):
                for cand in far:
                    if int(cand) not in taken:
                        taken.add(int(cand))
                        centroids[c] = x[cand]
                        break
        new_labels, d2 = _assign(x, centroids)
        obj = float(d2.sum())
        if check_monotone and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise ObjectiveIncreaseError(f"k-means objective rose from {history[-1]} to {obj} at iteration {it}")
        history.append(obj)
        changed = int((new_labels != labels).sum())
        labels = new_labels
        if changed == 0:
            converged = True
            break
    return KMeansResult(centroids=centroids, labels=labels, objective_history=history, iterations=it, converged=converged)


def canonical_relabel(result: KMeansResult) -> KMeansResult:
    """Reorder clusters by lexicographic centroid order."""
    order = np.lexsort(result.centroids.T[::-1])
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return KMeansResult(result.centroids[order], remap[result.labels], list(result.objective_history), result.iterations, result.converged)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Visual words over orthophoto descriptors attached to DEM points.

    ``descriptors``/``descriptor_point``/``descriptor_word`` cover retained
    descriptors only (those that landed on the DEM).
    """

    centroids: np.ndarray
    descriptors: np.ndarray
    descriptor_point: np.ndarray
    descriptor_word: np.ndarray
    points: PointCloud

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def word_to_points(self) -> list[np.ndarray]:
        out = []
        for w in range(self.k):
            out.append(np.unique(self.descriptor_point[self.descriptor_word == w]))
        return out

    def word_members(self, word: int) -> np.ndarray:
        """Retained-descriptor indices quantised to ``word``."""
        return np.flatnonzero(self.descriptor_word == word)


def build_vocabulary(features: FeatureSet, dem: DemGrid, k: int = DEFAULT_K, seed: int = 0,
                     max_iters: int = 50, ortho_to_dem: np.ndarray | None = None) -> Vocabulary:
    cloud = lift_to_3d(features, dem, ortho_to_dem)
    keep = cloud.descriptor_point >= 0
    desc = features.descriptors[keep]
    result = kmeans(desc, k, seed=seed, max_iters=max_iters)
    retained = PointCloud(cloud.xyz, cloud.pixels, cloud.descriptor_point[keep], cloud.dropped)
    return Vocabulary(
        centroids=result.centroids,
        descriptors=desc,
        descriptor_point=retained.descriptor_point,
        descriptor_word=result.labels,
        points=retained,
    )


_VOCAB_HEADER = struct.Struct("<II")


def write_vocabulary(path: str | Path, vocab: Vocabulary) -> Path:
    """Centroids as ``uint32 k, uint32 dim`` + float32 rows; index and points as ``<path>.json``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_VOCAB_HEADER.pack(vocab.k, vocab.centroids.shape[1]))
        fh.write(vocab.centroids.astype("<f4").tobytes())
    index = {
        "k": vocab.k,
        "word_to_points": {str(w): pts.tolist() for w, pts in enumerate(vocab.word_to_points()) if pts.size},
        "points": {
            "xyz": vocab.points.xyz.tolist(),
            "pixels": vocab.points.pixels.tolist(),
            "dropped": vocab.points.dropped,
        },
        "descriptor_point": vocab.descriptor_point.tolist(),
        "descriptor_word": vocab.descriptor_word.tolist(),
        "descriptors": vocab.descriptors.astype(np.float32).tolist(),
    }
    json_path = path.with_name(path.name + ".json")
    json_path.write_text(json.dumps(index))
    return json_path


def read_vocabulary(path: str | Path) -> Vocabulary:
    path = Path(path)
    buf = path.read_bytes()
    k, dim = _VOCAB_HEADER.unpack_from(buf)
    if dim != DESCRIPTOR_DIM or len(buf) != _VOCAB_HEADER.size + k * dim * 4:
        raise ValueError(f"{path}: malformed vocabulary file")
    centroids = np.frombuffer(buf, dtype="<f4", offset=_VOCAB_HEADER.size).reshape(k, dim).astype(np.float64)
    index = json.loads(path.with_name(path.name + ".json").read_text())
    pts = index["points"]
    desc_point = np.asarray(index["descriptor_point"], dtype=np.int64)
    cloud = PointCloud(
        xyz=np.asarray(pts["xyz"], dtype=np.float64).reshape(-1, 3),
        pixels=np.asarray(pts["pixels"], dtype=np.int64).reshape(-1, 2),
        descriptor_point=desc_point,
        dropped=int(pts.get("dropped", 0)),
    )
    return Vocabulary(
        centroids=centroids,
        descriptors=np.asarray(index["descriptors"], dtype=np.float64).reshape(-1, DESCRIPTOR_DIM),
        descriptor_point=desc_point,
        descriptor_word=np.asarray(index["descriptor_word"], dtype=np.int64),
        points=cloud,
    )
