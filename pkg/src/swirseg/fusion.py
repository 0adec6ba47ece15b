"""Attach DEM elevations to SWIR pixels and classify them with the wetness/height rules."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .labels import DISPLAY_NAMES, Label
from .raster import DemGrid, HyperCube, read_pgm_codes, write_pgm, write_ppm
from .ransac import HomographyModel
from .spectral import WetnessMap, wetness_map

logger = logging.getLogger(__name__)

DEFAULT_GROUND_WINDOW_M = 64.0


@dataclass(frozen=True, eq=False)
class FusedScene:
    """Per-SWIR-pixel elevation, height above ground and wetness.

    ``valid`` is False where the transform lands outside the DEM; those pixels
    carry NaN elevations. ``wetness_valid`` separately flags the wetness
    sentinel (NaN ratio), which does not invalidate the pixel.
    """

    elevation: np.ndarray
    height_above_ground: np.ndarray
    wetness: np.ndarray
    valid: np.ndarray
    dem_cols: np.ndarray
    dem_rows: np.ndarray
    cube: HyperCube | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.elevation.shape

    @property
    def wetness_valid(self) -> np.ndarray:
        return np.isfinite(self.wetness)

    @property
    def fraction_invalid(self) -> float:
        return float(1.0 - self.valid.mean()) if self.valid.size else 0.0

    def spectrum(self, line: int, sample: int) -> np.ndarray:
        if self.cube is None:
            raise ValueError("fused scene was built without a cube reference")
        return self.cube.spectrum(line, sample)


def height_above_ground(elevations, window: int) -> np.ndarray:
    """Elevation minus the minimum over a ``window``-pixel square, clamped at 0.

    The window for pixel ``(i, j)`` spans rows ``i - window//2`` to
    ``i - window//2 + window - 1`` (same for columns), clipped to the grid.
    """
    if window < 3:
        raise ValueError("ground window must be at least 3 pixels")
    z = np.asarray(elevations, dtype=np.float64)
    ground = ndimage.minimum_filter(z, size=window, mode="nearest")
    return np.maximum(z - ground, 0.0)


def ground_window_pixels(dem: DemGrid, window_m: float = DEFAULT_GROUND_WINDOW_M) -> int:
    return max(3, int(round(window_m / dem.pixel_size)))


def _model_pieces(model, samples: int) -> list[tuple[tuple[int, int], HomographyModel]]:
    if isinstance(model, HomographyModel):
        return [((0, samples), model)]
    pieces = [(tuple(cols), m) for cols, m in model]
    if not pieces:
        raise ValueError("no transform supplied")
    return pieces


def associate_voxels(cube: HyperCube, model, dem: DemGrid, wetness: WetnessMap | None = None,
                     ground_window_m: float | None = DEFAULT_GROUND_WINDOW_M) -> FusedScene:
    """Map every SWIR pixel centre into the DEM and sample elevation bilinearly.

    ``model`` is one :class:`HomographyModel` for the whole footprint or a
    sequence of ``((col0, col1), model)`` pieces, one per column range; columns
    with no piece (or a ``None`` model) are invalid. With ``ground_window_m``
    set to None the DEM is taken as already ground-relative.
    """
    lines, samples = cube.lines, cube.samples
    cols = np.full((lines, samples), np.nan)
    rows = np.full((lines, samples), np.nan)
    for (c0, c1), m in _model_pieces(model, samples):
        if m is None:
            continue
        ll, ss = np.mgrid[0:lines, c0:c1]
        xy = m.apply(np.column_stack([ss.ravel(), ll.ravel()]).astype(np.float64))
        cols[:, c0:c1] = xy[:, 0].reshape(lines, c1 - c0)
        rows[:, c0:c1] = xy[:, 1].reshape(lines, c1 - c0)

    valid = (np.isfinite(cols) & np.isfinite(rows)
             & (cols >= 0) & (cols <= dem.width - 1) & (rows >= 0) & (rows <= dem.height - 1))
    z = np.asarray(dem.elevations, dtype=np.float64)
    if ground_window_m is None:
        hag_grid = z
    else:
        hag_grid = height_above_ground(z, ground_window_pixels(dem, ground_window_m))

    elevation = np.full((lines, samples), np.nan)
    hag = np.full((lines, samples), np.nan)
    coords = [rows[valid], cols[valid]]
    elevation[valid] = ndimage.map_coordinates(z, coords, order=1, mode="nearest")
    hag[valid] = ndimage.map_coordinates(hag_grid, coords, order=1, mode="nearest")

    wmap = wetness if wetness is not None else wetness_map(cube)
    if wmap.ratios.shape != (lines, samples):
        raise ValueError("wetness map does not match the cube footprint")
    fused = FusedScene(elevation, hag, np.asarray(wmap.ratios, dtype=np.float64), valid, cols, rows, cube)
    logger.info("voxel association: %.2f%% of pixels invalid", 100 * fused.fraction_invalid)
    return fused


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RuleThresholds:
    wet_threshold: float
    elev_low: float = 3.0
    elev_high: float = 7.0
    canopy: float = 3.0

    def __post_init__(self) -> None:
        if not (0 < self.elev_low <= self.elev_high):
            raise ValueError("need 0 < elev_low <= elev_high")
        if self.canopy < 0:
            raise ValueError("canopy threshold must be non-negative")


def classify_values(wetness, height, t: RuleThresholds) -> np.ndarray:
    """Pointwise rule table. NaN wetness falls to the dry branch."""
    w = np.asarray(wetness, dtype=np.float64)
    h = np.asarray(height, dtype=np.float64)
    wet = np.isfinite(w) & (w >= t.wet_threshold)
    out = np.full(np.broadcast(w, h).shape, int(Label.ROAD_OTHER), dtype=np.uint8)
    out[~wet & (h >= t.elev_low)] = Label.HOUSE
    out[~wet & (h >= t.elev_high)] = Label.BUILDING
    out[wet] = Label.GRASS
    out[wet & (h >= t.canopy)] = Label.TREE
    return out


@dataclass(frozen=True, eq=False)
class SegmentMap:
    labels: np.ndarray  # uint8 codes, 255 = invalid

    def counts(self) -> dict[str, int]:
        values, n = np.unique(self.labels, return_counts=True)
        return {Label(int(v)).name: int(c) for v, c in zip(values, n)}


def classify(fused: FusedScene, t: RuleThresholds) -> SegmentMap:
    labels = classify_values(fused.wetness, np.where(fused.valid, fused.height_above_ground, 0.0), t)
    labels[~fused.valid] = Label.INVALID
    return SegmentMap(labels)


def write_segmap(path: str | Path, segmap: SegmentMap) -> Path:
    """PGM codes plus ``<path>.json`` legend."""
    path = Path(path)
    write_pgm(path, segmap.labels.astype(np.int64), maxval=255)
    legend = {str(int(lab)): DISPLAY_NAMES[lab] for lab in Label}
    json_path = path.with_name(path.name + ".json")
    json_path.write_text(json.dumps({"codes": legend, "counts": segmap.counts()}, indent=2) + "\n")
    return json_path


def read_segmap(path: str | Path) -> SegmentMap:
    codes, _ = read_pgm_codes(path)
    allowed = np.array([int(lab) for lab in Label])
    if not np.isin(codes, allowed).all():
        raise ValueError(f"{path}: unknown label code")
    return SegmentMap(codes.astype(np.uint8))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

PALETTE = {
    Label.BUILDING: (255, 0, 0),
    Label.HOUSE: (255, 255, 255),
    Label.TREE: (255, 255, 0),
    Label.GRASS: (0, 160, 0),
    Label.ROAD_OTHER: (0, 0, 0),
    Label.INVALID: (255, 0, 255),
}

# wettest -> driest
_RAMP = np.array([[255, 255, 255], [255, 255, 0], [255, 0, 0], [0, 0, 0]], dtype=np.float64)


def segmap_rgb(segmap: SegmentMap | np.ndarray) -> np.ndarray:
    labels = segmap.labels if isinstance(segmap, SegmentMap) else np.asarray(segmap)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for lab, colour in PALETTE.items():
        rgb[labels == lab] = colour
    return rgb


def wetness_rgb(wetness: WetnessMap | np.ndarray) -> np.ndarray:
    """Piecewise-linear ramp: max -> white, min -> black; NaN -> magenta."""
    w = wetness.ratios if isinstance(wetness, WetnessMap) else np.asarray(wetness, dtype=np.float64)
    ok = np.isfinite(w)
    rgb = np.zeros(w.shape + (3,), dtype=np.uint8)
    rgb[~ok] = PALETTE[Label.INVALID]
    if not ok.any():
        return rgb
    lo, hi = float(w[ok].min()), float(w[ok].max())
    t = np.zeros(w.shape)
    if hi > lo:
        t[ok] = (hi - w[ok]) / (hi - lo)  # 0 at the wettest pixel
    pos = t * (len(_RAMP) - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, len(_RAMP) - 2)
    frac = (pos - i0)[..., None]
    colours = _RAMP[i0] * (1 - frac) + _RAMP[i0 + 1] * frac
    rgb[ok] = np.rint(colours[ok]).astype(np.uint8)
    return rgb


def render_segmap(path: str | Path, segmap: SegmentMap) -> None:
    write_ppm(path, segmap_rgb(segmap))


def render_wetness(path: str | Path, wetness: WetnessMap | np.ndarray) -> None:
    write_ppm(path, wetness_rgb(wetness))
