"""Deterministic synthetic city-block scenes.

A scene is a wide-area DEM with a pixel-registered orthophoto, plus a smaller
SWIR hyperspectral cube whose footprint is embedded somewhere inside the
DEM by a known similarity transform. Spectra are piecewise-linear templates:
vegetation is bright in the 1.55-1.75 um window and dark past 2.0 um,
dry manmade surfaces rise slowly across the same span.
"""

from __future__ import annotations

import json
import math
from enum import IntEnum
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .labels import VEGETATION, Label
from .raster import DemGrid, GrayImage, HyperCube, write_cube, write_grid, write_pgm

BLOCK_TYPES = ("downtown", "residential", "park", "parking")


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    scene_size: int = 256
    swir_size: int = 128
    bands: int = 64
    wavelength_range: tuple[float, float] = (0.9, 2.5)
    road_width: tuple[int, int] = (5, 8)
    block_size: tuple[int, int] = (26, 38)
    # enabled block kinds; laid out so every 2x2 group of blocks holds all of them
    block_types: tuple[str, ...] = BLOCK_TYPES
    building_height: tuple[float, float] = (10.0, 50.0)
    house_height: tuple[float, float] = (4.0, 6.0)
    tree_height: tuple[float, float] = (5.0, 15.0)
    tree_radius: tuple[float, float] = (2.0, 4.5)
    tree_density: float = 10.0  # crowns per 1000 m^2 of grass
    vehicle_height: tuple[float, float] = (1.2, 2.0)
    vehicle_density: float = 14.0  # vehicles per 1000 m^2 of street
    parking_occupancy: float = 0.8
    ground_elevation: float = 100.0
    texture_amplitude: float = 0.10
    texture_cells: tuple[int, int] = (4, 2)
    spectral_noise: float = 0.004
    ortho_noise: float = 0.01
    # SWIR pixel (sample, line) -> DEM pixel: rotate, scale, then offset
    offset: tuple[float, float] | None = None
    rotation_deg: float = 0.0
    scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("road_width", "block_size", "building_height", "house_height", "tree_height", "tree_radius", "wavelength_range", "vehicle_height"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise SceneConfigError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
        if self.scene_size < 64 or self.swir_size < 64:
            raise SceneConfigError("scene_size and swir_size must be >= 64")
        if self.bands < 2:
            raise SceneConfigError("need at least 2 bands")
        if self.scale <= 0:
            raise SceneConfigError("scale must be positive")
        if min(self.tree_density, self.vehicle_density, self.spectral_noise, self.texture_amplitude, self.ortho_noise) < 0:
            raise SceneConfigError("densities and noise levels must be non-negative")
        if not 0 <= self.parking_occupancy <= 1:
            raise SceneConfigError("parking_occupancy must lie in [0, 1]")
        unknown = set(self.block_types) - set(BLOCK_TYPES)
        if unknown:
            raise SceneConfigError(f"unknown block types {sorted(unknown)}")
        if not self.block_types:
            raise SceneConfigError("at least one block type must be enabled")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass(frozen=True, eq=False)
class GroundTruth:
    labels: np.ndarray          # SWIR grid, Label codes
    transform: np.ndarray       # 3x3, SWIR (sample, line) -> DEM pixel
    spectra: dict               # Material -> template spectrum on the cube axis
    material: np.ndarray        # DEM grid, Material codes
    heights: np.ndarray         # DEM grid, metres above ground


@dataclass(frozen=True, eq=False)
class Scene:
    cube: HyperCube
    dem: DemGrid
    ortho: GrayImage
    truth: GroundTruth
    config: SceneConfig


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

class Material(IntEnum):
    ROAD = 0
    GRASS = 1
    TREE = 2
    HOUSE = 3
    BUILDING = 4
    VEHICLE_LIGHT = 5
    VEHICLE_DARK = 6


MATERIAL_LABEL = {
    Material.ROAD: Label.ROAD_OTHER,
    Material.GRASS: Label.GRASS,
    Material.TREE: Label.TREE,
    Material.HOUSE: Label.HOUSE,
    Material.BUILDING: Label.BUILDING,
    Material.VEHICLE_LIGHT: Label.ROAD_OTHER,
    Material.VEHICLE_DARK: Label.ROAD_OTHER,
}

_MATERIAL_GAIN = {
    Material.ROAD: 0.7,
    Material.GRASS: 1.0,
    Material.TREE: 0.85,
    Material.HOUSE: 0.9,
    Material.BUILDING: 1.15,
    Material.VEHICLE_LIGHT: 1.8,
    Material.VEHICLE_DARK: 0.3,
}


def _notches(wl: np.ndarray) -> np.ndarray:
    return (1 - 0.6 * np.exp(-((wl - 1.4) ** 2) / (2 * 0.035**2))) * (1 - 0.7 * np.exp(-((wl - 1.9) ** 2) / (2 * 0.035**2)))


def vegetation_template(wl) -> np.ndarray:
    wl = np.asarray(wl, dtype=np.float64)
    base = np.interp(wl, [0.9, 1.8, 2.1, 2.5], [0.4, 0.4, 0.15, 0.15])
    return base * _notches(wl)


def dry_template(wl) -> np.ndarray:
    wl = np.asarray(wl, dtype=np.float64)
    base = np.interp(wl, [0.9, 2.5], [0.2, 0.35])
    return base * _notches(wl)


def material_spectra(wavelengths) -> dict:
    veg = vegetation_template(wavelengths)
    dry = dry_template(wavelengths)
    return {
        mat: gain * (veg if MATERIAL_LABEL[mat] in VEGETATION else dry)
        for mat, gain in _MATERIAL_GAIN.items()
    }


def ortho_albedo(spectra: dict, wavelengths) -> dict:
    """Visible albedo per material, an affine map of the ~1.2 um reflectance.

    Keeping the brightness ordering shared between the two modalities is what
    lets gradient descriptors from both images land on the same visual words.
    """
    idx = int(np.argmin(np.abs(np.asarray(wavelengths) - 1.2)))
    return {mat: 0.05 + 1.6 * float(s[idx]) for mat, s in spectra.items()}


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def _partition(rng, size: int, road: tuple[int, int], block: tuple[int, int]) -> list[tuple[int, int]]:
    """Alternate road / block spans along one axis; returns block [start, stop) spans."""
    spans = []
    pos = int(rng.integers(road[0], road[1] + 1))
    while pos < size:
        b = int(rng.integers(block[0], block[1] + 1))
        spans.append((pos, min(pos + b, size)))
        pos += b + int(rng.integers(road[0], road[1] + 1))
    return spans


def _place_trees(rng, cfg, material, heights, region: np.ndarray, n: int) -> None:
    ys, xs = np.nonzero(region)
    if ys.size == 0 or n <= 0:
        return
    h, w = material.shape
    for _ in range(n):
        k = int(rng.integers(ys.size))
        cy, cx = ys[k], xs[k]
        r = rng.uniform(*cfg.tree_radius)
        ht = rng.uniform(*cfg.tree_height)
        y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
        x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & region[y0:y1, x0:x1]
        sub_m = material[y0:y1, x0:x1]
        sub_h = heights[y0:y1, x0:x1]
        sub_m[disk] = Material.TREE
        sub_h[disk] = np.maximum(sub_h[disk], ht)


def _put_vehicle(rng, cfg, material, heights, y: int, x: int, h: int, w: int) -> None:
    if rng.random() < 0.5:
        h, w = w, h
    region = material[y:y + h, x:x + w]
    if region.shape != (h, w) or np.any(region != Material.ROAD):
        return
    region[:] = Material.VEHICLE_LIGHT if rng.random() < 0.6 else Material.VEHICLE_DARK
    heights[y:y + h, x:x + w] = rng.uniform(*cfg.vehicle_height)


def _fill_block(rng, cfg, material, heights, y0, y1, x0, x1, kind: str) -> None:
    bw = x1 - x0
    if kind == "parking":
        material[y0:y1, x0:x1] = Material.ROAD
        # parked cars in rows
        for ry in range(y0 + 2, y1 - 4, 7):
            for rx in range(x0 + 1, x1 - 2, 3):
                if rng.random() < cfg.parking_occupancy:
                    _put_vehicle(rng, cfg, material, heights, ry, rx, 4, 2)
        return
    material[y0:y1, x0:x1] = Material.GRASS
    if kind == "downtown":
        # one or two towers with a grass/plaza margin
        margin = int(rng.integers(2, 5))
        if rng.random() < 0.5 and bw >= 24:
            split = x0 + bw // 2
            boxes = [(x0 + margin, split - 1), (split + 1, x1 - margin)]
        else:
            boxes = [(x0 + margin, x1 - margin)]
        for bx0, bx1 in boxes:
            by0 = y0 + int(rng.integers(2, 5))
            by1 = y1 - int(rng.integers(2, 5))
            material[by0:by1, bx0:bx1] = Material.BUILDING
            heights[by0:by1, bx0:bx1] = rng.uniform(*cfg.building_height)
        if rng.random() < 0.25:
            # forecourt parking strip
            material[y0:y0 + 2, x0:x1] = Material.ROAD
    elif kind == "residential":
        lot = int(rng.integers(11, 15))
        for ly in range(y0 + 1, y1 - 7, lot):
            for lx in range(x0 + 1, x1 - 7, lot):
                hw = int(rng.integers(6, min(lot - 2, 10) + 1))
                hh = int(rng.integers(6, min(lot - 2, 10) + 1))
                oy = ly + int(rng.integers(0, max(lot - 1 - hh, 0) + 1))
                ox = lx + int(rng.integers(0, max(lot - 1 - hw, 0) + 1))
                oy1, ox1 = min(oy + hh, y1 - 1), min(ox + hw, x1 - 1)
                if oy1 - oy < 4 or ox1 - ox < 4:
                    continue
                material[oy:oy1, ox:ox1] = Material.HOUSE
                heights[oy:oy1, ox:ox1] = rng.uniform(*cfg.house_height)
                # driveway
                material[oy1:min(oy1 + 2, y1), ox:ox + 3] = Material.ROAD
    grass = np.zeros(material.shape, dtype=bool)
    grass[y0:y1, x0:x1] = material[y0:y1, x0:x1] == Material.GRASS
    n_trees = int(round(cfg.tree_density * grass.sum() / 1000.0))
    _place_trees(rng, cfg, material, heights, grass, n_trees)


def _layout(rng, cfg: SceneConfig):
    n = cfg.scene_size
    material = np.full((n, n), Material.ROAD, dtype=np.uint8)
    heights = np.zeros((n, n))
    rows = _partition(rng, n, cfg.road_width, cfg.block_size)
    cols = _partition(rng, n, cfg.road_width, cfg.block_size)
    kinds = [k for k in BLOCK_TYPES if k in cfg.block_types]
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    shift = int(rng.integers(len(kinds)))
    for r, (y0, y1) in enumerate(rows):
        for c, (x0, x1) in enumerate(cols):
            kind = kinds[(r + 2 * c + shift) % len(kinds)]
            _fill_block(rng, cfg, material, heights, y0, y1, x0, x1, kind)
    # moving traffic on the street grid
    ys, xs = np.nonzero(material == Material.ROAD)
    n_cars = int(round(cfg.vehicle_density * ys.size / 1000.0))
    for k in rng.integers(ys.size, size=n_cars) if ys.size else []:
        _put_vehicle(rng, cfg, material, heights, int(ys[k]), int(xs[k]), 4, 2)
    return material, heights


def _value_noise(rng, shape, cell: int) -> np.ndarray:
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw))
    yy, xx = np.mgrid[0:h, 0:w]
    return ndimage.map_coordinates(grid, [yy / cell, xx / cell], order=1, mode="nearest")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def similarity_matrix(offset, rotation_deg: float, scale: float) -> np.ndarray:
    t = math.radians(rotation_deg)
    c, s = scale * math.cos(t), scale * math.sin(t)
    return np.array([[c, -s, offset[0]], [s, c, offset[1]], [0.0, 0.0, 1.0]])


def _corners(size: int) -> np.ndarray:
    m = size - 1
    return np.array([[0, 0, 1], [m, 0, 1], [0, m, 1], [m, m, 1]], dtype=np.float64).T


def _choose_offset(rng, cfg: SceneConfig):
    lin = similarity_matrix((0.0, 0.0), cfg.rotation_deg, cfg.scale)
    pts = lin @ _corners(cfg.swir_size)
    lo = -pts[:2].min(axis=1)
    hi = (cfg.scene_size - 1) - pts[:2].max(axis=1)
    if np.any(hi < lo):
        raise SceneConfigError("SWIR footprint does not fit inside the scene")
    return tuple(float(rng.integers(math.ceil(a), math.floor(b) + 1)) for a, b in zip(lo, hi))


def generate_scene(config: SceneConfig | None = None) -> Scene:
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    material, heights = _layout(rng, cfg)
    n = cfg.scene_size
    texture = 1.0 + cfg.texture_amplitude * (0.6 * _value_noise(rng, (n, n), cfg.texture_cells[0]) + 0.4 * _value_noise(rng, (n, n), cfg.texture_cells[1]))

    offset = cfg.offset if cfg.offset is not None else _choose_offset(rng, cfg)
    H = similarity_matrix(offset, cfg.rotation_deg, cfg.scale)
    pts = H @ _corners(cfg.swir_size)
    if pts[:2].min() < 0 or pts[:2].max() > n - 1:
        raise SceneConfigError(f"SWIR footprint with offset {offset} leaves the scene")

    wl = np.linspace(*cfg.wavelength_range, cfg.bands)
    spectra = material_spectra(wl)
    albedo = ortho_albedo(spectra, wl)

    # orthophoto on the DEM grid
    alb = np.zeros((n, n))
    for mat, a in albedo.items():
        alb[material == mat] = a
    ortho = alb * texture + cfg.ortho_noise * rng.standard_normal((n, n))
    ortho = GrayImage(np.clip(ortho, 0.0, 1.0))

    dem = DemGrid(elevations=(cfg.ground_elevation + heights).astype(np.float32), pixel_size=1.0, origin=(0.0, 0.0))

    # SWIR cube: sample the scene at each footprint pixel centre
    m = cfg.swir_size
    ll, ss = np.mgrid[0:m, 0:m].astype(np.float64)
    xw = H[0, 0] * ss + H[0, 1] * ll + H[0, 2]
    yw = H[1, 0] * ss + H[1, 1] * ll + H[1, 2]
    ri = np.clip(np.rint(yw).astype(int), 0, n - 1)
    ci = np.clip(np.rint(xw).astype(int), 0, n - 1)
    swir_material = material[ri, ci]
    labels = np.zeros((m, m), dtype=np.uint8)
    tex = ndimage.map_coordinates(texture, [yw, xw], order=1, mode="nearest")

    data = np.empty((cfg.bands, m, m))
    for mat, spec in spectra.items():
        mask = swir_material == mat
        labels[mask] = MATERIAL_LABEL[mat]
        data[:, mask] = spec[:, None] * tex[mask][None, :]
    data += cfg.spectral_noise * rng.standard_normal(data.shape)
    cube = HyperCube(data=data.astype(np.float32), wavelengths=wl)

    truth = GroundTruth(labels=labels, transform=H, spectra=spectra, material=material, heights=heights)
    return Scene(cube=cube, dem=dem, ortho=ortho, truth=truth, config=cfg)


def write_scene(scene: Scene, out_dir: str | Path) -> dict[str, Path]:
    """Write cube, DEM, orthophoto, truth labels and truth JSON into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "cube": out / "cube.hdr",
        "dem": out / "dem.f32",
        "ortho": out / "ortho.pgm",
        "truth_labels": out / "truth_labels.pgm",
        "truth": out / "truth.json",
    }
    write_cube(paths["cube"], scene.cube, description="swirseg synthetic scene")
    write_grid(paths["dem"], scene.dem)
    write_pgm(paths["ortho"], scene.ortho)
    write_pgm(paths["truth_labels"], scene.truth.labels.astype(np.int64), maxval=255)
    truth = {
        "transform": scene.truth.transform.ravel().tolist(),
        "transform_maps": "swir (sample, line) -> dem pixel (col, row)",
        "config": scene.config.to_dict(),
    }
    paths["truth"].write_text(json.dumps(truth, indent=2) + "\n")
    return paths
