"""2D-to-3D correspondence search against a visual vocabulary.

``find_correspondences`` scans query descriptors in order, finds the two
nearest visual words, applies the ratio test in word space, picks the DEM
point of the nearest word whose descriptor is closest to the query, keeps
the closer query when two queries land on one point, and stops once the
requested number of correspondences is reached.

``split_half_search`` runs that procedure separately for the left and right
halves of the SWIR band image, each half visiting candidate orthophoto
neighbourhoods in a seeded random order until RANSAC accepts one.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSet, SiftConfig, detect_and_describe, pairwise_distances, passes_ratio, two_nearest
from .raster import DemGrid, GrayImage
from .ransac import DegenerateConfigurationError, RansacResult, ransac_sprt
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchBudget:
    max_correspondences: int = 100
    ratio: float = 0.7
    neighborhood_size: tuple[int, int] | None = None  # (width, height) in DEM pixels
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_correspondences < 1:
            raise ValueError("max_correspondences must be >= 1")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")


@dataclass(frozen=True)
class Correspondence:
    query_index: int
    image_xy: tuple[float, float]
    point_id: int
    world_xyz: tuple[float, float, float]
    distance: float
    # query-to-word distances behind the ratio test
    word_distance1: float
    word_distance2: float

    def to_json(self) -> dict:
        return {
            "image_x": self.image_xy[0],
            "image_y": self.image_xy[1],
            "world_x": self.world_xyz[0],
            "world_y": self.world_xyz[1],
            "world_z": self.world_xyz[2],
            "distance": self.distance,
            "point_id": self.point_id,
            "query_index": self.query_index,
            "word_distance1": self.word_distance1,
            "word_distance2": self.word_distance2,
        }


def find_correspondences(queries: FeatureSet, vocab: Vocabulary, budget: SearchBudget | None = None,
                         allowed_points: np.ndarray | None = None) -> list[Correspondence]:
    """Sequential 2D-to-3D search.

    ``allowed_points`` is an optional boolean mask over point ids restricting
    which DEM points may be matched (used for neighbourhood search). A query
    whose nearest word has no allowed member is skipped.
    """
    budget = budget or SearchBudget()
    if vocab.k < 2:
        raise ValueError("vocabulary needs at least two visual words")
    if len(queries) == 0:
        return []

    word_dist = pairwise_distances(queries.descriptors, vocab.centroids)
    w1, d1, _, d2 = two_nearest(word_dist)
    ok = passes_ratio(d1, d2, budget.ratio)

    member_ok = np.ones(len(vocab.descriptor_point), dtype=bool)
    if allowed_points is not None:
        member_ok = np.asarray(allowed_points, dtype=bool)[vocab.descriptor_point]
    members: dict[int, np.ndarray] = {}

    accepted: dict[int, Correspondence] = {}
    for qi in range(len(queries)):
        if len(accepted) >= budget.max_correspondences:
            break
        if not ok[qi]:
            continue
        word = int(w1[qi])
        if word not in members:
            idx = vocab.word_members(word)
            members[word] = idx[member_ok[idx]]
        cand = members[word]
        if cand.size == 0:
            continue
        dd = pairwise_distances(queries.descriptors[qi:qi + 1], vocab.descriptors[cand])[0]
        j = int(np.argmin(dd))
        pid = int(vocab.descriptor_point[cand[j]])
        prev = accepted.get(pid)
        if prev is not None and prev.distance <= dd[j]:
            continue
        x, y, z = vocab.points.xyz[pid]
        accepted[pid] = Correspondence(
            query_index=qi,
            image_xy=(float(queries.keypoints[qi, 0]), float(queries.keypoints[qi, 1])),
            point_id=pid,
            world_xyz=(float(x), float(y), float(z)),
            distance=float(dd[j]),
            word_distance1=float(d1[qi]),
            word_distance2=float(d2[qi]),
        )
    return sorted(accepted.values(), key=lambda c: c.query_index)


def correspondence_arrays(corrs: list[Correspondence], dem: DemGrid) -> tuple[np.ndarray, np.ndarray]:
    """Image points and DEM-pixel targets for model fitting."""
    if not corrs:
        return np.zeros((0, 2)), np.zeros((0, 2))
    src = np.array([c.image_xy for c in corrs], dtype=np.float64)
    world = np.array([c.world_xyz[:2] for c in corrs], dtype=np.float64)
    col, row = dem.world_to_pixel(world[:, 0], world[:, 1])
    return src, np.column_stack([col, row])


def write_correspondences(path: str | Path, corrs: list[Correspondence]) -> None:
    with open(path, "w") as fh:
        for c in corrs:
            fh.write(json.dumps(c.to_json()) + "\n")


def read_correspondences(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Split-half neighbourhood search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Half-open DEM pixel window ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def contains(self, cols, rows) -> np.ndarray:
        cols, rows = np.asarray(cols), np.asarray(rows)
        return (cols >= self.x0) & (cols < self.x1) & (rows >= self.y0) & (rows < self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def encloses(self, cols, rows, margin: float = 0.0) -> bool:
        """True when every point lies inside the window grown by ``margin`` pixels."""
        cols, rows = np.asarray(cols, dtype=np.float64), np.asarray(rows, dtype=np.float64)
        return bool(np.all(np.isfinite(cols)) and np.all(np.isfinite(rows))
                    and np.all(cols >= self.x0 - margin) and np.all(cols <= self.x1 - 1 + margin)
                    and np.all(rows >= self.y0 - margin) and np.all(rows <= self.y1 - 1 + margin))


@dataclass(frozen=True)
class RansacSettings:
    tolerance_px: float = 2.0
    confidence: float = 0.99
    sprt: bool = True
    model: str = "homography"


@dataclass
class Attempt:
    region: Region
    n_correspondences: int
    n_inliers: int
    accepted: bool


@dataclass
class HalfResult:
    half: int
    columns: tuple[int, int]
    accepted: bool
    region: Region | None
    correspondences: list[Correspondence]
    ransac: RansacResult | None
    attempts: list[Attempt] = field(default_factory=list)
    n_queries: int = 0

    def summary(self) -> dict:
        return {
            "half": self.half,
            "columns": list(self.columns),
            "accepted": self.accepted,
            "region": self.region.as_list() if self.region else None,
            "n_queries": self.n_queries,
            "n_correspondences": len(self.correspondences),
            "n_inliers": self.ransac.n_inliers if self.ransac else 0,
            "iterations": self.ransac.iterations if self.ransac else 0,
            "points_evaluated": self.ransac.points_evaluated if self.ransac else 0,
            "visit_order": [a.region.as_list() for a in self.attempts],
            "matrix": self.ransac.model.to_list() if self.ransac and self.ransac.model is not None else None,
        }


@dataclass
class SplitSearchResult:
    halves: list[HalfResult]

    @property
    def accepted(self) -> bool:
        return all(h.accepted for h in self.halves)


def candidate_regions(dem_shape: tuple[int, int], size: tuple[int, int]) -> list[Region]:
    """Windows on a half-size stride (50% overlap) that cover the DEM."""
    height, width = dem_shape
    sw, sh = size
    sx, sy = max(sw // 2, 1), max(sh // 2, 1)
    xs = range(0, max(width - sw, 0) + sx, sx)
    ys = range(0, max(height - sh, 0) + sy, sy)
    out = []
    for y0 in ys:
        for x0 in xs:
            x0c, y0c = min(x0, max(width - sw, 0)), min(y0, max(height - sh, 0))
            out.append(Region(x0c, y0c, min(x0c + sw, width), min(y0c + sh, height)))
    # de-duplicate while keeping grid order
    seen, uniq = set(), []
    for r in out:
        if r not in seen:
            seen.add(r)
            uniq.append(r)
    return uniq


def half_columns(width: int) -> list[tuple[int, int]]:
    mid = width // 2
    return [(0, mid), (mid, width)]


def _footprint_inside(model, cols: tuple[int, int], lines: int, region: Region, margin: float) -> bool:
    c0, c1 = cols
    corners = np.array([[c0, 0], [c1 - 1, 0], [c0, lines - 1], [c1 - 1, lines - 1]], dtype=np.float64)
    xy = model.apply(corners)
    return region.encloses(xy[:, 0], xy[:, 1], margin)


def _search_half(half: int, cols: tuple[int, int], band: np.ndarray, vocab: Vocabulary, dem: DemGrid,
                 budget: SearchBudget, seed_seq: np.random.SeedSequence, ransac_cfg: RansacSettings,
                 sift_cfg: SiftConfig | None) -> HalfResult:
    c0, c1 = cols
    feats = detect_and_describe(band[:, c0:c1], sift_cfg)
    if len(feats):
        kp = feats.keypoints.copy()
        kp[:, 0] += c0
        feats = FeatureSet(kp, feats.descriptors)

    size = budget.neighborhood_size or (2 * (c1 - c0), 2 * band.shape[0])
    regions = candidate_regions((dem.height, dem.width), size)
    order_seed, ransac_seed = seed_seq.spawn(2)
    visit = np.random.default_rng(order_seed).permutation(len(regions))
    ransac_seeds = ransac_seed.generate_state(len(regions))

    point_cols, point_rows = vocab.points.pixels[:, 1], vocab.points.pixels[:, 0]
    best: HalfResult | None = None
    attempts: list[Attempt] = []
    for step, ri in enumerate(visit):
        region = regions[int(ri)]
        allowed = region.contains(point_cols, point_rows)
        corrs = find_correspondences(feats, vocab, budget, allowed)
        result = None
        if len(corrs) >= 4:
            src, dst = correspondence_arrays(corrs, dem)
            try:
                result = ransac_sprt(src, dst, ransac_cfg.tolerance_px, ransac_cfg.confidence,
                                     seed=int(ransac_seeds[step]), sprt_on=ransac_cfg.sprt, model=ransac_cfg.model)
            except DegenerateConfigurationError:
                result = None
        n_in = result.n_inliers if result else 0
        accepted = bool(result and result.accepted)
        if accepted and not _footprint_inside(result.model, cols, band.shape[0], region, ransac_cfg.tolerance_px):
            logger.debug("half %d region %s: model maps the half outside the region", half, region.as_list())
            accepted = False
        attempts.append(Attempt(region, len(corrs), n_in, accepted))
        logger.debug("half %d region %s: %d correspondences, %d inliers", half, region.as_list(), len(corrs), n_in)
        candidate = HalfResult(half, cols, accepted, region, corrs, result, attempts, len(feats))
        if best is None or n_in > (best.ransac.n_inliers if best.ransac else 0):
            best = candidate
        if accepted:
            return candidate
    if best is None:
        return HalfResult(half, cols, False, None, [], None, attempts, len(feats))
    best.accepted = False
    best.attempts = attempts
    return best


def split_half_search(swir_band: GrayImage, vocab: Vocabulary, dem: DemGrid, budget: SearchBudget | None = None,
                      seed: int = 0, ransac_cfg: RansacSettings | None = None, sift_cfg: SiftConfig | None = None,
                      parallel: bool = True) -> SplitSearchResult:
    """Localise the left and right halves of ``swir_band`` independently.

    A half stops at the first neighbourhood whose correspondences pass RANSAC
    acceptance and whose model maps the half's corners inside that
    neighbourhood (within the inlier tolerance). Each half receives its own
    derived seed, so running the halves in parallel or one after the other
    gives identical results.
    """
    budget = budget or SearchBudget()
    ransac_cfg = ransac_cfg or RansacSettings()
    band = swir_band.pixels
    cols = half_columns(band.shape[1])
    if min(c1 - c0 for c0, c1 in cols) < 32 or band.shape[0] < 32:
        raise ValueError(f"SWIR image {band.shape} too small to split into two halves of at least 32 px")
    seeds = np.random.SeedSequence(seed).spawn(2)
    args = [(h, cols[h], band, vocab, dem, budget, seeds[h], ransac_cfg, sift_cfg) for h in range(2)]
    if parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            halves = list(pool.map(lambda a: _search_half(*a), args))
    else:
        halves = [_search_half(*a) for a in args]
    return SplitSearchResult(halves)


def refine_global(swir_band: GrayImage, vocab: Vocabulary, dem: DemGrid, split: SplitSearchResult,
                  budget: SearchBudget | None = None, seed: int = 0, ransac_cfg: RansacSettings | None = None,
                  sift_cfg: SiftConfig | None = None) -> tuple[list[Correspondence], RansacResult | None]:
    """Optional whole-mosaic pass over the union of the halves' winning regions."""
    budget = budget or SearchBudget()
    ransac_cfg = ransac_cfg or RansacSettings()
    regions = [h.region for h in split.halves if h.region is not None]
    if not regions:
        return [], None
    union = Region(min(r.x0 for r in regions), min(r.y0 for r in regions),
                   max(r.x1 for r in regions), max(r.y1 for r in regions))
    feats = detect_and_describe(swir_band, sift_cfg)
    allowed = union.contains(vocab.points.pixels[:, 1], vocab.points.pixels[:, 0])
    corrs = find_correspondences(feats, vocab, budget, allowed)
    if len(corrs) < 4:
        return corrs, None
    src, dst = correspondence_arrays(corrs, dem)
    return corrs, ransac_sprt(src, dst, ransac_cfg.tolerance_px, ransac_cfg.confidence, seed=seed,
                              sprt_on=ransac_cfg.sprt, model=ransac_cfg.model)
