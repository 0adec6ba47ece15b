"""End-to-end run: scene -> wetness -> features -> vocabulary -> split search -> fusion -> evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .features import SiftConfig, detect_and_describe
from .fusion import RuleThresholds, associate_voxels, classify, render_segmap, render_wetness, write_segmap
from .raster import DemGrid, GrayImage, HyperCube, extract_band, nearest_band_index
from .ransac import HomographyModel
from .search import RansacSettings, SearchBudget, SplitSearchResult, refine_global, split_half_search
from .spectral import adaptive_threshold, wetness_map
from .synth import SceneConfig, generate_scene, write_scene
from .vocabulary import DEFAULT_K, build_vocabulary

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class RegistrationError(RuntimeError):
    """No half of the SWIR footprint found an acceptable neighbourhood."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report


class InvariantError(AssertionError):
    pass


@dataclass
class VocabSettings:
    k: int = DEFAULT_K
    max_iters: int = 50


@dataclass
class SearchSettings:
    max_correspondences: int = 100
    ratio: float = 0.7
    neighborhood_size: tuple[int, int] | None = None
    refine_global: bool = False
    parallel: bool = True


@dataclass
class FusionSettings:
    representative_wavelength_um: float = 1.2
    mean_normalized: bool = False
    elev_low: float = 3.0
    elev_high: float = 7.0
    canopy: float = 3.0
    ground_window_m: float | None = 64.0


@dataclass
class EvalSettings:
    n_per_class: int = ev.DEFAULT_SAMPLES_PER_CLASS


_SECTIONS = {
    "scene": SceneConfig,
    "sift": SiftConfig,
    "vocab": VocabSettings,
    "search": SearchSettings,
    "ransac": RansacSettings,
    "fusion": FusionSettings,
    "evaluation": EvalSettings,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    sift: SiftConfig = field(default_factory=SiftConfig)
    vocab: VocabSettings = field(default_factory=VocabSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    ransac: RansacSettings = field(default_factory=RansacSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - {"seed", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "seed" in data:
            kwargs["seed"] = data["seed"]
        for name, klass in _SECTIONS.items():
            if name in data:
                kwargs[name] = _section(klass, data[name], name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed, scene=dataclasses.replace(self.scene, seed=seed))

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        try:
            self.scene.validate()
            SearchBudget(self.search.max_correspondences, self.search.ratio, self.search.neighborhood_size)
            RuleThresholds(0.0, self.fusion.elev_low, self.fusion.elev_high, self.fusion.canopy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.vocab.k < 2:
            raise ConfigError("vocabulary needs at least 2 visual words")
        if self.vocab.max_iters < 1:
            raise ConfigError("vocab.max_iters must be positive")
        if not 0 < self.ransac.confidence < 1 or self.ransac.tolerance_px <= 0:
            raise ConfigError("ransac confidence must lie in (0, 1) and tolerance must be positive")
        if self.ransac.model not in ("homography", "similarity"):
            raise ConfigError(f"unknown model family {self.ransac.model!r}")
        if self.evaluation.n_per_class < 1:
            raise ConfigError("evaluation.n_per_class must be positive")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _section(klass, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    names = {f.name: f for f in dataclasses.fields(klass)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    values = {}
    for key, value in data.items():
        default = getattr(klass(), key) if key != "seed" else 0
        values[key] = tuple(value) if isinstance(value, list) and (default is None or isinstance(default, tuple)) else value
    try:
        return klass(**values)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def stage_seeds(seed: int) -> dict[str, int]:
    """Independent integer seeds for each randomized stage."""
    names = ("vocab", "search", "refine", "sampling")
    states = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(s.generate_state(1)[0]) for n, s in zip(names, states)}


@dataclass
class PipelineInputs:
    cube: HyperCube
    dem: DemGrid
    ortho: GrayImage
    truth_labels: np.ndarray | None = None
    truth_transform: np.ndarray | None = None


def transform_rms(model: HomographyModel, truth: np.ndarray, columns: tuple[int, int], lines: int) -> float:
    """RMS distance between ``model`` and ``truth`` over the pixel centres of a column range."""
    c0, c1 = columns
    ll, ss = np.mgrid[0:lines, c0:c1]
    pts = np.column_stack([ss.ravel(), ll.ravel()]).astype(np.float64)
    ref = HomographyModel(truth).apply(pts)
    got = model.apply(pts)
    return float(np.sqrt(np.mean(np.sum((ref - got) ** 2, axis=1))))


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path | None = None,
                 inputs: PipelineInputs | None = None) -> dict:
    """Run every stage and return the run report (also written to ``out_dir``).

    Without ``inputs`` a synthetic scene is generated from ``cfg.scene``.
    Raises :class:`RegistrationError` when neither half registers.
    """
    cfg.validate()
    t_start = time.perf_counter()
    timing: dict[str, float] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def lap(name, t0):
        timing[name] = round(time.perf_counter() - t0, 4)

    seeds = stage_seeds(cfg.seed)
    report: dict = {"config": cfg.to_dict(), "stage_seeds": seeds}

    t0 = time.perf_counter()
    if inputs is None:
        scene = generate_scene(cfg.scene)
        inputs = PipelineInputs(scene.cube, scene.dem, scene.ortho, scene.truth.labels, scene.truth.transform)
        if out is not None:
            write_scene(scene, out / "scene")
        report["input"] = "synthetic"
    else:
        report["input"] = "files"
    lap("scene", t0)
    cube, dem = inputs.cube, inputs.dem

    t0 = time.perf_counter()
    wmap = wetness_map(cube, mean_normalized=cfg.fusion.mean_normalized)
    threshold = adaptive_threshold(wmap)
    report["wetness"] = {"threshold": threshold, "invalid_pixels": int((~wmap.valid).sum()),
                         "mean_normalized": cfg.fusion.mean_normalized}
    lap("wetness", t0)

    t0 = time.perf_counter()
    ortho_feats = detect_and_describe(inputs.ortho, cfg.sift)
    k = min(cfg.vocab.k, len(ortho_feats))
    if k < 2:
        raise RegistrationError(f"orthophoto produced {len(ortho_feats)} descriptors; need at least 2")
    if k < cfg.vocab.k:
        logger.info("vocabulary size clamped from %d to %d descriptors", cfg.vocab.k, k)
    vocab = build_vocabulary(ortho_feats, dem, k=k, seed=seeds["vocab"], max_iters=cfg.vocab.max_iters)
    report["vocabulary"] = {"ortho_descriptors": len(ortho_feats), "k_requested": cfg.vocab.k, "k": vocab.k,
                            "points": len(vocab.points), "dropped": vocab.points.dropped}
    lap("vocabulary", t0)

    t0 = time.perf_counter()
    band_index = nearest_band_index(cube, cfg.fusion.representative_wavelength_um)
    band = extract_band(cube, band_index)
    budget = SearchBudget(cfg.search.max_correspondences, cfg.search.ratio, cfg.search.neighborhood_size, seeds["search"])
    split = split_half_search(band, vocab, dem, budget, seed=seeds["search"], ransac_cfg=cfg.ransac,
                              sift_cfg=cfg.sift, parallel=cfg.search.parallel)
    pieces = [(h.columns, h.ransac.model if h.accepted else None) for h in split.halves]
    registration = {
        "band_index": band_index,
        "band_wavelength_um": float(cube.wavelengths[band_index]),
        "accepted": split.accepted,
        "halves": [h.summary() for h in split.halves],
    }
    if cfg.search.refine_global and any(h.accepted for h in split.halves):
        corrs, res = refine_global(band, vocab, dem, split, budget, seed=seeds["refine"], ransac_cfg=cfg.ransac,
                                   sift_cfg=cfg.sift)
        registration["global"] = {"n_correspondences": len(corrs), **(res.to_dict() if res else {"accepted": False})}
        if res is not None and res.accepted:
            pieces = [((0, cube.samples), res.model)]
    if inputs.truth_transform is not None:
        registration["rms_to_truth_px"] = [
            transform_rms(m, inputs.truth_transform, cols, cube.lines) if m is not None else None
            for cols, m in pieces
        ]
    report["registration"] = registration
    lap("registration", t0)
    if out is not None:
        (out / "registration.json").write_text(json.dumps(registration, indent=2) + "\n")
    if not any(h.accepted for h in split.halves):
        report["timing"] = timing
        raise RegistrationError("no acceptable neighbourhood found for either half", report)
    if not split.accepted:
        logger.warning("only one half registered; the other half's pixels are marked invalid")

    t0 = time.perf_counter()
    fused = associate_voxels(cube, pieces, dem, wmap, cfg.fusion.ground_window_m)
    thresholds = RuleThresholds(threshold, cfg.fusion.elev_low, cfg.fusion.elev_high, cfg.fusion.canopy)
    segmap = classify(fused, thresholds)
    invalid = segmap.labels == 255
    if not np.array_equal(invalid, ~fused.valid):
        raise InvariantError("Invalid labels disagree with the fused validity mask")
    report["segmentation"] = {"fraction_invalid": fused.fraction_invalid, "counts": segmap.counts(),
                              "thresholds": dataclasses.asdict(thresholds)}
    lap("segmentation", t0)
    if out is not None:
        write_segmap(out / "segmap.pgm", segmap)
        render_segmap(out / "segmap.ppm", segmap)
        render_wetness(out / "wetness.ppm", wmap)

    if inputs.truth_labels is not None:
        t0 = time.perf_counter()
        report["evaluation"] = _evaluate(inputs.truth_labels, fused, segmap.labels, cfg.evaluation.n_per_class,
                                         seeds["sampling"])
        lap("evaluation", t0)

    timing["total"] = round(time.perf_counter() - t_start, 4)
    report["timing"] = timing
    if out is not None:
        write_report(out / "report.json", report)
    return report


def _evaluate(truth_labels, fused, predicted, n_per_class: int, seed: int) -> dict:
    available = ev.available_per_class(truth_labels, fused.valid)
    n = n_per_class
    smallest = min(available.values())
    if smallest < n:
        logger.warning("smallest class has %d usable pixels; sampling %d per class instead of %d",
                       smallest, smallest, n_per_class)
        n = smallest
    if n < 1:
        return {"skipped": "a class has no usable pixels", "available": {c.name: v for c, v in available.items()}}
    lib = ev.sample_library(truth_labels, fused, n, seed)
    cm = ev.confusion(lib.true_labels, lib.predicted(predicted))
    result = ev.metrics_report(cm)
    result["n_per_class"] = n
    result["available"] = {c.name: v for c, v in available.items()}
    return result


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def comparable(report: dict) -> str:
    """Serialised report without the timing section, for reproducibility checks."""
    return json.dumps({k: v for k, v in report.items() if k != "timing"}, sort_keys=True)
