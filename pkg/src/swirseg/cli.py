"""Command-line driver.

Exit codes: 0 success, 2 missing input, 3 validation failure, 4 no acceptable
registration, 5 internal invariant breach.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .features import detect_and_describe, read_features, write_features
from .fusion import (FusedScene, RuleThresholds, associate_voxels, classify, read_segmap, render_segmap,
                     render_wetness, write_segmap)
from .pipeline import (ConfigError, InvariantError, PipelineConfig, PipelineInputs, RegistrationError,
                       run_pipeline, stage_seeds, write_report)
from .raster import (GrayImage, RasterFormatError, extract_band, nearest_band_index, read_cube, read_grid,
                     read_pgm, read_pgm_codes)
from .ransac import HomographyModel
from .search import SearchBudget, refine_global, split_half_search, write_correspondences
from .spectral import WetnessMap, adaptive_threshold, wetness_map
from .synth import generate_scene, write_scene
from .vocabulary import ObjectiveIncreaseError, build_vocabulary, read_vocabulary, write_vocabulary

logger = logging.getLogger("swirseg")

EXIT_OK, EXIT_MISSING, EXIT_INVALID, EXIT_NO_REGISTRATION, EXIT_INVARIANT = 0, 2, 3, 4, 5


class MissingInput(Exception):
    pass


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"input not found: {p}")
    return p


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(_need(args.config)) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "sprt", None) is not None:
        cfg = dataclasses.replace(cfg, ransac=dataclasses.replace(cfg.ransac, sprt=args.sprt == "on"))
    if getattr(args, "refine_global", False):
        cfg = dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, refine_global=True))
    if getattr(args, "mean_normalized", False):
        cfg = dataclasses.replace(cfg, fusion=dataclasses.replace(cfg.fusion, mean_normalized=True))
    cfg.validate()
    return cfg


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    scene = generate_scene(cfg.scene)
    paths = write_scene(scene, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def cmd_wetness(args) -> int:
    cube = read_cube(_need(args.cube))
    wmap = wetness_map(cube, mean_normalized=args.mean_normalized)
    threshold = adaptive_threshold(wmap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wmap.ratios.astype("<f4").tofile(out / "wetness.f32")
    # same sidecar layout as DEM grids, in SWIR pixel units; NaN marks the sentinel
    _write_json(out / "wetness.f32.json", {"width": wmap.width, "height": wmap.height, "pixel_size_m": 1.0,
                                          "origin_x": 0.0, "origin_y": 0.0, "threshold": threshold,
                                          "mean_normalized": args.mean_normalized,
                                          "invalid_pixels": int((~wmap.valid).sum())})
    render_wetness(out / "wetness.ppm", wmap)
    print(json.dumps({"threshold": threshold}))
    return EXIT_OK


def _image_from_args(args) -> GrayImage:
    if args.image:
        return read_pgm(_need(args.image))
    cube = read_cube(_need(args.cube))
    return extract_band(cube, nearest_band_index(cube, args.wavelength))


def cmd_features(args) -> int:
    cfg = _config(args)
    feats = detect_and_describe(_image_from_args(args), cfg.sift)
    write_features(args.out, feats)
    print(json.dumps({"keypoints": len(feats)}))
    return EXIT_OK


def cmd_vocab(args) -> int:
    feats = read_features(_need(args.features))
    dem = read_grid(_need(args.dem))
    k = min(args.k, len(feats))
    if k < 2:
        raise ConfigError(f"need at least 2 descriptors to build a vocabulary, got {len(feats)}")
    vocab = build_vocabulary(feats, dem, k=k, seed=args.seed)
    write_vocabulary(args.out, vocab)
    print(json.dumps({"k": vocab.k, "points": len(vocab.points), "dropped": vocab.points.dropped}))
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _config(args)
    cube = read_cube(_need(args.cube))
    dem = read_grid(_need(args.dem))
    vocab = read_vocabulary(_need(args.vocab))
    if vocab.k < 2:
        raise ConfigError(f"vocabulary has {vocab.k} visual word(s); at least 2 are required")
    seeds = stage_seeds(cfg.seed)
    band_index = nearest_band_index(cube, cfg.fusion.representative_wavelength_um)
    band = extract_band(cube, band_index)
    budget = SearchBudget(cfg.search.max_correspondences, cfg.search.ratio, cfg.search.neighborhood_size,
                          seeds["search"])
    split = split_half_search(band, vocab, dem, budget, seed=seeds["search"], ransac_cfg=cfg.ransac,
                              sift_cfg=cfg.sift, parallel=cfg.search.parallel)
    out = Path(args.out)
    payload = {"band_index": band_index, "accepted": split.accepted, "halves": [h.summary() for h in split.halves]}
    for h in split.halves:
        write_correspondences(out.with_name(f"{out.stem}.half{h.half}.jsonl"), h.correspondences)
    if cfg.search.refine_global and any(h.accepted for h in split.halves):
        corrs, res = refine_global(band, vocab, dem, split, budget, seed=seeds["refine"], ransac_cfg=cfg.ransac,
                                   sift_cfg=cfg.sift)
        payload["global"] = {"n_correspondences": len(corrs), **(res.to_dict() if res else {"accepted": False})}
    _write_json(out, payload)
    print(json.dumps({"accepted": split.accepted, "inliers": [h["n_inliers"] for h in payload["halves"]]}))
    if not any(h.accepted for h in split.halves):
        logger.error("no acceptable neighbourhood found for either half")
        return EXIT_NO_REGISTRATION
    return EXIT_OK


def _pieces_from_registration(path: Path, samples: int):
    reg = json.loads(path.read_text())
    glob = reg.get("global")
    if glob and glob.get("accepted") and glob.get("matrix"):
        return [((0, samples), HomographyModel(np.array(glob["matrix"]).reshape(3, 3)))]
    pieces = []
    for h in reg.get("halves", []):
        m = HomographyModel(np.array(h["matrix"]).reshape(3, 3)) if h.get("accepted") and h.get("matrix") else None
        pieces.append((tuple(h["columns"]), m))
    if not any(m is not None for _, m in pieces):
        raise RegistrationError(f"{path}: no accepted transform")
    return pieces


def cmd_fuse(args) -> int:
    cfg = _config(args)
    cube = read_cube(_need(args.cube))
    dem = read_grid(_need(args.dem))
    pieces = _pieces_from_registration(_need(args.registration), cube.samples)
    wmap = wetness_map(cube, mean_normalized=cfg.fusion.mean_normalized)
    fused = associate_voxels(cube, pieces, dem, wmap, cfg.fusion.ground_window_m)
    np.savez_compressed(args.out, elevation=fused.elevation, height_above_ground=fused.height_above_ground,
                        wetness=fused.wetness, valid=fused.valid, dem_cols=fused.dem_cols, dem_rows=fused.dem_rows)
    print(json.dumps({"fraction_invalid": fused.fraction_invalid}))
    return EXIT_OK


def _load_fused(path: Path) -> FusedScene:
    with np.load(path) as z:
        return FusedScene(z["elevation"], z["height_above_ground"], z["wetness"], z["valid"].astype(bool),
                          z["dem_cols"], z["dem_rows"])


def cmd_segment(args) -> int:
    fused = _load_fused(_need(args.fused))
    wet = args.wet_threshold if args.wet_threshold is not None else adaptive_threshold(WetnessMap(fused.wetness))
    t = RuleThresholds(wet, args.elev_low, args.elev_high, args.canopy)
    segmap = classify(fused, t)
    out = Path(args.out)
    write_segmap(out, segmap)
    render_segmap(out.with_suffix(".ppm"), segmap)
    print(json.dumps(segmap.counts()))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.confusion:
        cm = ev.read_confusion_csv(_need(args.confusion))
        report = ev.metrics_report(cm)
    else:
        if not (args.segmap and args.truth):
            raise ConfigError("evaluate needs --confusion, or both --segmap and --truth")
        pred = read_segmap(_need(args.segmap)).labels
        truth, _ = read_pgm_codes(_need(args.truth))
        if truth.shape != pred.shape:
            raise ConfigError("segmentation and truth maps differ in size")
        lib = ev.sample_library(truth, None, args.n_per_class, args.seed, valid=pred != 255)
        cm = ev.confusion(lib.true_labels, lib.predicted(pred))
        report = ev.metrics_report(cm)
        report["n_per_class"] = args.n_per_class
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps({"overall_accuracy": report["overall_accuracy"]}))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    inputs = None
    if args.cube or args.dem or args.ortho:
        if not (args.cube and args.dem and args.ortho):
            raise ConfigError("real inputs need --cube, --dem and --ortho together")
        truth = read_pgm_codes(_need(args.truth))[0] if args.truth else None
        inputs = PipelineInputs(read_cube(_need(args.cube)), read_grid(_need(args.dem)), read_pgm(_need(args.ortho)),
                                truth)
    try:
        report = run_pipeline(cfg, args.out, inputs)
    except RegistrationError as exc:
        if exc.report is not None and args.out:
            write_report(Path(args.out) / "report.json", exc.report)
        raise
    summary = {"accepted": report["registration"]["accepted"]}
    if "evaluation" in report:
        summary["overall_accuracy"] = report["evaluation"].get("overall_accuracy")
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swirseg", description="SWIR hyperspectral + DEM fusion segmentation")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="pipeline config JSON")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("wetness", help="wetness index map and threshold")
    sp.add_argument("--cube", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mean-normalized", action="store_true")
    sp.set_defaults(func=cmd_wetness)

    sp = sub.add_parser("features", help="detect and describe keypoints")
    common(sp, seed=False)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="PGM image")
    src.add_argument("--cube", help="cube header; uses the band nearest --wavelength")
    sp.add_argument("--wavelength", type=float, default=1.2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("vocab", help="lift orthophoto descriptors onto the DEM and cluster them")
    sp.add_argument("--features", required=True)
    sp.add_argument("--dem", required=True)
    sp.add_argument("--k", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_vocab)

    sp = sub.add_parser("register", help="split-half search and robust fitting")
    common(sp)
    sp.add_argument("--cube", required=True)
    sp.add_argument("--dem", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sprt", choices=("on", "off"))
    sp.add_argument("--refine-global", action="store_true")
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("fuse", help="attach elevations to SWIR pixels")
    common(sp, seed=False)
    sp.add_argument("--cube", required=True)
    sp.add_argument("--dem", required=True)
    sp.add_argument("--registration", required=True)
    sp.add_argument("--out", required=True, help="output .npz")
    sp.add_argument("--mean-normalized", action="store_true")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("segment", help="apply the wetness/height rules")
    sp.add_argument("--fused", required=True)
    sp.add_argument("--out", required=True, help="output PGM; a PPM render is written alongside")
    sp.add_argument("--wet-threshold", type=float)
    sp.add_argument("--elev-low", type=float, default=3.0)
    sp.add_argument("--elev-high", type=float, default=7.0)
    sp.add_argument("--canopy", type=float, default=3.0)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("evaluate", help="confusion matrix and metrics")
    sp.add_argument("--confusion", help="5x5 CSV, rows true, columns predicted")
    sp.add_argument("--segmap")
    sp.add_argument("--truth")
    sp.add_argument("--n-per-class", type=int, default=ev.DEFAULT_SAMPLES_PER_CLASS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pipeline", help="run every stage and write a report")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--sprt", choices=("on", "off"))
    sp.add_argument("--refine-global", action="store_true")
    sp.add_argument("--mean-normalized", action="store_true")
    sp.add_argument("--cube")
    sp.add_argument("--dem")
    sp.add_argument("--ortho")
    sp.add_argument("--truth")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except RegistrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_REGISTRATION
    except (InvariantError, ObjectiveIncreaseError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, RasterFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
