"""Acceptance criteria 1-6. Each test prints one PASS/FAIL line.

Run standalone with ``python3 tests/test_acceptance.py`` or
``pytest tests/test_acceptance.py -s``.
"""

import sys
import time

import numpy as np
import pytest
from scipy import integrate

from swirseg import evaluation as ev
from swirseg.features import match_ratio_test, pairwise_distances
from swirseg.fusion import RuleThresholds, classify_values, height_above_ground
from swirseg.labels import EVAL_ORDER, Label, MANMADE, VEGETATION
from swirseg.pipeline import PipelineConfig, comparable, run_pipeline
from swirseg.ransac import fit_homography_dlt, ransac_sprt
from swirseg.search import SearchBudget, find_correspondences
from swirseg.spectral import BetaParams, adaptive_threshold, beta_pdf, wetness_index, wetness_map
from swirseg.synth import SceneConfig, generate_scene
from swirseg.vocabulary import kmeans

from conftest import planted_instance, project, random_homography
from test_fusion import naive_hag
from test_search import make_vocab, oracle, queries_from
from test_spectral import direct_ratio

NAMES = [c.name for c in EVAL_ORDER]


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


def test_criterion_1_reference_metrics(capsys):
    t0 = time.perf_counter()
    cm = ev.ConfusionMatrix(np.array([[478, 1, 8, 13, 0], [3, 491, 0, 0, 6], [54, 0, 446, 0, 0],
                                      [7, 4, 41, 448, 0], [0, 5, 0, 0, 495]]))
    m = ev.metrics(cm)
    checks = [
        np.allclose([m.recall[n] for n in NAMES], [95.6, 98.2, 89.2, 89.6, 99.0], atol=0.05),
        np.allclose([m.precision[n] for n in NAMES], [88.1, 98.0, 90.1, 97.2, 98.8], atol=0.15),
        np.allclose([m.accuracy[n] for n in NAMES], [96.6, 99.2, 95.9, 97.4, 99.6], atol=0.05),
        abs(m.overall_accuracy - 97.7) <= 0.05,
    ]
    elapsed = time.perf_counter() - t0
    ok = all(checks) and elapsed < 1.0
    verdict(capsys, 1, ok, f"overall {m.overall_accuracy:.3f}%, {elapsed * 1000:.1f} ms")
    assert ok


def test_criterion_2_end_to_end(capsys):
    accepted, rms_ok, acc_ok, slow = 0, 0, 0, 0
    worst_rms, worst_acc, worst_t = 0.0, 100.0, 0.0
    for seed in range(1, 11):
        t0 = time.perf_counter()
        try:
            report = run_pipeline(PipelineConfig().with_seed(seed))
        except Exception:
            continue
        elapsed = time.perf_counter() - t0
        worst_t = max(worst_t, elapsed)
        slow += elapsed >= 60
        reg = report["registration"]
        if not (reg["accepted"] and all(h["n_inliers"] > 5 for h in reg["halves"])):
            continue
        accepted += 1
        rms = max(reg["rms_to_truth_px"])
        worst_rms = max(worst_rms, rms)
        rms_ok += rms <= 1.5
        acc = report["evaluation"]["unrounded"]["overall_accuracy"]
        worst_acc = min(worst_acc, acc)
        acc_ok += acc >= 95.0
    ok = accepted >= 9 and rms_ok == accepted and acc_ok == accepted and slow == 0
    verdict(capsys, 2, ok, f"{accepted}/10 accepted, worst RMS {worst_rms:.2f} px, "
                           f"worst accuracy {worst_acc:.1f}%, slowest {worst_t:.1f} s")
    assert ok


def test_criterion_3_wetness_separation(capsys):
    worst_veg, worst_man, worst_t = 1.0, 1.0, 0.0
    for seed in range(1, 11):
        scene = generate_scene(SceneConfig(seed=seed))
        t0 = time.perf_counter()
        wm = wetness_map(scene.cube)
        t = adaptive_threshold(wm)
        worst_t = max(worst_t, time.perf_counter() - t0)
        labels = scene.truth.labels
        veg = np.isin(labels, [int(c) for c in VEGETATION])
        man = np.isin(labels, [int(c) for c in MANMADE])
        worst_veg = min(worst_veg, float(np.mean(wm.ratios[veg] > t)))
        worst_man = min(worst_man, float(np.mean(wm.ratios[man] < t)))
    ok = worst_veg >= 0.99 and worst_man >= 0.99 and worst_t < 5.0
    verdict(capsys, 3, ok, f"vegetation above {100 * worst_veg:.2f}%, manmade below {100 * worst_man:.2f}%, "
                           f"slowest {worst_t:.2f} s")
    assert ok


def test_criterion_4_sprt_benefit(capsys):
    on_total, off_total, good, trials = 0, 0, 0, 0
    for fraction in (0.3, 0.4, 0.5, 0.6, 0.7):
        for seed in range(20):
            src, dst, h, mask = planted_instance(1000 * seed + int(100 * fraction), n=100,
                                                 outlier_fraction=fraction)
            on = ransac_sprt(src, dst, tolerance_px=1.0, seed=seed, sprt_on=True)
            off = ransac_sprt(src, dst, tolerance_px=1.0, seed=seed, sprt_on=False)
            on_total += on.points_evaluated
            off_total += off.points_evaluated
            trials += 1
            if on.model is not None:
                err = np.linalg.norm(on.model.apply(src[mask]) - project(h, src[mask]), axis=1).mean()
                good += err <= 0.5
    ok = on_total < off_total and good >= 0.95 * trials
    verdict(capsys, 4, ok, f"mean points evaluated {on_total / trials:.0f} with SPRT vs {off_total / trials:.0f} "
                           f"without, {good}/{trials} models within 0.5 px")
    assert ok


def test_criterion_5_oracles(capsys):
    failures = []
    for seed in range(4):
        rng = np.random.default_rng(seed)
        vocab = make_vocab(rng, n_desc=200, k=6, n_points=90)
        q = queries_from(vocab.descriptors[rng.permutation(200)[:150]], rng, noise=0.02)
        got = [(c.query_index, c.point_id) for c in find_correspondences(q, vocab, SearchBudget(100, 0.95))]
        if got != [r[:2] for r in oracle(q, vocab, 100, 0.95)]:
            failures.append(f"search seed {seed}")

    rng = np.random.default_rng(0)
    for k in (2, 8, 32):
        hist = kmeans(rng.normal(size=(400, 16)), k, seed=k, check_monotone=False).objective_history
        if any(b > a for a, b in zip(hist, hist[1:])):
            failures.append(f"k-means k={k}")

    for w in (3, 8, 64):
        z = rng.normal(100, 5, (64, 64))
        if not np.array_equal(height_above_ground(z, w), naive_hag(z, w)):
            failures.append(f"height window {w}")

    wl = np.linspace(0.9, 2.5, 64)
    spectra = rng.uniform(0.01, 1.0, (1000, 64))
    got = np.array([wetness_index(s, wl) for s in spectra])
    ref = np.array([direct_ratio(s, wl) for s in spectra])
    if not np.allclose(got, ref, rtol=1e-9, atol=0):
        failures.append("wetness index")

    verdict(capsys, 5, not failures, "all four oracles agree" if not failures else ", ".join(failures))
    assert not failures


def test_criterion_6_invariants(capsys):
    failures = []
    rng = np.random.default_rng(6)

    q, t = rng.random((80, 128)), rng.random((60, 128))
    d = pairwise_distances(q, t)
    for qi, ti, _ in match_ratio_test(q, t, 0.8):
        s = np.sort(d[qi])
        if not (d[qi, ti] == s[0] and s[1] > 0 and s[0] / s[1] <= 0.8):
            failures.append("ratio test")
            break

    for _ in range(50):
        h = random_homography(rng)
        src = rng.uniform(0, 100, (4, 2))
        if not np.allclose(fit_homography_dlt(src, project(h, src)).apply(src), project(h, src), atol=1e-9):
            failures.append("DLT exactness")
            break

    for a, b in [(0.5, 0.5), (1, 1), (2, 5), (5, 2)]:
        total, _ = integrate.quad(lambda x: beta_pdf(x, BetaParams(a, b)), 0, 1, limit=200)
        if abs(total - 1) > 1e-6:
            failures.append(f"beta pdf ({a}, {b})")

    th = RuleThresholds(1.0)
    ww, hh = np.meshgrid(np.linspace(0.5, 1.5, 41), np.linspace(-2, 20, 89), indexing="ij")
    lab = classify_values(ww, hh, th)
    wet = ww >= 1.0
    rank = np.select([lab == Label.ROAD_OTHER, lab == Label.HOUSE, lab == Label.BUILDING,
                      lab == Label.GRASS, lab == Label.TREE], [0, 1, 2, 0, 1], -1)
    if (not np.isin(lab[wet], [Label.GRASS, Label.TREE]).all()
            or not np.isin(lab[~wet], [Label.ROAD_OTHER, Label.HOUSE, Label.BUILDING]).all()
            or (np.diff(rank, axis=1) < 0).any()):
        failures.append("classify grid")

    def same(f):
        return f() == f()

    det = {
        "scene": same(lambda: generate_scene(SceneConfig(seed=2)).cube.data.tobytes()),
        "k-means": same(lambda: kmeans(np.arange(300.0).reshape(100, 3) % 17, 5, seed=1).labels.tobytes()),
        "ransac": same(lambda: str(ransac_sprt(*planted_instance(3, outlier_fraction=0.5)[:2], seed=3).to_dict())),
        "sampling": same(lambda: ev.sample_library(np.repeat(np.arange(5)[:, None], 30, 1), n_per_class=9,
                                                   seed=4).cols.tobytes()),
        "pipeline": same(lambda: comparable(run_pipeline(PipelineConfig().with_seed(2)))),
    }
    failures += [f"determinism {k}" for k, v in det.items() if not v]

    verdict(capsys, 6, not failures, "all invariant suites hold" if not failures else ", ".join(failures))
    assert not failures


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
