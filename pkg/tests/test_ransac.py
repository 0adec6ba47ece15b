import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swirseg.ransac import (DegenerateConfigurationError, HomographyModel, SprtState, fit_homography_dlt,
                            fit_similarity, ransac_sprt, read_model, reprojection_error, reprojection_errors,
                            write_model)

from conftest import planted_instance, project, random_homography

SQUARE = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])


def test_dlt_identity():
    h = fit_homography_dlt(SQUARE, SQUARE).matrix
    np.testing.assert_allclose(h, np.eye(3), atol=1e-9)


def test_dlt_translation():
    h = fit_homography_dlt(SQUARE, SQUARE + [3.5, -7.0]).matrix
    np.testing.assert_allclose(h, [[1, 0, 3.5], [0, 1, -7.0], [0, 0, 1]], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dlt_exact_on_four_points(seed):
    rng = np.random.default_rng(seed)
    h0 = random_homography(rng)
    src = np.array([[0, 0], [100, 0], [100, 100], [0, 100]], float) + rng.uniform(-10, 10, (4, 2))
    model = fit_homography_dlt(src, project(h0, src))
    np.testing.assert_allclose(model.apply(src), project(h0, src), atol=1e-9)


def test_dlt_recovers_random_h_from_twenty_pairs(rng):
    h0 = random_homography(rng)
    src = rng.uniform(0, 100, size=(20, 2))
    h = fit_homography_dlt(src, project(h0, src)).matrix
    h0n = h0 / h0[2, 2]
    assert np.abs(h - h0n).max() / np.abs(h0n).max() <= 1e-6


@pytest.mark.parametrize("src", [
    np.array([[0, 0], [1, 1], [2, 2], [0, 5]], float),
    np.array([[0, 0], [0, 0], [1, 0], [0, 1]], float),
])
def test_dlt_degenerate(src):
    with pytest.raises(DegenerateConfigurationError):
        fit_homography_dlt(src, src)


def test_dlt_needs_four():
    with pytest.raises(ValueError):
        fit_homography_dlt(SQUARE[:3], SQUARE[:3])


def test_reprojection_examples():
    eye = HomographyModel.identity()
    assert reprojection_error(eye, (2, 3), (2, 3)) == 0.0
    assert reprojection_error(eye, (0, 0), (3, 4)) == 5.0


def test_reprojection_oracle(rng):
    m = HomographyModel(random_homography(rng))
    src, dst = rng.uniform(0, 100, (25, 2)), rng.uniform(0, 100, (25, 2))
    ref = []
    for (x, y), (u, v) in zip(src, dst):
        a, b, c = m.matrix @ np.array([x, y, 1.0])
        ref.append(np.hypot(a / c - u, b / c - v))
    np.testing.assert_allclose(reprojection_errors(m, src, dst), ref, rtol=1e-12)


def test_point_at_infinity_is_outlier():
    m = HomographyModel(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0.0]]) + np.diag([0, 0, 1e-15]))
    assert reprojection_error(m, (0.0, 5.0), (0.0, 5.0)) == np.inf


def test_model_normalisation():
    m = HomographyModel(2 * np.eye(3))
    np.testing.assert_array_equal(m.matrix, np.eye(3))
    z = HomographyModel(np.array([[1.0, 0, 0], [0, 1, 0], [0, 1, 0]]))
    assert np.linalg.norm(z.matrix) == pytest.approx(1.0)


def test_similarity_fit(rng):
    t = 0.3
    h = np.array([[1.2 * np.cos(t), -1.2 * np.sin(t), 5], [1.2 * np.sin(t), 1.2 * np.cos(t), -2], [0, 0, 1]])
    src = rng.uniform(0, 50, (6, 2))
    np.testing.assert_allclose(fit_similarity(src, project(h, src)).matrix, h, atol=1e-9)


# ---------------------------------------------------------------------------
# RANSAC + SPRT
# ---------------------------------------------------------------------------


def test_sprt_state_invariants():
    s = SprtState()
    assert 0 < s.delta < s.epsilon < 1
    assert s.A > 1
    c = (1 - s.delta) * np.log((1 - s.delta) / (1 - s.epsilon)) + s.delta * np.log(s.delta / s.epsilon)
    assert s.A == pytest.approx(c * s.t_m / s.m_s + 1 + np.log(s.A), abs=1e-3)
    s.on_rejected(0.5)
    assert 0.01 <= s.delta <= s.epsilon / 2


def test_identity_pairs_accepted():
    pts = np.random.default_rng(0).uniform(0, 100, (20, 2))
    res = ransac_sprt(pts, pts, seed=1)
    assert res.accepted and res.n_inliers == 20
    np.testing.assert_allclose(res.model.matrix, np.eye(3), atol=1e-9)


def test_planted_outliers_recovered_in_most_trials():
    good = 0
    for seed in range(20):
        src, dst, h0, mask = planted_instance(seed, n=30, outlier_fraction=0.3, noise=0.2)
        res = ransac_sprt(src, dst, tolerance_px=1.0, seed=seed)
        if res.model is not None:
            err = np.linalg.norm(res.model.apply(src[mask]) - project(h0, src[mask]), axis=1).mean()
            good += err <= 0.5
    assert good >= 19


def test_five_pairs_never_accepted(rng):
    pts = rng.uniform(0, 100, (5, 2))
    res = ransac_sprt(pts, pts + 1.0, seed=0)
    assert res.n_inliers == 5
    assert not res.accepted


def test_six_inliers_accepted(rng):
    pts = rng.uniform(0, 100, (6, 2))
    res = ransac_sprt(pts, pts + 1.0, seed=0)
    assert res.n_inliers == 6 and res.accepted


@pytest.mark.parametrize("seed", range(5))
def test_reported_inliers_within_tolerance(seed):
    src, dst, _, _ = planted_instance(seed, outlier_fraction=0.5)
    res = ransac_sprt(src, dst, tolerance_px=2.0, seed=seed)
    errs = reprojection_errors(res.model, src[res.inlier_ids], dst[res.inlier_ids])
    assert (errs <= 2.0).all()
    assert res.accepted == (res.n_inliers > 5)


def test_too_few_pairs():
    with pytest.raises(ValueError):
        ransac_sprt(SQUARE[:3], SQUARE[:3])


def test_all_degenerate_samples_raise():
    line = np.c_[np.arange(10.0), 2 * np.arange(10.0)]
    with pytest.raises(DegenerateConfigurationError):
        ransac_sprt(line, line, seed=0, max_iterations=50)


def test_sprt_off_same_hypotheses_on_clean_data(rng):
    h0 = random_homography(rng)
    src = rng.uniform(0, 100, (40, 2))
    dst = project(h0, src)
    on, off = ransac_sprt(src, dst, seed=3, sprt_on=True), ransac_sprt(src, dst, seed=3, sprt_on=False)
    np.testing.assert_allclose(on.model.matrix, off.model.matrix, atol=1e-9)
    np.testing.assert_array_equal(on.inlier_ids, off.inlier_ids)


@pytest.mark.parametrize("fraction", [0.3, 0.5, 0.7])
def test_sprt_never_evaluates_more_points(fraction):
    for seed in range(20):
        src, dst, _, _ = planted_instance(seed, n=60, outlier_fraction=fraction)
        on = ransac_sprt(src, dst, tolerance_px=1.0, seed=seed, sprt_on=True)
        off = ransac_sprt(src, dst, tolerance_px=1.0, seed=seed, sprt_on=False)
        assert on.points_evaluated <= off.points_evaluated


def test_deterministic(rng):
    src, dst, _, _ = planted_instance(4, outlier_fraction=0.5)
    a, b = ransac_sprt(src, dst, seed=9), ransac_sprt(src, dst, seed=9)
    assert a.to_dict() == b.to_dict()


def test_similarity_family(rng):
    src, dst, _, _ = planted_instance(2, outlier_fraction=0.0)
    res = ransac_sprt(src, dst, model="similarity", tolerance_px=3.0)
    assert res.model is not None


def test_model_json_round_trip(tmp_path):
    src, dst, _, _ = planted_instance(1)
    res = ransac_sprt(src, dst, seed=1)
    write_model(tmp_path / "m.json", res)
    payload = json.loads((tmp_path / "m.json").read_text())
    assert len(payload["matrix"]) == 9
    assert {"inlier_ids", "iterations", "points_evaluated"} <= set(payload)
    np.testing.assert_array_equal(read_model(tmp_path / "m.json").matrix, res.model.matrix)
