import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from swirseg.spectral import (BetaParams, WindowCoverageError, adaptive_threshold, beta_fit_moments, beta_pdf,
                              wetness_index, wetness_map, window_mask)
from swirseg.labels import MANMADE, VEGETATION

from conftest import make_cube

WL = np.linspace(0.9, 2.5, 260)
NUM = (WL >= 1.55) & (WL <= 1.75)
DEN = (WL >= 2.09) & (WL <= 2.35)


def direct_ratio(spectrum, wavelengths):
    top = bottom = 0.0
    for d, w in zip(spectrum, wavelengths):
        if 1.55 <= w <= 1.75:
            top += d
        if 2.09 <= w <= 2.35:
            bottom += d
    return top / bottom


def test_flat_spectrum_gives_band_count_ratio():
    assert wetness_index(np.full(260, 3.7), WL) == pytest.approx(NUM.sum() / DEN.sum(), rel=1e-12)


def test_vegetation_like_spectrum():
    wl = np.array([1.55, 1.65, 1.75, 2.1, 2.2, 2.3])
    spec = np.array([0.4, 0.4, 0.4, 0.2, 0.2, 0.2])
    r = wetness_index(spec, wl)
    assert r == pytest.approx(2.0)
    assert 0 <= 1 / r <= 1


def test_window_edges_inclusive():
    wl = np.array([1.55, 1.75, 2.09, 2.35])
    assert window_mask(wl, (1.55, 1.75)).tolist() == [True, True, False, False]
    assert wetness_index(np.array([1.0, 1.0, 1.0, 1.0]), wl) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_scale_invariance(c, seed):
    d = np.random.default_rng(seed).uniform(0.05, 1.0, size=260)
    assert wetness_index(c * d, WL) == pytest.approx(wetness_index(d, WL), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_monotone_in_each_window(seed, bump):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.05, 1.0, size=260)
    base = wetness_index(d, WL)
    up = d.copy()
    up[rng.choice(np.flatnonzero(NUM))] += bump
    assert wetness_index(up, WL) > base
    down = d.copy()
    down[rng.choice(np.flatnonzero(DEN))] += bump
    assert wetness_index(down, WL) < base


def test_dry_and_wet_patterns():
    wl = np.array([1.6, 1.7, 2.1, 2.2])
    assert wetness_index(np.array([0.2, 0.25, 0.3, 0.35]), wl) < 1
    assert wetness_index(np.array([0.4, 0.4, 0.2, 0.15]), wl) > 1


def test_direct_summation_oracle_random_spectra():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        d = rng.uniform(0.0, 2.0, size=260)
        ref = direct_ratio(d, WL)
        assert abs(wetness_index(d, WL) - ref) <= 1e-9 * abs(ref)


def test_uncovered_window_raises():
    with pytest.raises(WindowCoverageError):
        wetness_index(np.ones(10), np.linspace(0.9, 1.5, 10))


def test_zero_denominator_is_invalid_not_crash():
    d = np.ones(260)
    d[DEN] = 0.0
    assert math.isnan(wetness_index(d, WL))


def test_mean_normalized_flat_is_one():
    assert wetness_index(np.full(260, 2.0), WL, mean_normalized=True) == pytest.approx(1.0)


def test_uniform_cube_map():
    cube = make_cube(np.full((260, 3, 4), 0.5), WL)
    np.testing.assert_allclose(wetness_map(cube).ratios, NUM.sum() / DEN.sum(), rtol=1e-12)


def test_single_pixel_map_matches_index(rng):
    spec = rng.uniform(0.1, 1.0, size=260)
    cube = make_cube(spec.reshape(260, 1, 1), WL)
    assert wetness_map(cube).ratios[0, 0] == pytest.approx(wetness_index(cube.data[:, 0, 0], WL), rel=1e-12)


def test_map_guard_marks_dark_pixels():
    data = np.ones((260, 2, 2))
    data[:, 0, 0] = 0.0
    wmap = wetness_map(make_cube(data, WL))
    assert not wmap.valid[0, 0]
    assert wmap.valid.sum() == 3


def test_map_matches_per_pixel_index(scene):
    cube = scene.cube
    wmap = wetness_map(cube)
    for line, sample in [(0, 0), (10, 77), (127, 127), (64, 3)]:
        ref = wetness_index(cube.data[:, line, sample].astype(np.float64), cube.wavelengths)
        assert wmap.ratios[line, sample] == pytest.approx(ref, rel=1e-9)


def test_scene_vegetation_above_manmade_exhaustively(scene):
    ratios = wetness_map(scene.cube).ratios[:64, :64]
    labels = scene.truth.labels[:64, :64]
    veg = ratios[np.isin(labels, [int(c) for c in VEGETATION])]
    man = ratios[np.isin(labels, [int(c) for c in MANMADE])]
    assert veg.size and man.size
    # every vegetation/manmade pair ordered iff the extremes are
    assert veg.min() > man.max()


def test_threshold_midpoint():
    assert adaptive_threshold(np.array([1.0, 3.0])) == 2.0
    assert adaptive_threshold(np.full((2, 2), 1.7)) == 1.7


def test_threshold_skips_invalid():
    assert adaptive_threshold(np.array([np.nan, 1.0, 5.0])) == 3.0
    with pytest.raises(ValueError):
        adaptive_threshold(np.array([np.nan]))


def test_threshold_sort_oracle(rng):
    vals = rng.normal(size=500)
    s = sorted(vals)
    assert adaptive_threshold(vals) == (s[0] + s[-1]) / 2


def test_beta_pdf_uniform_and_closed_form():
    p = BetaParams(1.0, 1.0)
    for x in (0.01, 0.3, 0.99):
        assert beta_pdf(x, p) == pytest.approx(1.0, rel=1e-12)
    assert beta_pdf(0.5, BetaParams(2.0, 2.0)) == pytest.approx(1.5, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 10), st.floats(0.01, 0.99))
def test_beta_pdf_symmetry(a, x):
    p = BetaParams(a, a)
    assert beta_pdf(x, p) == pytest.approx(beta_pdf(1 - x, p), rel=1e-9)


@pytest.mark.parametrize("a", [0.5, 1, 2, 5])
@pytest.mark.parametrize("b", [0.5, 1, 2, 5])
def test_beta_pdf_integrates_to_one(a, b):
    total, _ = integrate.quad(lambda x: beta_pdf(x, BetaParams(a, b)), 0, 1, epsabs=1e-12, epsrel=1e-12, limit=200)
    assert abs(total - 1.0) <= 1e-6


@pytest.mark.parametrize("x", [0.0, 1.0, -0.1])
def test_beta_pdf_domain(x):
    with pytest.raises(ValueError):
        beta_pdf(x, BetaParams(2, 2))


def test_beta_params_positive():
    with pytest.raises(ValueError):
        BetaParams(0.0, 1.0)


def test_beta_fit_closed_form():
    s = np.array([0.5 - math.sqrt(0.05), 0.5 + math.sqrt(0.05)])  # m = 0.5, population v = 0.05
    p = beta_fit_moments(s)
    assert (p.alpha, p.beta) == (pytest.approx(2.0), pytest.approx(2.0))


def test_beta_fit_mirror_swaps(rng):
    s = rng.beta(2, 5, size=200)
    p, q = beta_fit_moments(s), beta_fit_moments(1 - s)
    assert p.alpha == pytest.approx(q.beta, rel=1e-9)
    assert p.beta == pytest.approx(q.alpha, rel=1e-9)


def test_beta_fit_recovers_seeded_draws():
    s = np.random.default_rng(11).beta(2, 5, size=10_000)
    p = beta_fit_moments(s)
    assert abs(p.alpha - 2) <= 0.3
    assert abs(p.beta - 5) <= 0.3


@pytest.mark.parametrize("samples", [[0.5, 0.5, 0.5], [0.0, 1.0], [0.3]])
def test_beta_fit_errors(samples):
    with pytest.raises(ValueError):
        beta_fit_moments(samples)
