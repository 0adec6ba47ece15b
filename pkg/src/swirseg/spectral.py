"""SWIR wetness index, adaptive wet/dry threshold and beta diagnostics.

The wetness index is the ratio of summed band values in the 1.55-1.75 um
window to summed values in the 2.09-2.35 um window. Live vegetation and
moist surfaces give large ratios; dry impermeable surfaces give small ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln

from .raster import HyperCube

NUMERATOR_WINDOW = (1.55, 1.75)
DENOMINATOR_WINDOW = (2.09, 2.35)
DENOMINATOR_GUARD = 1e-9


class WindowCoverageError(ValueError):
    """The wavelength axis has no band inside a required window."""


def window_mask(wavelengths: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    wl = np.asarray(wavelengths, dtype=np.float64)
    return (wl >= window[0]) & (wl <= window[1])


def _window_masks(wavelengths):
    num = window_mask(wavelengths, NUMERATOR_WINDOW)
    den = window_mask(wavelengths, DENOMINATOR_WINDOW)
    if not num.any():
        raise WindowCoverageError(f"no bands inside numerator window {NUMERATOR_WINDOW} um")
    if not den.any():
        raise WindowCoverageError(f"no bands inside denominator window {DENOMINATOR_WINDOW} um")
    return num, den


def wetness_index(spectrum, wavelengths, mean_normalized: bool = False, eps: float = 0.0) -> float:
    """Wetness index of a single spectrum.

    Returns ``nan`` when the denominator sum is ``<= eps`` (invalid pixel).
    """
    d = np.asarray(spectrum, dtype=np.float64)
    num, den = _window_masks(wavelengths)
    top = math.fsum(d[num])
    bottom = math.fsum(d[den])
    if mean_normalized:
        top /= int(num.sum())
        bottom /= int(den.sum())
    if not bottom > eps:
        return math.nan
    return top / bottom


@dataclass(frozen=True, eq=False)
class WetnessMap:
    """Per-pixel wetness ratios, shape ``(lines, samples)``. Invalid pixels are NaN."""

    ratios: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.ratios)

    @property
    def height(self) -> int:
        return self.ratios.shape[0]

    @property
    def width(self) -> int:
        return self.ratios.shape[1]


def wetness_map(cube: HyperCube, mean_normalized: bool = False) -> WetnessMap:
    """Wetness index for every pixel of ``cube``.

    The denominator guard is ``1e-9 * max(cube)``; pixels failing it become NaN
    and are skipped by :func:`adaptive_threshold`.
    """
    num, den = _window_masks(cube.wavelengths)
    data = cube.data
    # band-by-band accumulation keeps the summation order identical to a per-pixel loop
    top = np.zeros((cube.lines, cube.samples))
    for b in np.flatnonzero(num):
        top += data[b]
    bottom = np.zeros_like(top)
    for b in np.flatnonzero(den):
        bottom += data[b]
    if mean_normalized:
        top /= int(num.sum())
        bottom /= int(den.sum())
    eps = DENOMINATOR_GUARD * max(float(np.max(data)), 0.0)
    valid = bottom > eps
    ratios = np.full(top.shape, np.nan)
    np.divide(top, bottom, out=ratios, where=valid)
    return WetnessMap(ratios)


def adaptive_threshold(wmap: WetnessMap | np.ndarray) -> float:
    """Midpoint between the lowest and highest valid values in the scene."""
    ratios = wmap.ratios if isinstance(wmap, WetnessMap) else np.asarray(wmap, dtype=np.float64)
    vals = ratios[np.isfinite(ratios)]
    if vals.size == 0:
        raise ValueError("wetness map has no valid pixels")
    return (float(vals.min()) + float(vals.max())) / 2.0


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"beta shape parameters must be positive, got ({self.alpha}, {self.beta})")


def beta_pdf(x: float, p: BetaParams) -> float:
    if not 0.0 < x < 1.0:
        raise ValueError(f"x must lie in (0, 1), got {x}")
    log_pdf = (p.alpha - 1) * math.log(x) + (p.beta - 1) * math.log1p(-x) - betaln(p.alpha, p.beta)
    return math.exp(log_pdf)


def beta_fit_moments(samples) -> BetaParams:
    """Method-of-moments beta fit (population variance of the samples)."""
    s = np.asarray(samples, dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least two samples")
    if np.any((s <= 0) | (s >= 1)):
        raise ValueError("samples must lie in (0, 1)")
    m = float(s.mean())
    v = float(s.var())
    if v == 0:
        raise ValueError("zero sample variance")
    if v >= m * (1 - m):
        raise ValueError(f"variance {v:.4g} too large for a beta distribution with mean {m:.4g}")
    common = m * (1 - m) / v - 1
    return BetaParams(alpha=m * common, beta=(1 - m) * common)
