"""Planar homography fitting and RANSAC with SPRT early-exit verification.

The SPRT loop follows Chum & Matas' randomized RANSAC: every hypothesis is
verified against the correspondences in random order while a likelihood
ratio accumulates; the hypothesis is abandoned as soon as the ratio exceeds
the decision threshold ``A``. Numerical constants for the test (initial
inlier/outlier rates, timing ratio) are engineering defaults, not values
taken from a published table.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

ACCEPT_MIN_INLIERS = 6  # more than five inliers


class DegenerateConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HomographyModel:
    """3x3 projective transform, scaled so ``H[2, 2] == 1`` when possible."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        else:
            m = m / np.linalg.norm(m)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "HomographyModel":
        return cls(np.eye(3))

    def apply(self, pts) -> np.ndarray:
        """Project (n, 2) points; points sent to infinity come back as inf."""
        p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        h = np.c_[p, np.ones(len(p))] @ self.matrix.T
        w = h[:, 2:3]
        out = np.full((len(p), 2), np.inf)
        ok = np.abs(w[:, 0]) > 1e-12
        out[ok] = h[ok, :2] / w[ok]
        return out

    def inverse(self) -> "HomographyModel":
        return HomographyModel(np.linalg.inv(self.matrix))

    def to_list(self) -> list[float]:
        return self.matrix.ravel().tolist()


# ---------------------------------------------------------------------------
# Minimal solvers
# ---------------------------------------------------------------------------


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateConfigurationError("coincident points")
    s = math.sqrt(2) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])


def _has_collinear_triple(pts: np.ndarray, rel_tol: float = 1e-9) -> bool:
    n = len(pts)
    scale = max(np.ptp(pts, axis=0).max(), 1e-12)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b, c = pts[i], pts[j], pts[k]
                area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
                if area <= rel_tol * scale * scale:
                    return True
    return False


def fit_homography_dlt(src, dst) -> HomographyModel:
    """Normalised DLT; exact for 4 points, least squares (SVD) for more."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise ValueError("need at least 4 matching point pairs")
    if n == 4:
        if _has_collinear_triple(src) or _has_collinear_triple(dst):
            raise DegenerateConfigurationError("three collinear points in minimal sample")
    elif np.linalg.matrix_rank(src - src.mean(axis=0), tol=1e-9 * max(np.ptp(src), 1.0)) < 2:
        raise DegenerateConfigurationError("all source points collinear")

    t_src, t_dst = _normalizer(src), _normalizer(dst)
    s = np.c_[src, np.ones(n)] @ t_src.T
    d = np.c_[dst, np.ones(n)] @ t_dst.T
    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = s
    a[0::2, 6:9] = -d[:, 0:1] * s
    a[1::2, 3:6] = s
    a[1::2, 6:9] = -d[:, 1:2] * s
    _, sv, vt = np.linalg.svd(a)
    h = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ h @ t_src
    if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) < 1e-12 * np.abs(m).max() ** 3:
        raise DegenerateConfigurationError("singular homography")
    return HomographyModel(m)


def fit_similarity(src, dst) -> HomographyModel:
    """Least-squares similarity (rotation, uniform scale, translation), >= 2 pairs."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 2 or len(dst) != len(src):
        raise ValueError("need at least 2 matching point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var = (xs**2).sum()
    if var < 1e-12:
        raise DegenerateConfigurationError("coincident source points")
    cov = xd.T @ xs / len(src)
    u, sv, vt = np.linalg.svd(cov)
    sign = np.diag([1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    r = u @ sign @ vt
    scale = np.trace(np.diag(sv) @ sign) / (var / len(src))
    if scale <= 1e-12:
        raise DegenerateConfigurationError("degenerate similarity")
    t = mu_d - scale * r @ mu_s
    m = np.eye(3)
    m[:2, :2] = scale * r
    m[:2, 2] = t
    return HomographyModel(m)


MODEL_FAMILIES = {
    "homography": (4, fit_homography_dlt),
    "similarity": (2, fit_similarity),
}


def reprojection_errors(model: HomographyModel, src, dst) -> np.ndarray:
    """Euclidean distance from projected ``src`` to ``dst``; inf at the plane at infinity."""
    proj = model.apply(src)
    err = np.sqrt(((proj - np.asarray(dst, dtype=np.float64).reshape(-1, 2)) ** 2).sum(axis=1))
    return np.where(np.isfinite(err), err, np.inf)


def reprojection_error(model: HomographyModel, src_pt, dst_pt) -> float:
    return float(reprojection_errors(model, [src_pt], [dst_pt])[0])


# ---------------------------------------------------------------------------
# SPRT
# ---------------------------------------------------------------------------


@dataclass
class SprtState:
    epsilon: float = 0.2
    delta: float = 0.05
    t_m: float = 100.0
    m_s: float = 1.0
    A: float = field(init=False, default=0.0)
    models_tested: int = 0
    points_evaluated: int = 0
    _rejected_fractions: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.A = self.threshold(self.epsilon, self.delta)

    def threshold(self, epsilon: float, delta: float) -> float:
        c = (1 - delta) * math.log((1 - delta) / (1 - epsilon)) + delta * math.log(delta / epsilon)
        a = c * self.t_m / self.m_s + 1
        for _ in range(1000):
            nxt = c * self.t_m / self.m_s + 1 + math.log(a)
            if abs(nxt - a) < 1e-4:
                return nxt
            a = nxt
        return a

    def _maybe_update(self, epsilon: float, delta: float) -> None:
        delta = min(max(delta, 0.01), epsilon / 2)
        if abs(epsilon - self.epsilon) > 0.05 * self.epsilon or abs(delta - self.delta) > 0.05 * self.delta:
            self.epsilon, self.delta = epsilon, delta
            self.A = self.threshold(epsilon, delta)

    def on_new_best(self, inlier_ratio: float) -> None:
        eps = min(max(inlier_ratio, 0.02), 0.99)
        self._maybe_update(eps, self.delta)

    def on_rejected(self, inlier_fraction: float) -> None:
        self._rejected_fractions.append(inlier_fraction)
        self._maybe_update(self.epsilon, float(np.mean(self._rejected_fractions)))


@dataclass
class RansacResult:
    model: HomographyModel | None
    inlier_ids: np.ndarray
    iterations: int
    points_evaluated: int
    accepted: bool
    models_rejected: int = 0
    degenerate_samples: int = 0
    sprt: bool = True

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_ids.size)

    def to_dict(self) -> dict:
        return {
            "matrix": self.model.to_list() if self.model is not None else None,
            "inlier_ids": self.inlier_ids.tolist(),
            "accepted": self.accepted,
            "iterations": self.iterations,
            "points_evaluated": self.points_evaluated,
            "models_rejected": self.models_rejected,
            "degenerate_samples": self.degenerate_samples,
            "sprt": self.sprt,
        }


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int) -> float:
    p = inlier_ratio**sample_size
    if p <= 0:
        return math.inf
    if p >= 1:
        return 1.0
    return math.log(1 - confidence) / math.log(1 - p)


def ransac_sprt(src, dst, tolerance_px: float = 2.0, confidence: float = 0.99, seed: int = 0,
                sprt_on: bool = True, max_iterations: int = 10_000, model: str = "homography") -> RansacResult:
    """Robustly fit ``model`` mapping ``src`` to ``dst``.

    The minimal-sample stream depends only on ``seed``, so SPRT-on and
    SPRT-off runs see the same hypotheses. Verification order is drawn from a
    second stream. Accepted iff the final inlier set has more than five members.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    sample_size, solver = MODEL_FAMILIES[model]
    if n < sample_size or len(dst) != n:
        raise ValueError(f"need at least {sample_size} correspondences, got {n}")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")

    seeds = np.random.SeedSequence(seed).spawn(2)
    sample_rng = np.random.default_rng(seeds[0])
    order_rng = np.random.default_rng(seeds[1])
    state = SprtState()

    best_inliers = np.zeros(0, dtype=np.int64)
    best_model: HomographyModel | None = None
    best_err = math.inf
    cap = float(max_iterations)
    iterations = degenerate = rejected = 0

    while iterations < min(cap, max_iterations):
        if degenerate >= 10 * min(cap, max_iterations):
            break
        sample = sample_rng.choice(n, size=sample_size, replace=False)
        order = order_rng.permutation(n)
        try:
            hyp = solver(src[sample], dst[sample])
        except DegenerateConfigurationError:
            degenerate += 1
            continue
        iterations += 1
        state.models_tested += 1

        err = reprojection_errors(hyp, src[order], dst[order])
        is_in = err <= tolerance_px
        if sprt_on:
            lam = 1.0
            up_in = state.delta / state.epsilon
            up_out = (1 - state.delta) / (1 - state.epsilon)
            checked = n
            for pos in range(n):
                lam *= up_in if is_in[pos] else up_out
                if lam > state.A:
                    checked = pos + 1
                    break
            state.points_evaluated += checked
            if checked < n or lam > state.A:
                rejected += 1
                state.on_rejected(float(is_in[:checked].mean()))
                continue
        else:
            state.points_evaluated += n

        inliers = np.sort(order[is_in])
        total_err = float(err[is_in].sum())
        if inliers.size > best_inliers.size or (inliers.size == best_inliers.size and inliers.size and total_err < best_err):
            best_inliers, best_model, best_err = inliers, hyp, total_err
            state.on_new_best(inliers.size / n)
            cap = min(_required_iterations(inliers.size / n, confidence, sample_size), max_iterations)

    if best_model is None:
        if degenerate:
            raise DegenerateConfigurationError(f"all {degenerate} sampled minimal sets were degenerate")
        return RansacResult(None, np.zeros(0, dtype=np.int64), iterations, state.points_evaluated, False,
                            rejected, degenerate, sprt_on)

    model_out, inliers_out = best_model, best_inliers
    # least-squares refit on the inlier set, repeated while the set keeps growing
    for _ in range(5):
        if inliers_out.size <= sample_size:
            break
        try:
            refit = solver(src[inliers_out], dst[inliers_out])
        except DegenerateConfigurationError:
            break
        refit_in = np.flatnonzero(reprojection_errors(refit, src, dst) <= tolerance_px)
        if refit_in.size < inliers_out.size:
            break
        grew = refit_in.size > inliers_out.size
        model_out, inliers_out = refit, refit_in
        if not grew:
            break
    accepted = inliers_out.size >= ACCEPT_MIN_INLIERS
    return RansacResult(model_out, inliers_out, iterations, state.points_evaluated, accepted,
                        rejected, degenerate, sprt_on)


def write_model(path: str | Path, result: RansacResult, extra: dict | None = None) -> None:
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_model(path: str | Path) -> HomographyModel:
    payload = json.loads(Path(path).read_text())
    matrix = payload.get("matrix")
    if matrix is None or len(matrix) != 9:
        raise ValueError(f"{path}: no 3x3 model")
    return HomographyModel(np.array(matrix, dtype=np.float64).reshape(3, 3))
