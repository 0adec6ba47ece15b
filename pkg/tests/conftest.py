import numpy as np
import pytest

from swirseg.raster import HyperCube
from swirseg.synth import SceneConfig, generate_scene


@pytest.fixture(scope="session")
def scene():
    return generate_scene(SceneConfig(seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_cube(data, wavelengths=None):
    data = np.asarray(data, dtype=np.float32)
    if wavelengths is None:
        wavelengths = np.linspace(0.9, 2.5, data.shape[0])
    return HyperCube(data=data, wavelengths=np.asarray(wavelengths, dtype=np.float64))


def random_homography(rng):
    """Near-similarity with mild perspective, well conditioned over a 100 px square."""
    t = rng.uniform(-np.pi, np.pi)
    s = rng.uniform(0.8, 1.25)
    h = np.array([[s * np.cos(t), -s * np.sin(t), rng.uniform(-50, 50)],
                  [s * np.sin(t), s * np.cos(t), rng.uniform(-50, 50)],
                  [rng.uniform(-5e-4, 5e-4), rng.uniform(-5e-4, 5e-4), 1.0]])
    h[:2, :2] += rng.uniform(-0.05, 0.05, size=(2, 2))
    return h


def project(h, pts):
    p = np.c_[pts, np.ones(len(pts))] @ np.asarray(h).T
    return p[:, :2] / p[:, 2:3]


def planted_instance(seed, n=30, outlier_fraction=0.3, noise=0.2):
    """(src, dst, true H, inlier mask): inliers follow H plus noise, outliers are uniform."""
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    src = rng.uniform(0, 100, size=(n, 2))
    dst = project(h, src) + noise * rng.standard_normal((n, 2))
    n_out = int(round(outlier_fraction * n))
    out = rng.choice(n, size=n_out, replace=False)
    lo, hi = dst.min(axis=0) - 20, dst.max(axis=0) + 20
    dst[out] = rng.uniform(lo, hi, size=(n_out, 2))
    mask = np.ones(n, bool)
    mask[out] = False
    return src, dst, h, mask
