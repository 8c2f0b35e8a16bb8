import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.spatial.distance import pdist
from scipy.stats import chisquare

from raysample import DegenerateGradientError, Plane, RayStreamConfig, Sphere, Torus, sample_keep_all
from raysample.evaluation import sphere_uniform_sampler
from raysample.fields import Constant
from raysample.postprocess import (
    blue_noise_subsample,
    curvature_weights,
    elimination_order,
    estimate_area_from_spacing,
    importance_resample,
    max_radius,
    mean_curvature,
    torus_mean_curvature,
)

R, r = 0.5, 0.2


# -- blue noise -------------------------------------------------------------------


def test_identity_when_target_equals_input():
    pts = sphere_uniform_sampler(200, 0)
    assert np.array_equal(blue_noise_subsample(pts, 200, np.pi), pts)


def test_single_target():
    pts = sphere_uniform_sampler(200, 0)
    out = blue_noise_subsample(pts, 1, np.pi)
    assert out.shape == (1, 3) and any(np.array_equal(out[0], p) for p in pts)


def test_target_larger_than_input():
    with pytest.raises(ValueError):
        blue_noise_subsample(sphere_uniform_sampler(10, 0), 11)


def test_blue_noise_spreads_points():
    blue, rand = [], []
    for seed in range(10):
        pts = sphere_uniform_sampler(5000, seed)
        out = blue_noise_subsample(pts, 500, np.pi)
        sub = pts[np.random.default_rng(seed).choice(5000, 500, replace=False)]
        blue.append(pdist(out).min())
        rand.append(pdist(sub).min())
    assert np.mean(blue) >= 3 * np.mean(rand)
    # the packing radius sets the scale of the spacing
    assert np.mean(blue) > 0.5 * max_radius(np.pi, 500)


def test_blue_noise_keeps_sample_set_provenance():
    samples, _ = sample_keep_all(Sphere(radius=0.5), RayStreamConfig(seed=1), 20_000)
    out = blue_noise_subsample(samples, 300)
    assert len(out) == 300
    assert set(out.ray_id.tolist()) <= set(samples.ray_id.tolist())


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 300), st.data())
def test_elimination_returns_sorted_subset(n, data):
    target = data.draw(st.integers(1, n))
    pts = sphere_uniform_sampler(n, data.draw(st.integers(0, 1000)))
    keep = elimination_order(pts, target, np.pi)
    assert len(keep) == target
    assert np.all(np.diff(keep) > 0) and keep.min() >= 0 and keep.max() < n


def test_area_from_spacing_is_rough():
    pts = sphere_uniform_sampler(20_000, 3)
    assert estimate_area_from_spacing(pts) == pytest.approx(np.pi, rel=0.25)


# -- importance resampling ---------------------------------------------------------


def test_constant_weights_are_uniform():
    pts = np.arange(10, dtype=float).repeat(3).reshape(10, 3)
    out = importance_resample(pts, np.ones(10), 100_000, seed=1)
    counts = np.bincount(out[:, 0].astype(int), minlength=10)
    assert chisquare(counts).pvalue > 1e-3


def test_hemisphere_weights():
    pts = sphere_uniform_sampler(10_000, 4)
    out = importance_resample(pts, lambda p: (p[:, 2] > 0).astype(float), 5000)
    assert np.all(out[:, 2] > 0)


def test_bad_weights():
    pts = sphere_uniform_sampler(10, 0)
    with pytest.raises(ValueError):
        importance_resample(pts, np.zeros(10))
    with pytest.raises(ValueError):
        importance_resample(pts, -np.ones(10))
    with pytest.raises(ValueError):
        importance_resample(pts, np.ones(9))


def test_resample_is_deterministic():
    pts = sphere_uniform_sampler(1000, 0)
    w = np.linspace(0, 1, 1000)
    assert np.array_equal(importance_resample(pts, w, 500, seed=3), importance_resample(pts, w, 500, seed=3))


# -- curvature ---------------------------------------------------------------------


def test_sphere_mean_curvature():
    pts = sphere_uniform_sampler(100, 0)
    assert np.allclose(mean_curvature(Sphere(radius=0.5), pts), 2.0, atol=1e-2)


def test_plane_mean_curvature():
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3)) * (1, 1, 0)
    assert np.abs(mean_curvature(Plane(), pts)).max() < 1e-6


def test_torus_tube_top_curvature():
    # tube top: theta = pi / 2
    h = mean_curvature(Torus(), np.array([R, 0, r]))
    assert h == pytest.approx(torus_mean_curvature(np.pi / 2, R, r), rel=0.05)


@pytest.mark.parametrize("theta", [0.0, 0.7, 2.0, np.pi])
def test_torus_curvature_profile(theta):
    p = np.array([R + r * np.cos(theta), 0.0, r * np.sin(theta)])
    assert mean_curvature(Torus(), p) == pytest.approx(torus_mean_curvature(theta, R, r), rel=0.05)


def test_degenerate_curvature_gradient():
    with pytest.raises(DegenerateGradientError):
        mean_curvature(Constant(1.0), np.zeros(3))


def _band_mean_abs_h(lo, hi):
    def area(t):
        return R + r * np.cos(t)

    num = quad(lambda t: abs(torus_mean_curvature(t, R, r)) * area(t), lo, hi)[0]
    return num / quad(area, lo, hi)[0]


def test_curvature_resampling_density_ratio():
    pts, _ = sample_keep_all(Torus(), RayStreamConfig(seed=7), n_samples=400_000)
    out = importance_resample(pts.points, curvature_weights(Torus()), 400_000, seed=2)
    theta = np.arctan2(out[:, 2], np.hypot(out[:, 0], out[:, 1]) - R)
    half = np.deg2rad(20)
    outer = np.abs(theta) < half
    inner = np.abs(np.abs(theta) - np.pi) < half

    def band_area(lo, hi):
        return 2 * np.pi * r * quad(lambda t: R + r * np.cos(t), lo, hi)[0]

    d_outer = outer.sum() / band_area(-half, half)
    d_inner = inner.sum() / (2 * band_area(np.pi - half, np.pi))
    expected = _band_mean_abs_h(np.pi - half, np.pi) / _band_mean_abs_h(0, half)
    assert d_inner / d_outer == pytest.approx(expected, rel=0.15)
