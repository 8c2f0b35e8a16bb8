import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from raysample import Box, EmptySurfaceError, RayStreamConfig, Sphere, Torus, sample_keep_all
from raysample.evaluation import (
    UNCLASSIFIED,
    SurfacePartition,
    ground_truth_mesh_sampler,
    mesh_partition,
    rejection_baseline,
    shells_partition,
    sphere_partition,
    sphere_uniform_sampler,
    torus_partition,
    torus_uniform_sampler,
    triangle_area,
    tv_from_counts,
    tv_result,
    tv_score,
    write_eval_csv,
)
from raysample.fields import Constant
from raysample.mesh import MeshField, bumpy_sphere


def _two_patch():
    return SurfacePartition(np.array([1.0, 1.0]), lambda p: (p[:, 0] > 0).astype(int))


# -- TV ----------------------------------------------------------------------------


def test_tv_of_exact_proportions_is_zero():
    assert tv_from_counts([10, 30, 60], [1, 3, 6]) == 0.0


def test_tv_all_in_one_of_two():
    pts = np.tile([1.0, 0, 0], (50, 1))
    assert tv_score(pts, _two_patch()) == 0.5


@settings(max_examples=50)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=20).filter(lambda c: sum(c) > 0), st.data())
def test_tv_bounds_and_symmetry(counts, data):
    areas = data.draw(st.lists(st.floats(0.01, 10), min_size=len(counts), max_size=len(counts)))
    tv = tv_from_counts(counts, areas)
    assert 0.0 <= tv <= 1.0
    perm = np.random.default_rng(len(counts)).permutation(len(counts))
    assert tv == pytest.approx(tv_from_counts(np.array(counts)[perm], np.array(areas)[perm]))


def test_unclassifiable_samples_are_reported():
    part = sphere_partition(0.5)
    pts = np.vstack([sphere_uniform_sampler(100, 1), [[0.0, 0.0, 0.0], [0.9, 0, 0]]])
    res = tv_result(pts, part)
    assert res.excluded == 2 and res.classified == 100
    assert part.classify(np.array([[0.0, 0.0, 0.6]]))[0] == UNCLASSIFIED


def test_no_classifiable_samples():
    with pytest.raises(ValueError):
        tv_score(np.zeros((3, 3)), sphere_partition(0.5))


# -- partitions ---------------------------------------------------------------------


def test_unit_right_triangle_area():
    assert triangle_area((0, 0, 0), (1, 0, 0), (0, 1, 0)) == 0.5
    assert triangle_area((0, 0, 0), (1, 0, 0), (2, 0, 0)) == 0.0


def test_torus_partition_areas_sum():
    part = torus_partition()
    assert len(part) == 10_000
    assert abs(part.total_area - 4 * np.pi**2 * 0.5 * 0.2) < 1e-9


def test_torus_partition_classifies_parametric_points():
    part = torus_partition(n_u=10, n_v=10)
    u, v = 2 * np.pi * 0.35 / 10 * 10, 2 * np.pi * 0.55  # cell (3, 5)
    p = np.array([[(0.5 + 0.2 * np.cos(v)) * np.cos(u), (0.5 + 0.2 * np.cos(v)) * np.sin(u), 0.2 * np.sin(v)]])
    assert part.classify(p)[0] == 3 * 10 + 5


def test_sphere_partition_is_equal_area():
    part = sphere_partition(0.5, 10, 20)
    counts = np.bincount(part.classify(sphere_uniform_sampler(400_000, 3)), minlength=200)
    assert chisquare(counts).pvalue > 1e-3


def test_shells_partition_areas():
    part = shells_partition([0.8, 0.4])
    assert part.total_area == pytest.approx(4 * np.pi * (0.64 + 0.16))
    pts = np.array([[0.8, 0, 0], [0, 0.4, 0], [0.6, 0, 0]])
    ids = part.classify(pts)
    assert ids[0] < 8 <= ids[1] and ids[2] == UNCLASSIFIED


def test_point_on_triangle_goes_to_that_triangle():
    v, f = bumpy_sphere(level=1)
    mesh = MeshField(v, f)
    part = mesh_partition(mesh)
    tri = mesh.triangles
    bary = np.random.default_rng(0).dirichlet([1, 1, 1], len(tri))
    pts = np.einsum("ij,ijk->ik", bary, tri)
    assert np.array_equal(part.classify(pts), np.arange(len(tri)))
    assert part.total_area == pytest.approx(mesh.area)


# -- reference samplers -----------------------------------------------------------------


def test_single_triangle_barycentrics_uniform():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    pts = ground_truth_mesh_sampler(v, [[0, 1, 2]], 60_000, seed=1)
    assert np.allclose(pts[:, 2], 0) and np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)
    # split the triangle into 4 congruent children by the edge midpoints
    x, y = pts[:, 0], pts[:, 1]
    child = np.where(x > 0.5, 1, np.where(y > 0.5, 2, np.where(x + y < 0.5, 0, 3)))
    assert chisquare(np.bincount(child, minlength=4)).pvalue > 1e-3


def test_two_triangles_proportional_to_area():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 5], [0, 1, 5], [0, 0, 5]], dtype=float)
    f = np.array([[0, 1, 2], [5, 3, 4]])
    assert triangle_area(*v[f[1]]) == 3 * triangle_area(*v[f[0]])
    n = 100_000
    pts = ground_truth_mesh_sampler(v, f, n, seed=2)
    first = int(np.sum(pts[:, 2] == 0))
    assert abs(first - n / 4) < 3 * np.sqrt(n * 0.25 * 0.75)


def test_torus_sampler_matches_partition():
    part = torus_partition(n_u=20, n_v=20)
    counts = np.bincount(part.classify(torus_uniform_sampler(400_000, 5)), minlength=400)
    expected = part.areas / part.total_area * 400_000
    assert chisquare(counts, expected).pvalue > 1e-3


def test_ours_matches_mesh_noise_floor():
    v, f = bumpy_sphere(level=1)
    mesh = MeshField(v, f)
    part = mesh_partition(mesh)
    n = 50_000
    ours, truth = [], []
    for seed in range(10):
        s, _ = sample_keep_all(mesh, RayStreamConfig(seed=seed), n_samples=n)
        ours.append(tv_score(s, part))
        truth.append(tv_score(ground_truth_mesh_sampler(v, f, n, seed), part))
    assert np.mean(ours) == pytest.approx(np.mean(truth), rel=0.05)


# -- rejection baseline ---------------------------------------------------------------


def test_rejection_acceptance_on_sphere():
    res = rejection_baseline(Sphere(radius=0.5), 20_000, delta=0.01, seed=1)
    band = 4 * np.pi * 0.25 * 0.02 / 8
    assert res.acceptance == pytest.approx(band, rel=0.10)
    assert np.abs(np.linalg.norm(res.points, axis=1) - 0.5).max() < 1e-12


def test_rejection_eval_accounting():
    s = Sphere(radius=0.5)
    res = rejection_baseline(s, 2000, seed=2)
    # one evaluation per proposal, then five Newton steps with an analytic gradient
    assert res.evals == res.proposals + 5 * 2000
    b = Box(half_extents=(0.5, 0.5, 0.5))
    res = rejection_baseline(b, 500, seed=2)
    # finite-difference gradient: six more evaluations per step
    assert res.evals == res.proposals + 5 * 7 * 500
    assert res.evals / 500 == pytest.approx(1 / res.acceptance + 35)


def test_rejection_fails_on_empty_field():
    with pytest.raises(EmptySurfaceError):
        rejection_baseline(Constant(1.0), 10, max_proposals=100_000)


def test_rejection_is_deterministic():
    a = rejection_baseline(Torus(), 1000, seed=4)
    b = rejection_baseline(Torus(), 1000, seed=4)
    assert np.array_equal(a.points, b.points) and a.evals == b.evals


def test_eval_csv(tmp_path):
    rows = [{"method": "ours", "shape": "sphere", "N": 10, "TV": 0.125, "evals": 7, "seed": 0}]
    write_eval_csv(tmp_path / "e.csv", rows, ["config_hash abc"])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines == ["# config_hash abc", "method,shape,N,TV,evals,seed", "ours,sphere,10,0.125,7,0"]
