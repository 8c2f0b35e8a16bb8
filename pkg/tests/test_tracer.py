import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raysample import (
    Absolute,
    Box,
    GridField,
    Plane,
    ProjectionError,
    RayStreamConfig,
    Sphere,
    Torus,
    TraceConfig,
    Union,
    newton_project,
    trace_all,
    trace_rays,
    uniform_rays,
)
from raysample.fields import CallableField, Constant
from raysample.rays import Ray
from raysample.tracer import Termination

EPS = 1e-4


def _ray(origin, direction):
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    from raysample.rays import clip_box
    from raysample.fields import UNIT_BOX

    te, tx, ok = clip_box(np.asarray(origin, dtype=float), d, UNIT_BOX)
    assert ok[0]
    return Ray(np.asarray(origin, dtype=float), d, float(te[0]), float(tx[0]))


def test_center_ray_hits_sphere_twice():
    s = Sphere(radius=0.5)
    res = trace_all(s, _ray((0, 0, 0), (0, 0, 1)))
    pts = np.array([h.point for h in res.hits])
    assert len(pts) == 2
    assert np.allclose(pts, [[0, 0, -0.5], [0, 0, 0.5]], atol=EPS)
    assert all(abs(h.residual) < EPS for h in res.hits)
    assert res.chord_length == pytest.approx(1.0, abs=2 * EPS)
    assert res.terminated is Termination.EXITED_BOX


def test_clean_miss():
    res = trace_all(Sphere(radius=0.5), _ray((0.9, 0, 0), (0, 0, 1)))
    assert res.hits == [] and res.chords == []


def test_torus_axis_ray_four_hits():
    res = trace_all(Torus(), _ray((0, 0, 0), (1, 0, 0)))
    xs = sorted(h.point[0] for h in res.hits)
    assert np.allclose(xs, [-0.7, -0.3, 0.3, 0.7], atol=2 * EPS)
    assert res.chord_length == pytest.approx(0.8, abs=4 * EPS)
    assert [h.hit_index for h in res.hits] == [0, 1, 2, 3]


def test_unsigned_field_gives_hits_without_chords():
    res = trace_all(Absolute(Plane()), _ray((0.1, 0.2, 0), (0, 0, 1)))
    assert len(res.hits) == 1 and res.chords is None


def test_cube_surface_entry_and_exit():
    # the surface is the box boundary itself
    res = trace_all(Box(), _ray((0.3, -0.2, 0), (0.2, 0.1, 1)))
    assert len(res.hits) == 2
    assert res.chord_length == pytest.approx(res.hits[-1].t - res.hits[0].t, abs=2 * EPS)


def test_max_steps_flags_and_keeps_hits():
    s = Sphere(radius=0.5)
    res = trace_all(s, _ray((0, 0, 0), (0, 0, 1)), TraceConfig(max_steps=4))
    assert res.terminated is Termination.MAX_STEPS
    assert res.evals <= 4 + 2  # plus the chord probes


def test_evals_match_field_counter():
    t = Torus()
    rb = uniform_rays(RayStreamConfig(seed=3), 5000)
    tb = trace_rays(t, rb)
    assert tb.total_evals == t.eval_count


def test_slower_lipschitz_bound_costs_more_and_finds_same_hits():
    rb = uniform_rays(RayStreamConfig(seed=3), 3000)
    fast = trace_rays(Sphere(radius=0.5), rb)
    slow = trace_rays(Sphere(radius=0.5), rb, TraceConfig(lipschitz=4.0))
    assert slow.total_evals > 2 * fast.total_evals
    assert np.array_equal(fast.hit_count, slow.hit_count)


def test_opaque_field_needs_bound_and_traces():
    f = CallableField(lambda p: np.linalg.norm(p, axis=1) - 0.5, lipschitz=1.0)
    tb = trace_rays(f, uniform_rays(RayStreamConfig(seed=1), 2000))
    ref = trace_rays(Sphere(radius=0.5), uniform_rays(RayStreamConfig(seed=1), 2000))
    assert np.array_equal(tb.hit_count, ref.hit_count)


@pytest.mark.parametrize("threads", [2, 4])
def test_thread_count_does_not_change_output(threads):
    rb = uniform_rays(RayStreamConfig(seed=8), 20_000)
    field = Union([Torus(), Sphere(radius=0.15)])
    one = trace_rays(field, rb, TraceConfig(chunk_size=3000))
    many = trace_rays(field, rb, TraceConfig(chunk_size=3000, threads=threads))
    for name in ("hit_ray", "hit_t", "hit_points", "evals", "chord_a", "chord_b"):
        assert getattr(one, name).tobytes() == getattr(many, name).tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["sphere", "torus", "union"]))
def test_hits_are_on_surface_and_ordered(seed, name):
    field = {"sphere": Sphere(radius=0.5), "torus": Torus(), "union": Union([Sphere((0.3, 0, 0), 0.25), Sphere((-0.3, 0, 0), 0.25)])}[name]
    tb = trace_rays(field, uniform_rays(RayStreamConfig(seed=seed), 500))
    assert np.all(np.abs(tb.hit_residual) < EPS)
    assert np.allclose(np.abs(field(tb.hit_points)), np.abs(tb.hit_residual))
    for r in np.unique(tb.hit_ray):
        t = tb.hit_t[tb.hit_ray == r]
        assert np.all(np.diff(t) > 0)
    # closed surfaces are crossed an even number of times, except by rays
    # that graze the surface within epsilon
    odd = np.flatnonzero(tb.hit_count % 2)
    for r in odd:
        sel = tb.hit_ray == r
        g = field.gradient(tb.hit_points[sel])
        cos = np.abs(g @ tb.rays.directions[r]) / np.linalg.norm(g, axis=1)
        assert cos.min() < 0.05
    # chords lie between hits and inside the ray segment
    assert np.all(tb.chord_b >= tb.chord_a)
    assert np.all(tb.chord_a >= tb.rays.t_entry[tb.chord_ray] - 1e-12)


def test_lead_in_keeps_hits_inside_segment():
    ray = _ray((0, 0, 0), (0, 0, 1))
    short = Ray(ray.origin, ray.direction, -0.5 + 1e-6, 1.0)
    plain = trace_all(Sphere(radius=0.5), short)
    led = trace_all(Sphere(radius=0.5), short, TraceConfig(lead_in=16.0))
    # without lead-in the tracer starts inside the epsilon band and counts the crossing
    assert len(plain.hits) == 2
    # with lead-in it is detected before t_entry and dropped
    assert len(led.hits) == 1 and led.hits[0].point[2] == pytest.approx(0.5, abs=EPS)


def test_bad_config_rejected():
    for kw in ({"epsilon": 0}, {"max_steps": 0}, {"lipschitz": -1.0}, {"threads": 0}, {"lead_in": -1.0}):
        with pytest.raises(ValueError):
            TraceConfig(**kw)
    with pytest.raises(ValueError):
        trace_all(Sphere(), Ray(np.zeros(3), np.array([0, 0, 1.0]), 1.0, 0.0))


# -- Newton projection --------------------------------------------------------------


def test_newton_one_step_exact_sdf():
    s = Sphere(radius=0.5)
    p = newton_project(s, np.array([1.0, 0, 0]), steps=1)
    assert np.allclose(p, (0.5, 0, 0)) and abs(s.evaluate(p)) < 1e-12


def test_newton_leaves_surface_points_alone():
    p = np.array([0.0, 0.5, 0.0])
    assert np.array_equal(newton_project(Sphere(radius=0.5), p, 5), p)


def test_newton_on_grid_converges():
    grid = GridField.bake(Sphere(radius=0.5), 65)
    p = newton_project(grid, np.array([0.8, 0.0, 0.0]), steps=5)
    assert abs(grid.evaluate(p)) < 1e-6


def test_newton_degenerate_gradient():
    with pytest.raises(ProjectionError) as info:
        newton_project(Constant(1.0), np.array([0.1, 0.2, 0.3]))
    assert np.allclose(info.value.point, (0.1, 0.2, 0.3))


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda p: np.linalg.norm(p) > 0.05))
def test_newton_one_step_lands_on_sphere(p):
    s = Sphere(radius=0.5)
    assert abs(s.evaluate(newton_project(s, np.array(p), 1))) < 1e-12
