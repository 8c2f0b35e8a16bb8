"""Downstream uses of white-noise surface samples.

``blue_noise_subsample``
    weighted sample elimination: every point gets a weight summed over its
    neighbors within ``2 r_max``; the heaviest point is removed and its
    neighbors' weights updated until the target count remains.
``importance_resample``
    multinomial resampling proportional to a per-point weight.
``mean_curvature``
    ``Laplacian(f) / 2`` from a 7-point stencil (unit-gradient SDFs).
"""

from __future__ import annotations

import heapq
import math

import numpy as np
from scipy.spatial import cKDTree

from raysample.errors import DegenerateGradientError
from raysample.fields import ImplicitField
from raysample.sampler import SampleSet

ELIMINATION_ALPHA = 8


def _points(samples) -> np.ndarray:
    return samples.points if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float).reshape(-1, 3)


def _take(samples, idx):
    return samples.take(idx) if isinstance(samples, SampleSet) else _points(samples)[idx]


def max_radius(area: float, count: int) -> float:
    """Packing radius of ``count`` points on area ``area`` (hexagonal packing)."""
    return math.sqrt(area / (2.0 * math.sqrt(3.0) * count))


def estimate_area_from_spacing(points: np.ndarray) -> float:
    """Area guess from mean nearest-neighbor distance of a uniform 2D set.

    For a Poisson process of density rho the mean NN distance is
    ``1 / (2 sqrt(rho))``, so ``area = n * (2 * mean_nn)^2``.
    """
    if len(points) < 2:
        raise ValueError("need at least two points to estimate spacing")
    d, _ = cKDTree(points).query(points, k=2)
    return len(points) * (2.0 * float(d[:, 1].mean())) ** 2


def elimination_order(points: np.ndarray, target_count: int, area: float) -> np.ndarray:
    """Indices of the points kept by weighted sample elimination, in input order."""
    n = len(points)
    if target_count > n:
        raise ValueError(f"target_count {target_count} exceeds input size {n}")
    if target_count < 1:
        raise ValueError("target_count must be positive")
    if target_count == n:
        return np.arange(n)
    r2 = 2.0 * max_radius(area, target_count)
    tree = cKDTree(points)
    pairs = tree.query_pairs(r2, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    d = np.linalg.norm(points[i] - points[j], axis=1)
    w = (1.0 - np.minimum(d, r2) / r2) ** ELIMINATION_ALPHA
    weight = np.bincount(i, weights=w, minlength=n) + np.bincount(j, weights=w, minlength=n)

    # adjacency in CSR form
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    ww = np.concatenate([w, w])
    order = np.argsort(src, kind="stable")
    dst, ww = dst[order], ww[order]
    start = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))])

    alive = np.ones(n, dtype=bool)
    heap = [(-weight[k], k) for k in range(n)]
    heapq.heapify(heap)
    remaining = n
    while remaining > target_count:
        negw, k = heapq.heappop(heap)
        if not alive[k] or -negw != weight[k]:
            continue  # stale entry
        alive[k] = False
        remaining -= 1
        for e in range(start[k], start[k + 1]):
            m = dst[e]
            if alive[m]:
                weight[m] -= ww[e]
                heapq.heappush(heap, (-weight[m], m))
    return np.flatnonzero(alive)


def blue_noise_subsample(samples, target_count: int, area: float | None = None):
    """Subset of ``samples`` with ``target_count`` well-spaced points.

    ``area`` is the surface area used to set ``r_max``; when omitted it is
    guessed from the input spacing.  Deterministic for a fixed input order
    (ties are broken by index).
    """
    pts = _points(samples)
    if target_count > len(pts):
        raise ValueError(f"target_count {target_count} exceeds input size {len(pts)}")
    if area is None:
        area = estimate_area_from_spacing(pts)
    return _take(samples, elimination_order(pts, int(target_count), float(area)))


def importance_resample(samples, weights, count: int | None = None, seed: int = 0):
    """Draw ``count`` samples with replacement with probability proportional to ``weights``.

    ``weights`` is an array (one per sample) or a callable on the ``(n, 3)``
    points.
    """
    pts = _points(samples)
    w = np.asarray(weights(pts) if callable(weights) else weights, dtype=float).reshape(-1)
    if len(w) != len(pts):
        raise ValueError("need one weight per sample")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    total = math.fsum(w)
    if total <= 0:
        raise ValueError("all weights are zero")
    count = len(pts) if count is None else int(count)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x1A9,)))
    idx = np.sort(rng.choice(len(pts), size=count, replace=True, p=w / total))
    return _take(samples, idx)


def curvature_step(field: ImplicitField) -> float:
    # 1e-3 in units of the half box extent (1e-3 for [-1, 1]^3)
    return 1e-3 * float(field.bounds.extents.max()) / 2.0


def mean_curvature(field: ImplicitField, points, h: float | None = None) -> np.ndarray | float:
    """Mean curvature ``Laplacian(f) / 2``; positive on convex parts.

    Costs 7 field evaluations per point.  The gradient from the same stencil
    is checked for degeneracy.
    """
    single = np.ndim(points) == 1
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    h = curvature_step(field) if h is None else float(h)
    offsets = np.concatenate([np.eye(3), -np.eye(3)]) * h
    probes = (p[:, None, :] + offsets[None]).reshape(-1, 3)
    vals = field(probes).reshape(-1, 6)
    center = field(p)
    grad = (vals[:, :3] - vals[:, 3:]) / (2 * h)
    gnorm = np.linalg.norm(grad, axis=1)
    if np.any(gnorm == 0):
        k = int(np.flatnonzero(gnorm == 0)[0])
        raise DegenerateGradientError("zero gradient at curvature probe", p[k])
    lap = (vals.sum(axis=1) - 6.0 * center) / h**2
    H = 0.5 * lap
    return float(H[0]) if single else H


def torus_mean_curvature(theta, major_radius: float = 0.5, minor_radius: float = 0.2):
    """Mean curvature of a torus at tube angle ``theta`` (0 = outer equator)."""
    R, r = major_radius, minor_radius
    c = np.cos(theta)
    return (R + 2 * r * c) / (2 * r * (R + r * c))


def curvature_weights(field: ImplicitField):
    """Weight function ``|H|`` usable with :func:`importance_resample`."""
    return lambda pts: np.abs(mean_curvature(field, pts))
