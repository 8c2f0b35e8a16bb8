"""Uniformity and cost evaluation.

A :class:`SurfacePartition` splits a surface into patches with known areas
and classifies points to patches.  ``tv_score`` compares the sample
fraction of each patch with its area fraction::

    TV = 1/2 * sum_i | n_i / N - A_i / A |

Reference samplers (exact uniform on meshes, tori and spheres) and the
rejection baseline with Newton projection live here as well.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from scipy.stats import chi2_contingency

from raysample.errors import EmptySurfaceError
from raysample.fields import ImplicitField
from raysample.rays import RayBatch
from raysample.mesh import MeshField
from raysample.sampler import SampleSet
from raysample.tracer import newton_project

# samples farther than this many epsilons from the partition surface are unclassifiable
CLASSIFY_TOLERANCE = 10.0
DEFAULT_EPSILON = 1e-4

UNCLASSIFIED = -1


def _points(samples) -> np.ndarray:
    return samples.points if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float).reshape(-1, 3)


@dataclass
class SurfacePartition:
    """Disjoint patches with areas and a point classifier.

    ``classify`` maps ``(n, 3)`` points to patch ids, with ``-1`` for points
    that are off the surface by more than ``tolerance``.
    """

    areas: np.ndarray
    classify: Callable[[np.ndarray], np.ndarray]
    name: str = "partition"

    @property
    def total_area(self) -> float:
        return math.fsum(self.areas)

    def __len__(self) -> int:
        return len(self.areas)


@dataclass(frozen=True)
class TVResult:
    tv: float
    classified: int
    excluded: int

    def __float__(self) -> float:
        return self.tv


def patch_counts(samples, partition: SurfacePartition) -> tuple[np.ndarray, int]:
    ids = np.asarray(partition.classify(_points(samples)))
    ok = ids >= 0
    return np.bincount(ids[ok], minlength=len(partition)), int((~ok).sum())


def tv_from_counts(counts, areas) -> float:
    counts = np.asarray(counts, dtype=float)
    areas = np.asarray(areas, dtype=float)
    n = counts.sum()
    if n == 0:
        raise ValueError("no classifiable samples")
    return 0.5 * math.fsum(np.abs(counts / n - areas / math.fsum(areas)))


def tv_result(samples, partition: SurfacePartition) -> TVResult:
    counts, excluded = patch_counts(samples, partition)
    return TVResult(tv_from_counts(counts, partition.areas), int(counts.sum()), excluded)


def tv_score(samples, partition: SurfacePartition) -> float:
    """TV distance between sample fractions and area fractions (excluded samples dropped)."""
    return tv_result(samples, partition).tv


# -- partitions ------------------------------------------------------------------


def _tol(epsilon: float) -> float:
    return CLASSIFY_TOLERANCE * epsilon


def torus_partition(
    major_radius: float = 0.5,
    minor_radius: float = 0.2,
    n_u: int = 100,
    n_v: int = 100,
    center=(0.0, 0.0, 0.0),
    epsilon: float = DEFAULT_EPSILON,
) -> SurfacePartition:
    """Grid in the (u, v) torus parameters; u around the z axis, v around the tube.

    Patch area ``r du (R dv + r (sin v1 - sin v0))``, the exact integral of
    the area element ``r (R + r cos v)``.
    """
    R, r = float(major_radius), float(minor_radius)
    c = np.asarray(center, dtype=float)
    du = 2 * np.pi / n_u
    v_edges = 2 * np.pi * np.arange(n_v + 1) / n_v
    dv = np.diff(v_edges)
    band = r * du * (R * dv + r * np.diff(np.sin(v_edges)))
    areas = np.tile(band, n_u)
    tol = _tol(epsilon)

    def classify(p):
        d = np.asarray(p, dtype=float).reshape(-1, 3) - c
        rho = np.hypot(d[:, 0], d[:, 1]) - R
        off = np.abs(np.hypot(rho, d[:, 2]) - r)
        u = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)
        v = np.mod(np.arctan2(d[:, 2], rho), 2 * np.pi)
        iu = np.minimum((u / du).astype(np.int64), n_u - 1)
        iv = np.minimum(np.searchsorted(v_edges, v, side="right") - 1, n_v - 1)
        ids = iu * n_v + iv
        return np.where(off <= tol, ids, UNCLASSIFIED)

    return SurfacePartition(areas, classify, f"torus{n_u}x{n_v}")


def sphere_partition(
    radius: float = 0.5,
    n_z: int = 2,
    n_phi: int = 4,
    center=(0.0, 0.0, 0.0),
    epsilon: float = DEFAULT_EPSILON,
) -> SurfacePartition:
    """Equal-area cells: ``n_z`` bands of equal height times ``n_phi`` azimuth sectors.

    The default (2 x 4) is the eight octants.
    """
    c = np.asarray(center, dtype=float)
    areas = np.full(n_z * n_phi, 4 * np.pi * radius**2 / (n_z * n_phi))
    tol = _tol(epsilon)

    def classify(p):
        d = np.asarray(p, dtype=float).reshape(-1, 3) - c
        norm = np.linalg.norm(d, axis=1)
        # the centre itself has no direction; it is unclassified below anyway
        z = np.clip(d[:, 2] / np.where(norm > 0, norm, 1.0), -1, 1)
        iz = np.minimum(((z + 1) / 2 * n_z).astype(np.int64), n_z - 1)
        phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)
        ip = np.minimum((phi / (2 * np.pi) * n_phi).astype(np.int64), n_phi - 1)
        ok = np.abs(norm - radius) <= tol
        return np.where(ok, iz * n_phi + ip, UNCLASSIFIED)

    return SurfacePartition(areas, classify, f"sphere{n_z}x{n_phi}")


def shells_partition(radii, n_z: int = 2, n_phi: int = 4, epsilon: float = DEFAULT_EPSILON) -> SurfacePartition:
    """Concentric spheres, each split like :func:`sphere_partition`."""
    parts = [sphere_partition(r, n_z, n_phi, epsilon=epsilon) for r in radii]
    radii = np.asarray(radii, dtype=float)
    per = n_z * n_phi

    def classify(p):
        p = np.asarray(p, dtype=float).reshape(-1, 3)
        which = np.argmin(np.abs(np.linalg.norm(p, axis=1)[:, None] - radii[None, :]), axis=1)
        out = np.full(len(p), UNCLASSIFIED)
        for k, part in enumerate(parts):
            sel = which == k
            ids = part.classify(p[sel])
            out[sel] = np.where(ids >= 0, ids + k * per, UNCLASSIFIED)
        return out

    return SurfacePartition(np.concatenate([q.areas for q in parts]), classify, "shells")


def mesh_partition(mesh: MeshField, epsilon: float = DEFAULT_EPSILON) -> SurfacePartition:
    """One patch per triangle; points go to their closest triangle."""
    tol = _tol(epsilon)

    def classify(p):
        dist, face, _, _ = mesh.closest(p)
        return np.where(dist <= tol, face, UNCLASSIFIED)

    return SurfacePartition(mesh.face_areas.copy(), classify, f"mesh{len(mesh.faces)}")


def triangle_area(a, b, c) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(np.subtract(b, a), np.subtract(c, a))))


# -- reference samplers --------------------------------------------------------------


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(salt,)))


def ground_truth_mesh_sampler(vertices, faces, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted triangle choice, then a uniform point via the sqrt reflection map."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    if len(f) == 0:
        raise ValueError("empty mesh")
    tri = v[f]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    rng = _rng(seed, 0x6E5)
    pick = rng.choice(len(f), size=n, p=area / area.sum())
    s = np.sqrt(rng.random(n))
    u2 = rng.random(n)
    a, b, c = tri[pick, 0], tri[pick, 1], tri[pick, 2]
    return (1 - s)[:, None] * a + (s * (1 - u2))[:, None] * b + (s * u2)[:, None] * c


def _torus_v_inverse_cdf(q, R: float, r: float, iters: int = 50):
    # CDF(v) = (R v + r sin v) / (2 pi R), strictly increasing for r < R
    target = 2 * np.pi * R * q
    v = 2 * np.pi * q
    for _ in range(iters):
        step = (R * v + r * np.sin(v) - target) / (R + r * np.cos(v))
        v = np.clip(v - step, 0.0, 2 * np.pi)
        if np.max(np.abs(step)) < 1e-14:
            break
    return v


def torus_uniform_sampler(n: int, seed: int = 0, major_radius: float = 0.5, minor_radius: float = 0.2) -> np.ndarray:
    """Exact uniform samples on a torus by inverting the tube-angle CDF."""
    R, r = major_radius, minor_radius
    if not r < R:
        raise ValueError("inverse-CDF sampler needs minor_radius < major_radius")
    rng = _rng(seed, 0x7A1)
    u = 2 * np.pi * rng.random(n)
    v = _torus_v_inverse_cdf(rng.random(n), R, r)
    rho = R + r * np.cos(v)
    return np.stack([rho * np.cos(u), rho * np.sin(u), r * np.sin(v)], axis=1)


def sphere_uniform_sampler(n: int, seed: int = 0, radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    rng = _rng(seed, 0x5F3)
    z = 1 - 2 * rng.random(n)
    phi = 2 * np.pi * rng.random(n)
    s = np.sqrt(1 - z * z)
    return radius * np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1) + np.asarray(center, dtype=float)


# -- rejection baseline --------------------------------------------------------------


@dataclass
class RejectionResult:
    points: np.ndarray
    evals: int
    proposals: int
    accepted: int

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposals if self.proposals else 0.0


def rejection_baseline(
    field: ImplicitField,
    n: int,
    delta: float = 1e-2,
    seed: int = 0,
    newton_steps: int = 5,
    batch: int = 1 << 20,
    max_proposals: int = 10**9,
) -> RejectionResult:
    """Uniform box points kept when ``|f| < delta``, then projected by Newton steps.

    ``evals`` is one per proposal up to the ``n``-th acceptance plus the
    evaluations spent in projection (including finite-difference gradients
    when the field has no analytic one).  Proposals evaluated past the
    ``n``-th acceptance in the last batch are not charged.
    """
    if not delta > 0:
        raise ValueError("band width delta must be positive")
    if n < 1:
        raise ValueError("n must be positive")
    rng = _rng(seed, 0x4E1)
    kept = []
    have = 0
    proposals = 0
    while have < n:
        if proposals >= max_proposals:
            raise EmptySurfaceError(f"rejection sampling accepted {have} of {proposals} proposals")
        m = min(batch, max_proposals - proposals)
        p = field.bounds.uniform_points(m, rng)
        f = field(p)
        ok = np.flatnonzero(np.abs(f) < delta)
        # keep proposals in order and stop exactly at the n-th acceptance
        need = n - have
        if len(ok) >= need:
            ok = ok[:need]
            proposals += int(ok[-1]) + 1
        else:
            proposals += m
        kept.append(p[ok])
        have += len(ok)
    band = np.concatenate(kept)
    before = field.eval_count
    projected = newton_project(field, band, newton_steps)
    return RejectionResult(projected, proposals + field.eval_count - before, proposals, n)


# -- line measure --------------------------------------------------------------------


@dataclass(frozen=True)
class FlatnessResult:
    statistic: float
    pvalue: float
    hits: np.ndarray
    trials: np.ndarray


def lattice_centers(spacing: float = 0.6, per_axis: int = 3) -> np.ndarray:
    c = (np.arange(per_axis) - (per_axis - 1) / 2) * spacing
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def line_measure_flatness(rays: RayBatch, centers=None, radius: float = 0.25) -> FlatnessResult:
    """Chi-square test that equal balls are hit equally often.

    Under uniform line measure the chance of meeting a ball depends only on
    its radius, not on where it sits in the box.  Ray ``i`` is tested
    against ball ``ray_id % n_balls`` only, so the per-ball hit counts are
    independent binomials and a 2 x n contingency test applies.
    """
    centers = lattice_centers() if centers is None else np.asarray(centers, dtype=float).reshape(-1, 3)
    k = len(centers)
    which = np.asarray(rays.ray_id) % k
    rel = centers[which] - rays.origins
    along = np.einsum("ij,ij->i", rel, rays.directions)
    miss2 = np.einsum("ij,ij->i", rel, rel) - along**2
    hit = miss2 < radius**2
    hits = np.bincount(which, weights=hit, minlength=k).astype(np.int64)
    trials = np.bincount(which, minlength=k)
    stat, pvalue, _, _ = chi2_contingency(np.stack([hits, trials - hits]))
    return FlatnessResult(float(stat), float(pvalue), hits, trials)


# -- CSV -----------------------------------------------------------------------------

EVAL_COLUMNS = ("method", "shape", "N", "TV", "evals", "seed")


def write_eval_csv(path, rows, comments=()) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for row in rows:
            w.writerow([row[k] if not isinstance(row[k], float) else repr(row[k]) for k in EVAL_COLUMNS])
