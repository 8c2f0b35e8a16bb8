"""Surface point sets from traced rays.

Four ways to turn ray/surface intersections into samples:

``keep_all``
    every hit of every ray (uniform on the surface);
``resample``
    rays redrawn with probability proportional to their hit count, then one
    hit per draw (also uniform, may repeat points);
``keep_one``
    one random hit per hitting ray (biased, kept as a negative control);
``stratified``
    keep-all inside each occupied voxel of a cubic grid, with the same
    number of rays per voxel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dc_field
from typing import Iterator

import numpy as np

from raysample.errors import EmptySurfaceError
from raysample.fields import BoundingBox, ImplicitField
from raysample.rays import RayBatch, RayStreamConfig, iter_ray_batches, uniform_rays
from raysample.tracer import TraceBatch, TraceConfig, trace_rays

SQRT3_2 = np.sqrt(3.0) / 2.0
# Voxel faces are interior boundaries: a crossing just past a face would be
# detected from both sides.  Marching starts this many eps/lambda before the
# entry and keeps only hits detected inside the voxel, so each crossing is
# owned by one voxel to first order in eps.
VOXEL_LEAD_IN = 16.0
# default candidate hits per resampled output
RESAMPLE_POOL = 32.0


class SampleMode(enum.Enum):
    KEEP_ALL = "keep-all"
    RESAMPLE = "resample"
    KEEP_ONE = "keep-one"
    STRATIFIED = "stratified"


@dataclass
class SampleSet:
    """Surface samples with provenance (one row per sample)."""

    points: np.ndarray
    ray_id: np.ndarray
    hit_index: np.ndarray
    voxel_id: np.ndarray
    normals: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    def take(self, idx) -> "SampleSet":
        return SampleSet(
            self.points[idx],
            self.ray_id[idx],
            self.hit_index[idx],
            self.voxel_id[idx],
            None if self.normals is None else self.normals[idx],
        )

    def with_normals(self, field: ImplicitField) -> "SampleSet":
        """Unit normals along +gradient (outward for negative-inside fields)."""
        if len(self) == 0:
            normals = np.zeros((0, 3))
        else:
            g = field.gradient(self.points)
            normals = g / np.linalg.norm(g, axis=1, keepdims=True)
        return SampleSet(self.points, self.ray_id, self.hit_index, self.voxel_id, normals)

    @classmethod
    def empty(cls) -> "SampleSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, 3)), z, z.copy(), z.copy())

    @classmethod
    def from_hits(cls, trace: TraceBatch, idx=None, voxel_of_ray=None) -> "SampleSet":
        idx = np.arange(trace.K) if idx is None else np.asarray(idx)
        rows = trace.hit_ray[idx]
        vox = np.full(len(idx), -1, dtype=np.int64) if voxel_of_ray is None else voxel_of_ray[rows]
        return cls(trace.hit_points[idx].reshape(-1, 3), trace.rays.ray_id[rows], trace.hit_index[idx], vox)


@dataclass
class SampleRunReport:
    mode: SampleMode
    seed: int
    M: int
    K: int
    samples: int
    evals: int
    flagged_rays: int = 0
    proposals: int = 0
    voxel_resolution: int | None = None
    occupied_voxels: int | None = None

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode.value,
            "seed": self.seed,
            "M": self.M,
            "K": self.K,
            "samples": self.samples,
            "evals": self.evals,
            "flagged_rays": self.flagged_rays,
            "proposals": self.proposals,
        }
        if self.voxel_resolution is not None:
            out["voxel_resolution"] = self.voxel_resolution
            out["occupied_voxels"] = self.occupied_voxels
        return out


# -- counter-based selection randomness -------------------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
        return z ^ (z >> np.uint64(31))


def hash_uniform(seed: int, ids, salt: int = 0) -> np.ndarray:
    """Uniform ``[0, 1)`` value per id, a pure function of ``(seed, salt, id)``."""
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) ^ np.uint64(salt))[0]
    bits = _splitmix64(np.asarray(ids, dtype=np.uint64) ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _selection_rng(rays: RayStreamConfig, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(rays.seed, spawn_key=(*rays.stream, salt)))


# -- tracing drivers -------------------------------------------------------------


def _trace_stream(field, rays: RayStreamConfig, trace: TraceConfig, batch: int) -> Iterator[TraceBatch]:
    for rb in iter_ray_batches(rays, batch):
        yield trace_rays(field, rb, trace)


def _sampling_trace(trace: TraceConfig) -> TraceConfig:
    # sampling needs no chords; skip the midpoint probes
    return trace.replace(chords=False)


def trace_until(field, rays: RayStreamConfig, trace: TraceConfig, count, target: int, max_rays: int = 50_000_000,
                batch: int = 65536) -> TraceBatch:
    """Trace successive ray batches until ``sum(count(batch)) >= target``.

    ``count`` must be additive over batches (hits, hitting rays).  The rays
    consumed are a prefix of the deterministic stream, so the result does
    not depend on ``batch``.
    """
    parts = []
    total = hits = rays_used = 0
    for tb in _trace_stream(field, rays, trace, batch):
        parts.append(tb)
        total += count(tb)
        hits += tb.K
        rays_used += tb.M
        if total >= target:
            return TraceBatch.concat(parts)
        if rays_used >= max_rays or (rays_used >= 1_000_000 and hits == 0):
            raise EmptySurfaceError(f"only {total} samples after {rays_used} rays")


def _prefix(trace: TraceBatch, n_rays: int) -> TraceBatch:
    """First ``n_rays`` rays of a trace with their hits."""
    keep_hit = trace.hit_ray < n_rays
    out = TraceBatch(
        trace.rays.select(slice(0, n_rays)),
        trace.evals[:n_rays],
        trace.max_steps_reached[:n_rays],
        trace.hit_ray[keep_hit],
        trace.hit_t[keep_hit],
        trace.hit_points[keep_hit],
        trace.hit_residual[keep_hit],
        trace.hit_index[keep_hit],
    )
    if trace.has_chords:
        keep_chord = trace.chord_ray < n_rays
        out.chord_ray = trace.chord_ray[keep_chord]
        out.chord_a = trace.chord_a[keep_chord]
        out.chord_b = trace.chord_b[keep_chord]
    return out


def _report(mode, rays: RayStreamConfig, tb: TraceBatch, samples: int, proposals: int | None = None):
    return SampleRunReport(
        mode=mode,
        seed=rays.seed,
        M=tb.M,
        K=tb.K,
        samples=samples,
        evals=tb.total_evals,
        flagged_rays=int(tb.max_steps_reached.sum()),
        proposals=tb.rays.proposals if proposals is None else proposals,
    )


def sample_keep_all(
    field: ImplicitField,
    rays: RayStreamConfig,
    n_rays: int | None = None,
    trace: TraceConfig = TraceConfig(),
    n_samples: int | None = None,
) -> tuple[SampleSet, SampleRunReport]:
    """All hits of ``n_rays`` rays, or of as many rays as ``n_samples`` needs.

    With ``n_samples`` the hit list is cut after exactly that many samples in
    ``(ray_id, hit_index)`` order; the report's ``M`` counts rays used.
    """
    _check_counts(n_rays, n_samples)
    trace = _sampling_trace(trace)
    if n_rays is not None:
        if n_rays == 0:
            return SampleSet.empty(), SampleRunReport(SampleMode.KEEP_ALL, rays.seed, 0, 0, 0, 0)
        tb = trace_rays(field, uniform_rays(rays, n_rays), trace)
        return SampleSet.from_hits(tb), _report(SampleMode.KEEP_ALL, rays, tb, tb.K)
    tb = _trace_for_hits(field, rays, trace, n_samples, lambda t: t.K)
    last_row = int(tb.hit_ray[n_samples - 1])
    tb = _prefix(tb, last_row + 1)
    samples = SampleSet.from_hits(tb, np.arange(n_samples))
    return samples, _report(SampleMode.KEEP_ALL, rays, tb, n_samples)


def sample_keep_one(
    field: ImplicitField,
    rays: RayStreamConfig,
    n_rays: int | None = None,
    trace: TraceConfig = TraceConfig(),
    n_samples: int | None = None,
) -> tuple[SampleSet, SampleRunReport]:
    """One uniformly chosen hit per hitting ray.  Biased on non-convex shapes."""
    _check_counts(n_rays, n_samples)
    trace = _sampling_trace(trace)
    if n_rays is not None:
        if n_rays == 0:
            return SampleSet.empty(), SampleRunReport(SampleMode.KEEP_ONE, rays.seed, 0, 0, 0, 0)
        tb = trace_rays(field, uniform_rays(rays, n_rays), trace)
    else:
        tb = _trace_for_hits(field, rays, trace, n_samples, lambda t: int(np.count_nonzero(t.hit_count)))
        hitting = np.flatnonzero(tb.hit_count)
        tb = _prefix(tb, int(hitting[n_samples - 1]) + 1)
    hitting = np.flatnonzero(tb.hit_count)
    k = tb.hit_count[hitting]
    u = hash_uniform(rays.seed, tb.rays.ray_id[hitting], salt=0x0E1)
    pick = np.minimum((u * k).astype(np.int64), k - 1)
    first = np.concatenate([[0], np.cumsum(tb.hit_count)[:-1]])
    idx = first[hitting] + pick
    return SampleSet.from_hits(tb, idx), _report(SampleMode.KEEP_ONE, rays, tb, len(idx))


def sample_resampled(
    field: ImplicitField,
    rays: RayStreamConfig,
    n_rays: int | None,
    n_samples: int,
    trace: TraceConfig = TraceConfig(),
    pool_factor: float = RESAMPLE_POOL,
) -> tuple[SampleSet, SampleRunReport]:
    """Draw ``n_samples`` rays with replacement, weight = hit count, then one hit each.

    With ``n_rays=None`` rays are traced until the candidate pool holds at
    least ``pool_factor * n_samples`` hits.  Draws repeat candidates, so a
    pool of ``K`` hits inflates the TV noise by about ``sqrt(1 + N / K)``
    over keep-all at the same ``N``.
    """
    if n_samples < 1 or (n_rays is not None and n_rays < 1):
        raise ValueError("resampling needs at least one ray and one output sample")
    trace = _sampling_trace(trace)
    if n_rays is None:
        need = int(np.ceil(pool_factor * n_samples))
        tb = _trace_for_hits(field, rays, trace, need, lambda t: t.K)
    else:
        tb = trace_rays(field, uniform_rays(rays, n_rays), trace)
    if tb.K == 0:
        raise EmptySurfaceError(f"none of {tb.M} rays hit the surface")
    idx = resample_hits(tb.hit_count, n_samples, _selection_rng(rays, 0x2E5))
    return SampleSet.from_hits(tb, idx), _report(SampleMode.RESAMPLE, rays, tb, n_samples)


def resample_hits(hit_count, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Flat hit indices: rays drawn with probability ``k_i / K``, then one of their hits.

    Hits are numbered ray by ray, as in :class:`TraceBatch`.
    """
    k = np.asarray(hit_count, dtype=np.int64)
    if k.sum() == 0:
        raise EmptySurfaceError("no hits to resample")
    rows = rng.choice(len(k), size=n_samples, replace=True, p=k / k.sum())
    pick = np.minimum((rng.random(n_samples) * k[rows]).astype(np.int64), k[rows] - 1)
    first = np.concatenate([[0], np.cumsum(k)[:-1]])
    return first[rows] + pick


def _check_counts(n_rays, n_samples):
    if (n_rays is None) == (n_samples is None):
        raise ValueError("give exactly one of n_rays / n_samples")
    if n_rays is not None and n_rays < 0:
        raise ValueError("n_rays must be non-negative")
    if n_samples is not None and n_samples < 1:
        raise ValueError("n_samples must be positive")


def _trace_for_hits(field, rays, trace, n_samples, count) -> TraceBatch:
    return trace_until(field, rays, trace, count, n_samples)


# -- sparse voxels ----------------------------------------------------------------


@dataclass
class VoxelGrid:
    """Cubic grid over a cubic box with a conservative occupancy mask."""

    box: BoundingBox
    resolution: int
    occupied: np.ndarray  # bool, shape (r, r, r), index order (i, j, k) = (x, y, z)
    edge: float = dc_field(init=False)

    def __post_init__(self):
        self.edge = float(self.box.extents[0] / self.resolution)

    @property
    def occupied_ids(self) -> np.ndarray:
        return np.flatnonzero(self.occupied.ravel())

    @property
    def occupied_fraction(self) -> float:
        return float(self.occupied.mean())

    def voxel_box(self, vid: int) -> BoundingBox:
        i, j, k = np.unravel_index(int(vid), self.occupied.shape)
        lo = self.box.lo + self.edge * np.array([i, j, k])
        return BoundingBox(tuple(lo), tuple(lo + self.edge))

    def centers(self) -> np.ndarray:
        r = self.resolution
        c = (np.arange(r) + 0.5) * self.edge
        X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
        return self.box.lo + np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def build_voxels(field: ImplicitField, resolution: int, box: BoundingBox | None = None) -> VoxelGrid:
    """Mark voxels whose center is within ``lambda * (sqrt(3)/2) * edge`` of the level set."""
    if resolution < 1:
        raise ValueError("voxel resolution must be at least 1")
    box = box or field.bounds
    if not box.is_cube():
        raise ValueError("stratification needs a cubic box so that all voxels are congruent")
    grid = VoxelGrid(box, int(resolution), np.zeros((resolution,) * 3, dtype=bool))
    vals = np.abs(field(grid.centers()))
    grid.occupied = (vals <= field.lipschitz * SQRT3_2 * grid.edge).reshape((resolution,) * 3)
    return grid


@dataclass
class StratifiedTrace:
    trace: TraceBatch
    voxel_of_ray: np.ndarray  # voxel id per traced ray
    grid: VoxelGrid
    rays_per_voxel: int

    def per_voxel(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(voxel ids, M_v, K_v) for the occupied voxels."""
        ids = self.grid.occupied_ids
        pos = np.searchsorted(ids, self.voxel_of_ray)
        m_v = np.bincount(pos, minlength=len(ids))
        k_v = np.bincount(pos, weights=self.trace.hit_count, minlength=len(ids)).astype(np.int64)
        return ids, m_v, k_v


def trace_stratified(
    field: ImplicitField,
    grid: VoxelGrid,
    rays: RayStreamConfig,
    rays_per_voxel: int,
    trace: TraceConfig = TraceConfig(),
) -> StratifiedTrace:
    """Trace ``rays_per_voxel`` uniform rays clipped to each occupied voxel."""
    if rays_per_voxel < 1:
        raise ValueError("rays_per_voxel must be positive")
    batches = []
    owner = []
    chunk = min(rays.chunk, max(64, 1 << int(np.ceil(np.log2(3 * rays_per_voxel)))))
    for vid in grid.occupied_ids:
        sub = RayStreamConfig(rays.mode, rays.seed, grid.voxel_box(vid), rays.stream + (0x0F, int(vid)), chunk)
        rb = uniform_rays(sub, rays_per_voxel)
        batches.append(rb)
        owner.append(np.full(rays_per_voxel, vid, dtype=np.int64))
    rb = RayBatch.concat(batches)
    voxel_of_ray = np.concatenate(owner) if owner else np.zeros(0, dtype=np.int64)
    if len(rb):
        # ids unique across voxels: voxel-major, then per-voxel ray index
        rb.ray_id = voxel_of_ray * rays_per_voxel + np.tile(np.arange(rays_per_voxel), len(owner))
    if trace.lead_in == 0.0:
        trace = trace.replace(lead_in=VOXEL_LEAD_IN)
    tb = trace_rays(field, rb, trace)
    return StratifiedTrace(tb, voxel_of_ray, grid, rays_per_voxel)


def sample_stratified(
    field: ImplicitField,
    rays: RayStreamConfig,
    grid: VoxelGrid,
    rays_per_voxel: int,
    trace: TraceConfig = TraceConfig(),
) -> tuple[SampleSet, SampleRunReport, StratifiedTrace]:
    st = trace_stratified(field, grid, rays, rays_per_voxel, _sampling_trace(trace))
    tb = st.trace
    samples = SampleSet.from_hits(tb, voxel_of_ray=st.voxel_of_ray)
    report = _report(SampleMode.STRATIFIED, rays, tb, tb.K)
    report.voxel_resolution = grid.resolution
    report.occupied_voxels = int(grid.occupied.sum())
    return samples, report, st
