"""All-intersections sphere tracing.

Every ray is marched from its box entry with steps ``|f| / lambda``.  When
``|f| < eps`` the point is recorded as a hit and the ray keeps stepping by
``max(|f|, eps) / lambda`` until ``|f| >= eps`` again, then resumes normal
marching.  Rays are processed in lockstep with numpy; only the still-active
rays are evaluated at each iteration.

For signed fields the inside chords of each ray are recovered by probing
the field at the midpoint of every interval between consecutive events (box
entry, hits, box exit): an interval is inside when its midpoint is negative.
"""

from __future__ import annotations

import dataclasses
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from raysample.errors import DegenerateGradientError, ProjectionError
from raysample.fields import ImplicitField
from raysample.rays import Ray, RayBatch


class Termination(enum.Enum):
    EXITED_BOX = "exited_box"
    MAX_STEPS = "max_steps"


@dataclass(frozen=True)
class TraceConfig:
    epsilon: float = 1e-4
    max_steps: int = 10_000
    lipschitz: float | None = None
    chords: bool = True
    threads: int = 1
    chunk_size: int = 65536
    # march this far (in units of epsilon / lambda) before the entry point;
    # only hits detected inside [t_entry, t_exit] are kept
    lead_in: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ValueError("lipschitz bound must be positive")
        if self.threads < 1 or self.chunk_size < 1:
            raise ValueError("threads and chunk_size must be positive")
        if self.lead_in < 0:
            raise ValueError("lead_in must be non-negative")

    def replace(self, **changes) -> "TraceConfig":
        return dataclasses.replace(self, **changes)

    def bound_for(self, field: ImplicitField) -> float:
        return float(self.lipschitz if self.lipschitz is not None else field.lipschitz)


@dataclass(frozen=True)
class Hit:
    point: np.ndarray
    t: float
    hit_index: int
    residual: float


@dataclass
class TraceResult:
    hits: list[Hit]
    chords: list[tuple[float, float]] | None
    evals: int
    terminated: Termination

    @property
    def chord_length(self) -> float:
        return float(sum(b - a for a, b in self.chords or ()))


@dataclass
class TraceBatch:
    """Columnar trace results for a batch of rays.

    Per-ray arrays have length ``M``; per-hit arrays have length ``K`` and are
    sorted by ray then by ``t``.  ``hit_ray`` and ``chord_ray`` index rows of
    ``rays`` (not ray ids).
    """

    rays: RayBatch
    evals: np.ndarray
    max_steps_reached: np.ndarray
    hit_ray: np.ndarray
    hit_t: np.ndarray
    hit_points: np.ndarray
    hit_residual: np.ndarray
    hit_index: np.ndarray
    chord_ray: np.ndarray | None = None
    chord_a: np.ndarray | None = None
    chord_b: np.ndarray | None = None
    hit_count: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        self.hit_count = np.bincount(self.hit_ray, minlength=len(self.rays)).astype(np.int64)

    @property
    def M(self) -> int:
        return len(self.rays)

    @property
    def K(self) -> int:
        return len(self.hit_t)

    @property
    def total_evals(self) -> int:
        return int(self.evals.sum())

    @property
    def has_chords(self) -> bool:
        return self.chord_ray is not None

    def chord_length_per_ray(self) -> np.ndarray:
        if not self.has_chords:
            raise ValueError("chords were not computed for this trace")
        return np.bincount(self.chord_ray, weights=self.chord_b - self.chord_a, minlength=self.M)

    def chord_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        o = self.rays.origins[self.chord_ray]
        d = self.rays.directions[self.chord_ray]
        return o + self.chord_a[:, None] * d, o + self.chord_b[:, None] * d

    def result(self, i: int) -> TraceResult:
        sel = np.flatnonzero(self.hit_ray == i)
        hits = [
            Hit(self.hit_points[j].copy(), float(self.hit_t[j]), int(self.hit_index[j]), float(self.hit_residual[j]))
            for j in sel
        ]
        chords = None
        if self.has_chords:
            cs = np.flatnonzero(self.chord_ray == i)
            chords = [(float(self.chord_a[j]), float(self.chord_b[j])) for j in cs]
        term = Termination.MAX_STEPS if self.max_steps_reached[i] else Termination.EXITED_BOX
        return TraceResult(hits, chords, int(self.evals[i]), term)

    @classmethod
    def concat(cls, parts: list["TraceBatch"]) -> "TraceBatch":
        if len(parts) == 1:
            return parts[0]
        offsets = np.cumsum([0] + [p.M for p in parts[:-1]])
        chords = all(p.has_chords for p in parts)
        return cls(
            rays=RayBatch.concat([p.rays for p in parts]),
            evals=np.concatenate([p.evals for p in parts]),
            max_steps_reached=np.concatenate([p.max_steps_reached for p in parts]),
            hit_ray=np.concatenate([p.hit_ray + off for p, off in zip(parts, offsets)]),
            hit_t=np.concatenate([p.hit_t for p in parts]),
            hit_points=np.concatenate([p.hit_points for p in parts]).reshape(-1, 3),
            hit_residual=np.concatenate([p.hit_residual for p in parts]),
            hit_index=np.concatenate([p.hit_index for p in parts]),
            chord_ray=np.concatenate([p.chord_ray + off for p, off in zip(parts, offsets)]) if chords else None,
            chord_a=np.concatenate([p.chord_a for p in parts]) if chords else None,
            chord_b=np.concatenate([p.chord_b for p in parts]) if chords else None,
        )


def _march(field: ImplicitField, rays: RayBatch, eps: float, lam: float, max_steps: int, lead_in: float = 0.0):
    m = len(rays)
    o, d = rays.origins, rays.directions
    t_entry = rays.t_entry
    t = t_entry - lead_in * eps / lam
    t_exit = rays.t_exit
    escaping = np.zeros(m, dtype=bool)
    evals = np.zeros(m, dtype=np.int64)
    stalled = np.zeros(m, dtype=bool)
    active = np.arange(m)
    hit_ray, hit_t, hit_s = [], [], []
    while active.size:
        ta = t[active]
        s = np.abs(field(o[active] + ta[:, None] * d[active]))
        evals[active] += 1
        near = s < eps
        esc = escaping[active]
        new_hit = near & ~esc
        if lead_in:
            new_hit &= ta >= t_entry[active]
        if new_hit.any():
            hit_ray.append(active[new_hit])
            hit_t.append(ta[new_hit])
            hit_s.append(s[new_hit])
        esc = near
        ta = ta + np.where(esc, np.maximum(s, eps), s) / lam
        t[active] = ta
        escaping[active] = esc
        out = ta > t_exit[active]
        capped = evals[active] >= max_steps
        stalled[active[capped & ~out]] = True
        active = active[~(out | capped)]
    if hit_ray:
        hr = np.concatenate(hit_ray)
        ht = np.concatenate(hit_t)
        hs = np.concatenate(hit_s)
        order = np.lexsort((ht, hr))
        hr, ht, hs = hr[order], ht[order], hs[order]
    else:
        hr = np.zeros(0, dtype=np.int64)
        ht = np.zeros(0)
        hs = np.zeros(0)
    return evals, stalled, hr, ht, hs


def _chords(field: ImplicitField, rays: RayBatch, hit_ray, hit_t, hit_index, counts, evals):
    """Midpoint-sign probes between consecutive events; adds k_i + 1 evals per ray."""
    m = len(rays)
    group = counts + 1
    first = np.concatenate([[0], np.cumsum(group)[:-1]])
    n_int = int(group.sum())
    starts = np.empty(n_int)
    ends = np.empty(n_int)
    starts[first] = rays.t_entry
    ends[first + counts] = rays.t_exit
    pos = first[hit_ray] + hit_index
    ends[pos] = hit_t
    starts[pos + 1] = hit_t
    interval_ray = np.repeat(np.arange(m), group)
    mid = 0.5 * (starts + ends)
    probe = rays.origins[interval_ray] + mid[:, None] * rays.directions[interval_ray]
    inside = field(probe) < 0.0
    evals += group
    # merge runs of adjacent inside intervals on the same ray
    prev_inside = np.concatenate([[False], inside[:-1]]) & np.concatenate(
        [[False], interval_ray[1:] == interval_ray[:-1]]
    )
    next_inside = np.concatenate([inside[1:], [False]]) & np.concatenate(
        [interval_ray[1:] == interval_ray[:-1], [False]]
    )
    begin = np.flatnonzero(inside & ~prev_inside)
    end = np.flatnonzero(inside & ~next_inside)
    return interval_ray[begin], starts[begin], ends[end]


def _trace_chunk(field, rays: RayBatch, cfg: TraceConfig, lam: float, chords: bool) -> TraceBatch:
    evals, stalled, hr, ht, hs = _march(field, rays, cfg.epsilon, lam, cfg.max_steps, cfg.lead_in)
    counts = np.bincount(hr, minlength=len(rays)).astype(np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(rays) else np.zeros(0, dtype=np.int64)
    hit_index = np.arange(len(hr)) - starts[hr] if len(hr) else np.zeros(0, dtype=np.int64)
    points = rays.origins[hr] + ht[:, None] * rays.directions[hr]
    batch = TraceBatch(rays, evals, stalled, hr, ht, points.reshape(-1, 3), hs, hit_index)
    if chords:
        batch.chord_ray, batch.chord_a, batch.chord_b = _chords(field, rays, hr, ht, hit_index, counts, evals)
    return batch


def trace_rays(field: ImplicitField, rays: RayBatch, config: TraceConfig = TraceConfig()) -> TraceBatch:
    """Trace a batch of rays; output is independent of ``config.threads``."""
    lam = config.bound_for(field)
    if not lam > 0:
        raise ValueError("lipschitz bound must be positive")
    chords = config.chords and field.is_signed
    n = len(rays)
    bounds = list(range(0, n, config.chunk_size)) or [0]
    pieces = [rays.select(slice(s, s + config.chunk_size)) for s in bounds]
    for piece, s in zip(pieces, bounds):
        piece.proposals = 0

    def work(piece):
        return _trace_chunk(field, piece, config, lam, chords)

    if config.threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(work, pieces))
    else:
        parts = [work(p) for p in pieces]
    out = TraceBatch.concat(parts)
    out.rays.proposals = rays.proposals
    return out


def trace_all(field: ImplicitField, ray: Ray, config: TraceConfig = TraceConfig()) -> TraceResult:
    """Every intersection of one ray with the zero level set."""
    if not ray.t_entry < ray.t_exit:
        raise ValueError("ray needs t_entry < t_exit")
    return trace_rays(field, RayBatch.from_rays([ray]), config).result(0)


def newton_project(field: ImplicitField, points, steps: int = 5, h: float | None = None) -> np.ndarray:
    """Newton steps ``x <- x - f(x) grad f(x) / |grad f(x)|^2``.

    Works on one point or an ``(n, 3)`` array.  Each step costs one field
    evaluation plus the gradient (free when the field is analytic, six
    evaluations otherwise).
    """
    single = np.ndim(points) == 1
    x = np.array(points, dtype=float).reshape(-1, 3)
    for _ in range(int(steps)):
        f = field(x)
        try:
            g = field.gradient(x, h)
        except DegenerateGradientError as exc:
            raise ProjectionError("degenerate gradient during projection", x[0] if single else x) from exc
        x = x - (f / np.einsum("ij,ij->i", g, g))[:, None] * g
    return x[0] if single else x
