"""Shape moments from ray statistics.

For rays with uniform line measure over a convex bounding volume ``B``, the
expected number of surface crossings per ray is ``2 A / area(B)`` and the
expected inside chord length per ray is ``4 V / area(B)``.  Hence

    area   = area(B) / 2 * K / M        (12 K / M for [-1, 1]^3)
    volume = area(B) / 4 * sum(sigma) / M   (6 sum(sigma) / M for [-1, 1]^3)

Standard errors use per-ray statistics: rays are i.i.d. even though the
hits on one ray are not.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from raysample.errors import EmptySurfaceError, UnsignedFieldError
from raysample.fields import BoundingBox, ImplicitField
from raysample.rays import BoundingSphere, RayStreamConfig, uniform_rays
from raysample.sampler import SampleSet, StratifiedTrace
from raysample.tracer import TraceBatch, TraceConfig, trace_rays


def area_constant(bounding: BoundingBox | BoundingSphere) -> float:
    return bounding.surface_area / 2.0


def volume_constant(bounding: BoundingBox | BoundingSphere) -> float:
    return bounding.surface_area / 4.0


def _fsum(x) -> float:
    return math.fsum(np.asarray(x, dtype=float).ravel())


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    mean = _fsum(x) / n
    if n < 2:
        return mean, float("nan")
    var = _fsum((x - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def _ratio_se(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ratio of sums ``sum(num) / sum(den)`` per column with a delta-method SE."""
    n = len(den)
    total = _fsum(den)
    ratio = np.array([_fsum(num[:, a]) for a in range(num.shape[1])]) / total
    if n < 2:
        return ratio, np.full(num.shape[1], np.nan)
    resid = num - ratio[None, :] * den[:, None]
    var = np.array([_fsum(resid[:, a] ** 2) for a in range(num.shape[1])]) / (n - 1)
    return ratio, np.sqrt(var * n) / total


def estimate_area(trace: TraceBatch, bounding: BoundingBox | BoundingSphere = BoundingBox()) -> float:
    if trace.M == 0:
        raise ValueError("no rays traced")
    return area_constant(bounding) * trace.K / trace.M


def estimate_area_se(trace: TraceBatch, bounding=BoundingBox()) -> tuple[float, float]:
    if trace.M == 0:
        raise ValueError("no rays traced")
    mean, se = _mean_se(trace.hit_count.astype(float))
    c = area_constant(bounding)
    return c * mean, c * se


def estimate_area_stratified(st: StratifiedTrace) -> tuple[float, float]:
    """Sum over voxels of ``3 s^2 K_v / M_v`` with a stratified standard error."""
    _, m_v, k_v = st.per_voxel()
    c = area_constant(st.grid.voxel_box(int(st.grid.occupied_ids[0]))) if len(m_v) else 0.0
    if len(m_v) == 0:
        return 0.0, 0.0
    counts = st.trace.hit_count.astype(float)
    pos = np.searchsorted(st.grid.occupied_ids, st.voxel_of_ray)
    mean_v = k_v / m_v
    sq = np.bincount(pos, weights=(counts - mean_v[pos]) ** 2, minlength=len(m_v))
    var_v = sq / np.maximum(m_v - 1, 1)
    return c * _fsum(mean_v), c * math.sqrt(_fsum(var_v / m_v))


def estimate_shell_centroid(samples) -> np.ndarray:
    """Mean of on-surface sample points."""
    pts = samples.points if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptySurfaceError("no hits to average")
    return np.array([_fsum(pts[:, a]) for a in range(3)]) / len(pts)


def shell_centroid_se(trace: TraceBatch) -> tuple[np.ndarray, np.ndarray]:
    if trace.K == 0:
        raise EmptySurfaceError("no hits to average")
    per_ray = np.zeros((trace.M, 3))
    np.add.at(per_ray, trace.hit_ray, trace.hit_points)
    return _ratio_se(per_ray, trace.hit_count.astype(float))


def _require_chords(trace: TraceBatch):
    if not trace.has_chords:
        raise UnsignedFieldError("volume quantities need a signed field (no chords were traced)")


def estimate_volume(trace: TraceBatch, bounding=BoundingBox()) -> float:
    return estimate_volume_se(trace, bounding)[0]


def estimate_volume_se(trace: TraceBatch, bounding=BoundingBox()) -> tuple[float, float]:
    _require_chords(trace)
    if trace.M == 0:
        raise ValueError("no rays traced")
    mean, se = _mean_se(trace.chord_length_per_ray())
    c = volume_constant(bounding)
    return c * mean, c * se


def mean_chord(trace: TraceBatch) -> float:
    """Average inside length over rays that hit the surface (tends to 4V/A)."""
    _require_chords(trace)
    hitting = trace.hit_count > 0
    if not hitting.any():
        raise EmptySurfaceError("no ray hit the surface")
    return _fsum(trace.chord_length_per_ray()[hitting]) / int(hitting.sum())


def estimate_solid_centroid(trace: TraceBatch) -> np.ndarray:
    return solid_centroid_se(trace)[0]


def solid_centroid_se(trace: TraceBatch) -> tuple[np.ndarray, np.ndarray]:
    """Chord-length-weighted mean of chord midpoints."""
    _require_chords(trace)
    length = trace.chord_b - trace.chord_a
    if _fsum(length) <= 0.0:
        raise EmptySurfaceError("zero total chord length")
    a, b = trace.chord_endpoints()
    weighted = 0.5 * length[:, None] * (a + b)
    num = np.zeros((trace.M, 3))
    np.add.at(num, trace.chord_ray, weighted)
    return _ratio_se(num, trace.chord_length_per_ray())


@dataclass
class EstimatorReport:
    area: float
    area_se: float
    shell_centroid: np.ndarray | None
    shell_centroid_se: np.ndarray | None
    volume: float | None
    volume_se: float | None
    solid_centroid: np.ndarray | None
    solid_centroid_se: np.ndarray | None
    M: int
    K: int
    evals: int

    def to_dict(self) -> dict:
        def vec(v):
            return None if v is None else [float(x) for x in v]

        return {
            "area": self.area,
            "area_se": self.area_se,
            "volume": self.volume,
            "volume_se": self.volume_se,
            "shell_centroid": vec(self.shell_centroid),
            "shell_centroid_se": vec(self.shell_centroid_se),
            "solid_centroid": vec(self.solid_centroid),
            "solid_centroid_se": vec(self.solid_centroid_se),
            "M": self.M,
            "K": self.K,
            "evals": self.evals,
        }


def report_from_trace(trace: TraceBatch, bounding=BoundingBox()) -> EstimatorReport:
    area, area_se = estimate_area_se(trace, bounding)
    shell = shell_se = None
    if trace.K:
        shell, shell_se = shell_centroid_se(trace)
    volume = volume_se = solid = solid_se = None
    if trace.has_chords:
        volume, volume_se = estimate_volume_se(trace, bounding)
        if np.any(trace.chord_b > trace.chord_a):
            solid, solid_se = solid_centroid_se(trace)
    return EstimatorReport(area, area_se, shell, shell_se, volume, volume_se, solid, solid_se, trace.M, trace.K, trace.total_evals)


def estimate_moments(
    field: ImplicitField,
    rays: RayStreamConfig,
    n_rays: int,
    trace: TraceConfig = TraceConfig(),
    volume: bool = True,
) -> EstimatorReport:
    """Trace ``n_rays`` rays and report area, volume and both centroids."""
    if n_rays < 1:
        raise ValueError("need at least one ray")
    if volume and not field.is_signed:
        raise UnsignedFieldError("volume requested for an unsigned field")
    cfg = trace.replace(chords=volume)
    tb = trace_rays(field, uniform_rays(rays, n_rays), cfg)
    return report_from_trace(tb, rays.bounding)


def convergence_series(field: ImplicitField, rays: RayStreamConfig, counts, trace: TraceConfig = TraceConfig()):
    """(M, area, area_se, volume, volume_se) rows over prefixes of one ray stream."""
    counts = sorted(int(c) for c in counts)
    cfg = trace.replace(chords=field.is_signed)
    tb = trace_rays(field, uniform_rays(rays, counts[-1]), cfg)
    k = tb.hit_count.astype(float)
    sigma = tb.chord_length_per_ray() if tb.has_chords else None
    rows = []
    for m in counts:
        a, a_se = _mean_se(k[:m])
        row = [m, area_constant(rays.bounding) * a, area_constant(rays.bounding) * a_se]
        if sigma is not None:
            v, v_se = _mean_se(sigma[:m])
            row += [volume_constant(rays.bounding) * v, volume_constant(rays.bounding) * v_se]
        rows.append(tuple(row))
    return rows


def write_series_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["M", "area", "area_se"]
        if rows and len(rows[0]) > 3:
            header += ["volume", "volume_se"]
        w.writerow(header)
        w.writerows(rows)
