"""Random rays with uniform line measure over a bounding volume.

Rays are produced from a stream of *proposals*.  Proposal ``i`` is a pure
function of ``(mode, seed, stream, i)``: proposals are generated in fixed-size
chunks, each chunk seeded from its index, so any proposal can be rebuilt in
isolation and batches can be produced in any order.  A proposal that misses
the bounding volume is skipped; accepted rays are numbered densely.

Uniform mode picks a direction uniformly on the sphere and an origin
uniformly on a square of side ``2 * h`` (``h`` = half the box diagonal) in the
plane orthogonal to the direction through the box center.  For ``[-1, 1]^3``
this is the square ``[-sqrt(3), sqrt(3)]^2``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.stats import qmc

from raysample.fields import BoundingBox, UNIT_BOX

CHUNK = 8192


class RayMode(enum.Enum):
    UNIFORM = "uniform"
    LOW_DISCREPANCY = "low_discrepancy"
    NAIVE_BIASED = "naive_biased"


@dataclass(frozen=True)
class BoundingSphere:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = float(np.sqrt(3.0))

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("bounding sphere radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class RayStreamConfig:
    mode: RayMode = RayMode.UNIFORM
    seed: int = 0
    bounding: BoundingBox | BoundingSphere = UNIT_BOX
    stream: tuple[int, ...] = ()
    chunk: int = CHUNK

    def __post_init__(self):
        object.__setattr__(self, "mode", RayMode(self.mode))
        if self.chunk < 1:
            raise ValueError("chunk size must be positive")
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        if isinstance(self.bounding, BoundingSphere) and self.mode is RayMode.NAIVE_BIASED:
            raise ValueError("naive_biased rays are only defined for boxes")

    def substream(self, *key: int, bounding=None) -> "RayStreamConfig":
        return RayStreamConfig(self.mode, self.seed, bounding or self.bounding, self.stream + tuple(key), self.chunk)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "bounding": self.bounding.to_dict(),
            "stream": list(self.stream),
            "chunk": self.chunk,
        }


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_entry: float
    t_exit: float
    ray_id: int = 0

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)

    @property
    def length(self) -> float:
        return self.t_exit - self.t_entry


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    t_entry: np.ndarray
    t_exit: np.ndarray
    ray_id: np.ndarray
    proposals: int = 0

    def __len__(self) -> int:
        return len(self.t_entry)

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], float(self.t_entry[i]), float(self.t_exit[i]), int(self.ray_id[i]))

    def select(self, idx) -> "RayBatch":
        return RayBatch(
            self.origins[idx], self.directions[idx], self.t_entry[idx], self.t_exit[idx], self.ray_id[idx]
        )

    @classmethod
    def from_rays(cls, rays) -> "RayBatch":
        rays = list(rays)
        if not rays:
            return cls.empty()
        return cls(
            np.array([r.origin for r in rays], dtype=float),
            np.array([r.direction for r in rays], dtype=float),
            np.array([r.t_entry for r in rays], dtype=float),
            np.array([r.t_exit for r in rays], dtype=float),
            np.array([r.ray_id for r in rays], dtype=np.int64),
        )

    @classmethod
    def empty(cls) -> "RayBatch":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, batches) -> "RayBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        return cls(
            np.concatenate([b.origins for b in batches]),
            np.concatenate([b.directions for b in batches]),
            np.concatenate([b.t_entry for b in batches]),
            np.concatenate([b.t_exit for b in batches]),
            np.concatenate([b.ray_id for b in batches]),
            sum(b.proposals for b in batches),
        )


# -- geometry ------------------------------------------------------------------


def orthonormal_frame(d) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors ``n, b`` with ``{d, n, b}`` a right-handed orthonormal frame.

    Branchless construction (Duff et al. 2017); works on ``(3,)`` or ``(n, 3)``.
    """
    d = np.asarray(d, dtype=float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    sign = np.copysign(1.0, z)
    a = -1.0 / (sign + z)
    b = x * y * a
    n = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bn = np.stack([b, sign + y * y * a, -y], axis=-1)
    return n, bn


def directions_from_unit(u0, u1) -> np.ndarray:
    """Equal-area map from ``[0,1)^2`` to the unit sphere."""
    z = 1.0 - 2.0 * u0
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u1
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def clip_box(origins, directions, box: BoundingBox):
    """Slab test.  Returns ``(t_entry, t_exit, hit)`` for each ray."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(directions)
    lo, hi = box.lo, box.hi
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = d == 0.0
    inside_slab = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), tmax)
    t_entry = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    return t_entry, t_exit, t_entry < t_exit


def clip_sphere(origins, directions, sphere: BoundingSphere):
    oc = np.atleast_2d(origins) - np.asarray(sphere.center)
    d = np.atleast_2d(directions)
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - sphere.radius**2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    return -b - root, -b + root, disc > 0.0


# -- proposal chunks -----------------------------------------------------------


def _chunk_uniforms(config: RayStreamConfig, chunk: int, dims: int) -> np.ndarray:
    if config.mode is RayMode.LOW_DISCREPANCY:
        scramble = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(*config.stream, 0x1D5)))
        seq = qmc.Halton(d=dims, scramble=True, rng=scramble)
        # Halton points are indexed directly; fast_forward would draw and
        # discard every earlier point
        seq.num_generated = chunk * config.chunk
        return seq.random(config.chunk)
    ss = np.random.SeedSequence(config.seed, spawn_key=(*config.stream, chunk))
    return np.random.Generator(np.random.PCG64(ss)).random((config.chunk, dims))


def proposal_chunk(config: RayStreamConfig, chunk: int):
    """All ``config.chunk`` proposals of one chunk: origins, directions, entry, exit, accepted."""
    bounding = config.bounding
    if config.mode is RayMode.NAIVE_BIASED:
        u = _chunk_uniforms(config, chunk, 5)
        origins = bounding.lo + u[:, :3] * bounding.extents
        directions = directions_from_unit(u[:, 3], u[:, 4])
        t_entry, t_exit, ok = clip_box(origins, directions, bounding)
        return origins, directions, t_entry, t_exit, ok

    u = _chunk_uniforms(config, chunk, 4)
    directions = directions_from_unit(u[:, 0], u[:, 1])
    n, b = orthonormal_frame(directions)
    if isinstance(bounding, BoundingSphere):
        # direct disc sampling on the projected sphere, no rejection
        rad = bounding.radius * np.sqrt(u[:, 2])
        ang = 2.0 * np.pi * u[:, 3]
        origins = np.asarray(bounding.center) + (rad * np.cos(ang))[:, None] * n + (rad * np.sin(ang))[:, None] * b
        t_entry, t_exit, ok = clip_sphere(origins, directions, bounding)
    else:
        h = 0.5 * bounding.diagonal
        u0 = (2.0 * u[:, 2] - 1.0) * h
        u1 = (2.0 * u[:, 3] - 1.0) * h
        origins = bounding.center + u0[:, None] * n + u1[:, None] * b
        t_entry, t_exit, ok = clip_box(origins, directions, bounding)
    return origins, directions, t_entry, t_exit, ok


def sample_ray(config: RayStreamConfig, index: int) -> Ray | None:
    """Proposal ``index`` of the stream, or ``None`` if it misses the bounds."""
    if index < 0:
        raise ValueError("proposal index must be non-negative")
    chunk, row = divmod(int(index), config.chunk)
    o, d, te, tx, ok = proposal_chunk(config, chunk)
    if not ok[row]:
        return None
    return Ray(o[row], d[row], float(te[row]), float(tx[row]), ray_id=-1)


def ray_from_offsets(direction, u0: float, u1: float, bounding: BoundingBox = UNIT_BOX) -> Ray | None:
    """Deterministic uniform-mode construction from explicit plane offsets."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    n, b = orthonormal_frame(d)
    origin = bounding.center + u0 * n + u1 * b
    te, tx, ok = clip_box(origin, d, bounding)
    if not ok[0]:
        return None
    return Ray(origin, d, float(te[0]), float(tx[0]))


def iter_ray_batches(config: RayStreamConfig, batch_size: int = CHUNK) -> Iterator[RayBatch]:
    """Endless stream of accepted rays in batches of ``batch_size``.

    ``batch.proposals`` counts the proposals consumed since the previous
    batch, up to and including the batch's last accepted ray.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    next_id = 0
    chunk = 0
    last_proposal = -1
    pending: list[tuple] = []
    pending_n = 0
    while True:
        while pending_n < batch_size:
            o, d, te, tx, ok = proposal_chunk(config, chunk)
            idx = np.flatnonzero(ok) + chunk * config.chunk
            pending.append((o[ok], d[ok], te[ok], tx[ok], idx))
            pending_n += len(idx)
            chunk += 1
        o, d, te, tx, idx = (np.concatenate(parts) for parts in zip(*pending))
        k = batch_size
        batch = RayBatch(o[:k], d[:k], te[:k], tx[:k], np.arange(next_id, next_id + k, dtype=np.int64))
        batch.proposals = int(idx[k - 1] - last_proposal)
        last_proposal = int(idx[k - 1])
        next_id += k
        pending = [(o[k:], d[k:], te[k:], tx[k:], idx[k:])]
        pending_n -= k
        yield batch


def uniform_rays(config: RayStreamConfig, count: int) -> RayBatch:
    """Exactly ``count`` accepted rays with ids ``0 .. count-1``."""
    if count < 0:
        raise ValueError("ray count must be non-negative")
    if count == 0:
        return RayBatch.empty()
    return next(iter_ray_batches(config, count))
