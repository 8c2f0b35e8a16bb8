"""Implicit fields: the scalar functions whose zero level set is sampled.

Every field maps an ``(n, 3)`` array of points to ``n`` scalar values and
carries a Lipschitz bound used by the tracer to take safe steps.  Sign
convention is negative inside, positive outside.

Composite fields (CSG, offsets, transforms) evaluate their children through
the uncounted ``_eval`` path so that one call on the root field counts as
one evaluation per point, regardless of how deep the expression tree is.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from raysample.errors import DegenerateGradientError, FieldEvaluationError


class Signedness(enum.Enum):
    SIGNED = "signed"
    UNSIGNED = "unsigned"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, ``[-1, 1]^3`` by default."""

    min_corner: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    max_corner: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=float)
        hi = np.asarray(self.max_corner, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box corners must be 3-vectors")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("box corners must be finite")
        if not np.all(lo < hi):
            raise ValueError(f"degenerate box: {self.min_corner} !< {self.max_corner}")
        object.__setattr__(self, "min_corner", tuple(float(v) for v in lo))
        object.__setattr__(self, "max_corner", tuple(float(v) for v in hi))

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.max_corner)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extents(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))

    @property
    def surface_area(self) -> float:
        ex, ey, ez = self.extents
        return float(2.0 * (ex * ey + ey * ez + ez * ex))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def is_cube(self, rtol: float = 1e-9) -> bool:
        ext = self.extents
        return bool(np.allclose(ext, ext[0], rtol=rtol, atol=0.0))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)

    def uniform_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random((n, 3)) * self.extents

    def to_dict(self) -> dict:
        return {"min": list(self.min_corner), "max": list(self.max_corner)}


UNIT_BOX = BoundingBox()


def _as_points(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.shape[-1] != 3:
        raise ValueError(f"points must have trailing dimension 3, got {arr.shape}")
    return arr.reshape(-1, 3)


class ImplicitField:
    """Base class for scalar fields over R^3.

    Subclasses implement ``_eval`` (vectorized over ``(n, 3)`` points) and may
    implement ``_grad`` for an exact gradient.  Calling the field counts one
    evaluation per point.
    """

    lipschitz: float = 1.0
    signedness: Signedness = Signedness.SIGNED
    bounds: BoundingBox = UNIT_BOX

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    # -- evaluation -------------------------------------------------------

    def _eval(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _grad(self, p: np.ndarray) -> np.ndarray | None:
        return None

    def __call__(self, points) -> np.ndarray:
        pts = _as_points(points)
        if not np.all(np.isfinite(pts)):
            bad = pts[~np.all(np.isfinite(pts), axis=1)][0]
            raise FieldEvaluationError("non-finite query point", bad)
        vals = np.asarray(self._eval(pts), dtype=float)
        with self._lock:
            self._count += len(pts)
        if not np.all(np.isfinite(vals)):
            bad = pts[~np.isfinite(vals)][0]
            raise FieldEvaluationError("field returned a non-finite value", bad)
        return vals

    def evaluate(self, p) -> float:
        """Value at a single point; counts one evaluation."""
        return float(self(np.asarray(p, dtype=float).reshape(1, 3))[0])

    @property
    def eval_count(self) -> int:
        return self._count

    def reset_counter(self) -> int:
        with self._lock:
            n, self._count = self._count, 0
        return n

    @property
    def is_signed(self) -> bool:
        return self.signedness is Signedness.SIGNED

    # -- derivatives ------------------------------------------------------

    def default_step(self) -> float:
        return 1e-5 * self.bounds.diagonal

    def gradient(self, points, h: float | None = None) -> np.ndarray:
        """Gradient at ``points`` (shape ``(n, 3)`` or a single point).

        Uses the exact gradient when the field provides one, else central
        differences through the counted evaluation path (6 evaluations per
        point).  Raises :class:`DegenerateGradientError` on a zero gradient.
        """
        single = np.ndim(points) == 1
        pts = _as_points(points)
        g = self._grad(pts)
        if g is None:
            g = self.fd_gradient(pts, h)
        norm = np.linalg.norm(g, axis=1)
        if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
            idx = int(np.flatnonzero((norm == 0.0) | ~np.isfinite(norm))[0])
            raise DegenerateGradientError("zero-magnitude gradient", pts[idx])
        return g[0] if single else g

    def fd_gradient(self, points, h: float | None = None) -> np.ndarray:
        pts = _as_points(points)
        if h is None:
            h = self.default_step()
        if h <= 0:
            raise ValueError("finite-difference step must be positive")
        n = len(pts)
        offsets = np.concatenate([np.eye(3), -np.eye(3)]) * h
        probes = (pts[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        vals = self(probes).reshape(n, 6)
        return (vals[:, :3] - vals[:, 3:]) / (2.0 * h)

    # -- composition helpers ---------------------------------------------

    def __or__(self, other: "ImplicitField") -> "Union":
        return Union([self, other])

    def __and__(self, other: "ImplicitField") -> "Intersection":
        return Intersection([self, other])

    def __neg__(self) -> "Complement":
        return Complement(self)

    def __sub__(self, other: "ImplicitField") -> "Intersection":
        return Intersection([self, Complement(other)])

    def describe(self) -> dict:
        return {"op": type(self).__name__.lower()}


def _vec(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a finite 3-vector, got {v!r}")
    return arr


# -- analytic primitives ---------------------------------------------------


class Sphere(ImplicitField):
    def __init__(self, center=(0.0, 0.0, 0.0), radius: float = 0.5):
        super().__init__()
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.center = _vec(center, "center")
        self.radius = float(radius)

    def _eval(self, p):
        return np.linalg.norm(p - self.center, axis=1) - self.radius

    def _grad(self, p):
        d = p - self.center
        n = np.linalg.norm(d, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, d / n, 0.0)

    def describe(self):
        return {"op": "sphere", "args": {"center": self.center.tolist(), "radius": self.radius}}


class Box(ImplicitField):
    """Exact Euclidean SDF of an axis-aligned box."""

    def __init__(self, center=(0.0, 0.0, 0.0), half_extents=(1.0, 1.0, 1.0)):
        super().__init__()
        self.center = _vec(center, "center")
        self.half_extents = _vec(half_extents, "half_extents")
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")

    def _eval(self, p):
        q = np.abs(p - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def describe(self):
        return {
            "op": "box",
            "args": {"center": self.center.tolist(), "half_extents": self.half_extents.tolist()},
        }


class Torus(ImplicitField):
    """Torus around the z axis with major radius R and tube radius r."""

    def __init__(self, center=(0.0, 0.0, 0.0), major_radius: float = 0.5, minor_radius: float = 0.2):
        super().__init__()
        if not 0 < minor_radius:
            raise ValueError("minor radius must be positive")
        self.center = _vec(center, "center")
        self.major_radius = float(major_radius)
        self.minor_radius = float(minor_radius)

    def _eval(self, p):
        d = p - self.center
        rho = np.hypot(d[:, 0], d[:, 1]) - self.major_radius
        return np.hypot(rho, d[:, 2]) - self.minor_radius

    def _grad(self, p):
        d = p - self.center
        rxy = np.hypot(d[:, 0], d[:, 1])
        rho = rxy - self.major_radius
        tube = np.hypot(rho, d[:, 2])
        with np.errstate(invalid="ignore", divide="ignore"):
            cx = np.where(rxy > 0, d[:, 0] / rxy, 0.0)
            cy = np.where(rxy > 0, d[:, 1] / rxy, 0.0)
            a = np.where(tube > 0, rho / tube, 0.0)
            b = np.where(tube > 0, d[:, 2] / tube, 0.0)
        return np.stack([a * cx, a * cy, b], axis=1)

    def describe(self):
        return {
            "op": "torus",
            "args": {
                "center": self.center.tolist(),
                "major_radius": self.major_radius,
                "minor_radius": self.minor_radius,
            },
        }


class Plane(ImplicitField):
    """Half-space ``normal . p - offset`` (unit normal, exact SDF)."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset: float = 0.0):
        super().__init__()
        n = _vec(normal, "normal")
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be nonzero")
        self.normal = n / norm
        self.offset = float(offset)

    def _eval(self, p):
        return p @ self.normal - self.offset

    def _grad(self, p):
        return np.broadcast_to(self.normal, p.shape).copy()

    def describe(self):
        return {"op": "plane", "args": {"normal": self.normal.tolist(), "offset": self.offset}}


# -- combinators -------------------------------------------------------------


class _NAry(ImplicitField):
    def __init__(self, children: Sequence[ImplicitField]):
        super().__init__()
        children = list(children)
        if not children:
            raise ValueError(f"{type(self).__name__} needs at least one child")
        self.children = children
        self.lipschitz = max(c.lipschitz for c in children)
        signed = all(c.is_signed for c in children)
        self.signedness = Signedness.SIGNED if signed else Signedness.UNSIGNED

    def describe(self):
        return {"op": type(self).__name__.lower(), "args": {"children": [c.describe() for c in self.children]}}


class Union(_NAry):
    def _eval(self, p):
        out = self.children[0]._eval(p)
        for c in self.children[1:]:
            out = np.minimum(out, c._eval(p))
        return out


class Intersection(_NAry):
    def _eval(self, p):
        out = self.children[0]._eval(p)
        for c in self.children[1:]:
            out = np.maximum(out, c._eval(p))
        return out


class Complement(ImplicitField):
    def __init__(self, child: ImplicitField):
        super().__init__()
        self.child = child
        self.lipschitz = child.lipschitz
        self.signedness = child.signedness

    def _eval(self, p):
        return -self.child._eval(p)

    def _grad(self, p):
        g = self.child._grad(p)
        return None if g is None else -g

    def describe(self):
        return {"op": "complement", "args": {"child": self.child.describe()}}


class Offset(ImplicitField):
    """Level set shifted outward by ``delta`` (``child - delta``)."""

    def __init__(self, child: ImplicitField, delta: float):
        super().__init__()
        self.child = child
        self.delta = float(delta)
        self.lipschitz = child.lipschitz
        self.signedness = child.signedness

    def _eval(self, p):
        return self.child._eval(p) - self.delta

    def _grad(self, p):
        return self.child._grad(p)

    def describe(self):
        return {"op": "offset", "args": {"child": self.child.describe(), "delta": self.delta}}


class Absolute(ImplicitField):
    """Unsigned distance ``|child|``; turns a solid boundary into an open shell."""

    signedness = Signedness.UNSIGNED

    def __init__(self, child: ImplicitField):
        super().__init__()
        self.child = child
        self.lipschitz = child.lipschitz

    def _eval(self, p):
        return np.abs(self.child._eval(p))

    def describe(self):
        return {"op": "absolute", "args": {"child": self.child.describe()}}


class Transform(ImplicitField):
    """Rigid motion plus uniform scale: ``s * child(R^T (p - t) / s)``.

    Rigid motions and uniform scale leave the Lipschitz bound unchanged.
    """

    def __init__(self, child: ImplicitField, rotation=None, translation=(0.0, 0.0, 0.0), scale: float = 1.0):
        super().__init__()
        rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be an orthogonal 3x3 matrix")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.child = child
        self.rotation = rot
        self.translation = _vec(translation, "translation")
        self.scale = float(scale)
        self.lipschitz = child.lipschitz
        self.signedness = child.signedness

    def _eval(self, p):
        local = (p - self.translation) @ self.rotation / self.scale
        return self.scale * self.child._eval(local)

    def describe(self):
        return {
            "op": "transform",
            "args": {
                "child": self.child.describe(),
                "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist(),
                "scale": self.scale,
            },
        }


class Constant(ImplicitField):
    """``f = value`` everywhere (an empty level set unless value is 0)."""

    def __init__(self, value: float = 1.0, lipschitz: float = 1.0):
        super().__init__()
        self.value = float(value)
        self.lipschitz = float(lipschitz)

    def _eval(self, p):
        return np.full(len(p), self.value)

    def describe(self):
        return {"op": "constant", "args": {"value": self.value, "lipschitz": self.lipschitz}}


class CallableField(ImplicitField):
    """Wraps an opaque vectorized function; the caller must supply λ."""

    def __init__(
        self,
        fn: Callable[[np.ndarray], np.ndarray],
        lipschitz: float,
        signedness: Signedness = Signedness.SIGNED,
        bounds: BoundingBox = UNIT_BOX,
    ):
        super().__init__()
        if not lipschitz > 0:
            raise ValueError("an opaque field needs a positive Lipschitz bound")
        self.fn = fn
        self.lipschitz = float(lipschitz)
        self.signedness = Signedness(signedness)
        self.bounds = bounds

    def _eval(self, p):
        return np.asarray(self.fn(p), dtype=float).reshape(len(p))


class WithLipschitz(ImplicitField):
    """Overrides the Lipschitz bound reported by ``child``."""

    def __init__(self, child: ImplicitField, lipschitz: float):
        super().__init__()
        if not lipschitz > 0:
            raise ValueError("Lipschitz bound must be positive")
        self.child = child
        self.lipschitz = float(lipschitz)
        self.signedness = child.signedness
        self.bounds = child.bounds

    def _eval(self, p):
        return self.child._eval(p)

    def _grad(self, p):
        return self.child._grad(p)

    def describe(self):
        return {**self.child.describe(), "lipschitz": self.lipschitz}


# -- sampled grids -----------------------------------------------------------


@dataclass
class _GridData:
    values: np.ndarray  # shape (nx, ny, nz), x-major index order
    box: BoundingBox
    spacing: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        shape = np.array(self.values.shape)
        self.spacing = self.box.extents / (shape - 1)


class GridField(ImplicitField):
    """Trilinear interpolation of corner samples on a regular grid.

    ``values[i, j, k]`` sits at ``box.lo + (i, j, k) * spacing``.  Queries
    outside the box are clamped onto it.  The Lipschitz bound is the largest
    per-cell bound ``sqrt(gx^2 + gy^2 + gz^2)`` where ``ga`` is the largest
    absolute edge difference along axis ``a`` divided by the spacing; the
    trilinear gradient components are convex combinations of those edge
    slopes, so the bound holds everywhere in the cell.
    """

    def __init__(self, values, box: BoundingBox = UNIT_BOX, lipschitz: float | None = None):
        super().__init__()
        vals = np.asarray(values, dtype=float)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise ValueError("grid needs at least 2 samples per axis")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        self.values = vals
        self.bounds = box
        self._grid = _GridData(vals, box)
        self.lipschitz = float(lipschitz) if lipschitz is not None else self.cell_lipschitz_bound()
        if not self.lipschitz > 0:
            self.lipschitz = 1.0

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def cell_lipschitz_bound(self) -> float:
        v = self.values
        h = self._grid.spacing
        dx = np.abs(np.diff(v, axis=0)) / h[0]
        dy = np.abs(np.diff(v, axis=1)) / h[1]
        dz = np.abs(np.diff(v, axis=2)) / h[2]
        # per cell: max over the 4 parallel edges along each axis
        gx = np.maximum.reduce([dx[:, :-1, :-1], dx[:, 1:, :-1], dx[:, :-1, 1:], dx[:, 1:, 1:]])
        gy = np.maximum.reduce([dy[:-1, :, :-1], dy[1:, :, :-1], dy[:-1, :, 1:], dy[1:, :, 1:]])
        gz = np.maximum.reduce([dz[:-1, :-1, :], dz[1:, :-1, :], dz[:-1, 1:, :], dz[1:, 1:, :]])
        return float(np.sqrt(gx**2 + gy**2 + gz**2).max())

    def _locate(self, p):
        g = self._grid
        shape = np.array(self.values.shape)
        u = (np.clip(p, g.box.lo, g.box.hi) - g.box.lo) / g.spacing
        i0 = np.clip(np.floor(u).astype(np.int64), 0, shape - 2)
        frac = u - i0
        return i0, frac

    def _corners(self, i0):
        v = self.values
        i, j, k = i0[:, 0], i0[:, 1], i0[:, 2]
        return np.stack(
            [
                v[i, j, k], v[i + 1, j, k], v[i, j + 1, k], v[i + 1, j + 1, k],
                v[i, j, k + 1], v[i + 1, j, k + 1], v[i, j + 1, k + 1], v[i + 1, j + 1, k + 1],
            ],
            axis=1,
        )

    def _eval(self, p):
        i0, f = self._locate(p)
        c = self._corners(i0)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c00 = c[:, 0] * (1 - fx) + c[:, 1] * fx
        c10 = c[:, 2] * (1 - fx) + c[:, 3] * fx
        c01 = c[:, 4] * (1 - fx) + c[:, 5] * fx
        c11 = c[:, 6] * (1 - fx) + c[:, 7] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz

    def _grad(self, p):
        # gradient of the trilinear interpolant; on an interior node plane the
        # one-sided derivatives of the two adjacent cells are averaged
        i0, f = self._locate(p)
        g = self._cell_grad(i0, f)
        for a in range(3):
            on_plane = (f[:, a] == 0.0) & (i0[:, a] > 0)
            if on_plane.any():
                j0, fa = i0[on_plane].copy(), f[on_plane].copy()
                j0[:, a] -= 1
                fa[:, a] = 1.0
                g[on_plane, a] = 0.5 * (g[on_plane, a] + self._cell_grad(j0, fa)[:, a])
        return g

    def _cell_grad(self, i0, f):
        c = self._corners(i0)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        h = self._grid.spacing
        dx_y0z0 = c[:, 1] - c[:, 0]
        dx_y1z0 = c[:, 3] - c[:, 2]
        dx_y0z1 = c[:, 5] - c[:, 4]
        dx_y1z1 = c[:, 7] - c[:, 6]
        gx = ((dx_y0z0 * (1 - fy) + dx_y1z0 * fy) * (1 - fz) + (dx_y0z1 * (1 - fy) + dx_y1z1 * fy) * fz) / h[0]
        dy_x0z0 = c[:, 2] - c[:, 0]
        dy_x1z0 = c[:, 3] - c[:, 1]
        dy_x0z1 = c[:, 6] - c[:, 4]
        dy_x1z1 = c[:, 7] - c[:, 5]
        gy = ((dy_x0z0 * (1 - fx) + dy_x1z0 * fx) * (1 - fz) + (dy_x0z1 * (1 - fx) + dy_x1z1 * fx) * fz) / h[1]
        dz_x0y0 = c[:, 4] - c[:, 0]
        dz_x1y0 = c[:, 5] - c[:, 1]
        dz_x0y1 = c[:, 6] - c[:, 2]
        dz_x1y1 = c[:, 7] - c[:, 3]
        gz = ((dz_x0y0 * (1 - fx) + dz_x1y0 * fx) * (1 - fy) + (dz_x0y1 * (1 - fx) + dz_x1y1 * fx) * fy) / h[2]
        return np.stack([gx, gy, gz], axis=1)

    @classmethod
    def bake(cls, source: ImplicitField, resolution, box: BoundingBox = UNIT_BOX) -> "GridField":
        """Sample ``source`` at grid corners (uncounted on ``source``)."""
        res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
        axes = [np.linspace(box.lo[a], box.hi[a], res[a]) for a in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        vals = source._eval(pts).reshape(tuple(res))
        return cls(vals, box)

    def describe(self):
        return {"op": "grid", "args": {"resolution": list(self.resolution), "bounds": self.bounds.to_dict()}}
