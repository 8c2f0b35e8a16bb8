"""File formats: point sets, ISGF grids, JSON scenes and reports.

ISGF layout (all little-endian)::

    bytes  0..3    b"ISGF"
    bytes  4..15   u32 nx, ny, nz
    bytes 16..63   f64 xmin, ymin, zmin, xmax, ymax, zmax
    bytes 64..     f32 values, x fastest, then y, then z
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from raysample.errors import GridLoadError, MeshLoadError
from raysample.fields import (
    Absolute,
    BoundingBox,
    Box,
    Complement,
    Constant,
    GridField,
    ImplicitField,
    Intersection,
    Offset,
    Plane,
    Sphere,
    Torus,
    Transform,
    Union,
    WithLipschitz,
)
from raysample.mesh import load_mesh

ISGF_MAGIC = b"ISGF"
_ISGF_HEADER = struct.Struct("<4s3I6d")


class SceneError(ValueError):
    """Malformed scene description."""


# -- point sets ------------------------------------------------------------------


def write_xyz(path, points, comments=()) -> None:
    """ASCII, one ``x y z`` per line; ``comments`` become leading ``#`` lines."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    header = "\n".join(str(c) for c in comments)
    np.savetxt(path, pts, fmt="%.17g", header=header, comments="# ")


def read_xyz(path) -> np.ndarray:
    return np.loadtxt(path, comments="#", ndmin=2).reshape(-1, 3)


def write_ply_points(path, points, normals=None, comments=()) -> None:
    """Binary little-endian PLY with ``x y z`` (float64) and optional ``nx ny nz``."""
    pts = np.asarray(points, dtype="<f8").reshape(-1, 3)
    props = ["x", "y", "z"]
    cols = [pts]
    if normals is not None:
        nrm = np.asarray(normals, dtype="<f8").reshape(-1, 3)
        if len(nrm) != len(pts):
            raise ValueError("normals and points differ in length")
        props += ["nx", "ny", "nz"]
        cols.append(nrm)
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {len(pts)}")
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(np.hstack(cols), dtype="<f8").tobytes())


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Reader for files written by :func:`write_ply_points`."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    n = next(int(l.split()[2]) for l in lines if l.startswith("element vertex"))
    props = [l.split()[2] for l in lines if l.startswith("property")]
    arr = np.frombuffer(data[end + len(b"end_header\n"):], dtype="<f8").reshape(n, len(props))
    normals = arr[:, 3:6].copy() if len(props) >= 6 else None
    return arr[:, :3].copy(), normals


# -- grids -----------------------------------------------------------------------


def save_grid(path, grid: GridField) -> None:
    nx, ny, nz = grid.values.shape
    b = grid.bounds
    header = _ISGF_HEADER.pack(ISGF_MAGIC, nx, ny, nz, *b.lo, *b.hi)
    # x fastest in the file == Fortran order of the (nx, ny, nz) array
    body = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + body)


def load_grid(path, lipschitz: float | None = None) -> GridField:
    p = Path(path)
    if not p.is_file():
        raise GridLoadError(f"grid file not found: {path}")
    data = p.read_bytes()
    if len(data) < _ISGF_HEADER.size:
        raise GridLoadError(f"{path}: truncated header")
    magic, nx, ny, nz, *bbox = _ISGF_HEADER.unpack_from(data)
    if magic != ISGF_MAGIC:
        raise GridLoadError(f"{path}: bad magic {magic!r}")
    count = nx * ny * nz
    if len(data) != _ISGF_HEADER.size + 4 * count:
        raise GridLoadError(f"{path}: expected {count} values, file size {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=_ISGF_HEADER.size).astype(float)
    if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(bbox)):
        raise GridLoadError(f"{path}: non-finite values")
    try:
        box = BoundingBox(tuple(bbox[:3]), tuple(bbox[3:]))
        return GridField(vals.reshape((nx, ny, nz), order="F"), box, lipschitz)
    except ValueError as exc:
        raise GridLoadError(f"{path}: {exc}") from exc


# -- scenes ----------------------------------------------------------------------

_CHILD_OPS = {"complement": Complement, "absolute": Absolute}


def _args(node: dict) -> dict:
    args = node.get("args", {})
    if not isinstance(args, dict):
        raise SceneError(f"'args' of {node.get('op')!r} must be an object")
    return args


def build_field(node: dict, base_dir: Path | None = None) -> ImplicitField:
    """Build a field from a nested ``{"op": ..., "args": ...}`` description.

    Leaves: ``sphere``, ``box``, ``torus``, ``plane``, ``constant``, ``mesh``
    (``path``), ``grid`` (``path``).  Nodes with ``children``: ``union``,
    ``intersection``.  Nodes with ``child``: ``complement``, ``absolute``,
    ``offset`` (``delta``), ``transform`` (``rotation``, ``translation``,
    ``scale``).  Any node may carry ``"lipschitz"`` to override its bound.
    """
    if not isinstance(node, dict) or "op" not in node:
        raise SceneError(f"scene node must be an object with an 'op' key, got {node!r}")
    op = str(node["op"]).lower()
    a = _args(node)
    base_dir = base_dir or Path(".")

    def child(key="child"):
        if key not in a:
            raise SceneError(f"{op!r} needs '{key}'")
        return build_field(a[key], base_dir)

    try:
        if op == "sphere":
            f = Sphere(a.get("center", (0, 0, 0)), a.get("radius", 0.5))
        elif op == "box":
            f = Box(a.get("center", (0, 0, 0)), a.get("half_extents", (1, 1, 1)))
        elif op == "torus":
            f = Torus(a.get("center", (0, 0, 0)), a.get("major_radius", 0.5), a.get("minor_radius", 0.2))
        elif op == "plane":
            f = Plane(a.get("normal", (0, 0, 1)), a.get("offset", 0.0))
        elif op == "constant":
            f = Constant(a.get("value", 1.0), a.get("lipschitz", 1.0))
        elif op in ("union", "intersection"):
            kids = a.get("children")
            if not isinstance(kids, list) or not kids:
                raise SceneError(f"{op!r} needs a non-empty 'children' list")
            cls = Union if op == "union" else Intersection
            f = cls([build_field(k, base_dir) for k in kids])
        elif op in _CHILD_OPS:
            f = _CHILD_OPS[op](child())
        elif op == "offset":
            f = Offset(child(), a.get("delta", 0.0))
        elif op == "transform":
            f = Transform(child(), a.get("rotation"), a.get("translation", (0, 0, 0)), a.get("scale", 1.0))
        elif op == "mesh":
            f = load_mesh(base_dir / a["path"])
        elif op == "grid":
            f = load_grid(base_dir / a["path"], a.get("lipschitz"))
        else:
            raise SceneError(f"unknown op {op!r}")
    except KeyError as exc:
        raise SceneError(f"{op!r} is missing argument {exc}") from exc
    except TypeError as exc:
        raise SceneError(f"bad arguments for {op!r}: {exc}") from exc
    if "lipschitz" in node:
        f = WithLipschitz(f, node["lipschitz"])
    return f


def load_scene(path) -> ImplicitField:
    """Read a scene file; relative mesh/grid paths resolve against its folder.

    A top-level ``"bounds": {"min": [...], "max": [...]}`` sets the sampling box.
    """
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise SceneError(f"scene file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from exc
    try:
        field = build_field(doc, p.parent)
    except (MeshLoadError, GridLoadError):
        raise
    except ValueError as exc:
        raise SceneError(str(exc)) from exc
    if isinstance(doc, dict) and "bounds" in doc:
        b = doc["bounds"]
        try:
            field.bounds = BoundingBox(tuple(b["min"]), tuple(b["max"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"bad bounds {b!r}: {exc}") from exc
    return field


# -- reports ---------------------------------------------------------------------


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def write_json(path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")
