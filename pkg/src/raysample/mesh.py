"""Triangle meshes as distance fields.

``MeshField`` answers closest-point queries through a bounding volume
hierarchy compiled with numba.  The sign comes from the angle-weighted
pseudonormal of the closest feature (face, edge or vertex), which is exact
for closed, consistently oriented meshes; open meshes fall back to unsigned
distance.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from numba import njit

from raysample.errors import MeshLoadError
from raysample.fields import BoundingBox, ImplicitField, Signedness, UNIT_BOX

LEAF_SIZE = 4
GUESS_RES = 32

# closest-feature codes returned by the kernel
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)


# -- loaders -----------------------------------------------------------------


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles from a Wavefront OBJ (polygons are fanned)."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    try:
                        verts.append([float(x) for x in parts[1:4]])
                    except ValueError as exc:
                        raise MeshLoadError(f"{path}:{lineno}: bad vertex") from exc
                    if len(verts[-1]) != 3:
                        raise MeshLoadError(f"{path}:{lineno}: vertex needs 3 coordinates")
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        try:
                            i = int(tok.split("/")[0])
                        except ValueError as exc:
                            raise MeshLoadError(f"{path}:{lineno}: bad face index") from exc
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise MeshLoadError(f"{path}:{lineno}: face needs 3 vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
    except OSError as exc:
        if isinstance(exc, MeshLoadError):
            raise
        raise MeshLoadError(f"cannot read {path}: {exc}") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles from a binary little-endian PLY."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise MeshLoadError(f"cannot read {path}: {exc}") from exc
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshLoadError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if not any(line.strip() == "format binary_little_endian 1.0" for line in header):
        raise MeshLoadError(f"{path}: only binary_little_endian PLY is supported")
    elements: list[tuple[str, int, list]] = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshLoadError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append(("scalar", tok[2], _PLY_TYPES[tok[1]]))
    offset = body_start
    verts = faces = None
    try:
        for name, count, props in elements:
            if all(p[0] == "scalar" for p in props):
                dtype = np.dtype([(p[1], "<" + p[2]) for p in props])
                arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
                offset += dtype.itemsize * count
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(float)
                continue
            if name != "face" or len(props) != 1:
                raise MeshLoadError(f"{path}: unsupported list element {name!r}")
            _, _, count_t, index_t = props[0]
            cdt, idt = np.dtype("<" + count_t), np.dtype("<" + index_t)
            out = []
            for _ in range(count):
                n = int(np.frombuffer(data, cdt, 1, offset)[0])
                offset += cdt.itemsize
                idx = np.frombuffer(data, idt, n, offset).astype(np.int64)
                offset += idt.itemsize * n
                for k in range(1, n - 1):
                    out.append((idx[0], idx[k], idx[k + 1]))
            faces = np.array(out, dtype=np.int64).reshape(-1, 3)
    except (ValueError, KeyError) as exc:
        raise MeshLoadError(f"{path}: truncated or malformed PLY body") from exc
    if verts is None or faces is None:
        raise MeshLoadError(f"{path}: PLY needs vertex and face elements")
    return verts, faces


def write_obj(path, vertices, faces) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in np.asarray(vertices, dtype=float).tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for f in np.asarray(faces, dtype=np.int64):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_ply_mesh(path, vertices, faces) -> None:
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(vertices)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
    rec["n"] = 3
    rec["idx"] = faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vertices.tobytes())
        fh.write(rec.tobytes())


def load_mesh(path, bounds: BoundingBox = UNIT_BOX) -> "MeshField":
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MeshLoadError(f"no such mesh file: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        verts, faces = read_obj(path)
    elif ext == ".ply":
        verts, faces = read_ply(path)
    else:
        raise MeshLoadError(f"unsupported mesh format {ext!r} (expected .obj or .ply)")
    return MeshField(verts, faces, bounds=bounds)


# -- numba kernels -----------------------------------------------------------


@njit(cache=True)
def _closest_on_triangle(px, py, pz, tri, f):
    """Closest point on triangle ``tri[f]``; returns (qx, qy, qz, feature)."""
    a0, a1, a2 = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    b0, b1, b2 = tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2]
    c0, c1, c2 = tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2]
    abx, aby, abz = b0 - a0, b1 - a1, b2 - a2
    acx, acy, acz = c0 - a0, c1 - a1, c2 - a2
    apx, apy, apz = px - a0, py - a1, pz - a2
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return a0, a1, a2, VERT_A
    bpx, bpy, bpz = px - b0, py - b1, pz - b2
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return b0, b1, b2, VERT_B
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a0 + v * abx, a1 + v * aby, a2 + v * abz, EDGE_AB
    cpx, cpy, cpz = px - c0, py - c1, pz - c2
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return c0, c1, c2, VERT_C
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a0 + w * acx, a1 + w * acy, a2 + w * acz, EDGE_CA
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b0 + w * (c0 - b0), b1 + w * (c1 - b1), b2 + w * (c2 - b2), EDGE_BC
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (
        a0 + abx * v + acx * w,
        a1 + aby * v + acy * w,
        a2 + abz * v + acz * w,
        FACE,
    )


@njit(cache=True)
def _box_dist2(px, py, pz, lo, hi, node):
    dx = max(lo[node, 0] - px, 0.0, px - hi[node, 0])
    dy = max(lo[node, 1] - py, 0.0, py - hi[node, 1])
    dz = max(lo[node, 2] - pz, 0.0, pz - hi[node, 2])
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _query(points, guess, tri, tri_lo, tri_hi, node_lo, node_hi, node_left, node_right, node_start, node_count, order):
    n = points.shape[0]
    out_d2 = np.empty(n)
    out_face = np.empty(n, dtype=np.int64)
    out_feat = np.empty(n, dtype=np.int64)
    out_q = np.empty((n, 3))
    stack = np.empty(128, dtype=np.int64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        # start from a nearby triangle so the traversal prunes early
        bf = guess[i]
        bqx, bqy, bqz, bfeat = _closest_on_triangle(px, py, pz, tri, bf)
        best = (px - bqx) ** 2 + (py - bqy) ** 2 + (pz - bqz) ** 2
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(px, py, pz, node_lo, node_hi, node) >= best:
                continue
            cnt = node_count[node]
            if cnt > 0:
                s = node_start[node]
                for j in range(s, s + cnt):
                    f = order[j]
                    if _box_dist2(px, py, pz, tri_lo, tri_hi, f) >= best:
                        continue
                    qx, qy, qz, feat = _closest_on_triangle(px, py, pz, tri, f)
                    d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
                    if d2 < best:
                        best = d2
                        bf = f
                        bfeat = feat
                        bqx, bqy, bqz = qx, qy, qz
            else:
                left = node_left[node]
                right = node_right[node]
                dl = _box_dist2(px, py, pz, node_lo, node_hi, left)
                dr = _box_dist2(px, py, pz, node_lo, node_hi, right)
                # push the farther child first so the nearer one is popped next
                if dl <= dr:
                    if dr < best:
                        stack[sp] = right
                        sp += 1
                    if dl < best:
                        stack[sp] = left
                        sp += 1
                else:
                    if dl < best:
                        stack[sp] = left
                        sp += 1
                    if dr < best:
                        stack[sp] = right
                        sp += 1
        out_d2[i] = best
        out_face[i] = bf
        out_feat[i] = bfeat
        out_q[i, 0] = bqx
        out_q[i, 1] = bqy
        out_q[i, 2] = bqz
    return out_d2, out_face, out_feat, out_q


def _build_bvh(tri: np.ndarray):
    """Median-split BVH over triangle centroids (built once, in numpy)."""
    m = len(tri)
    cent = tri.mean(axis=1)
    tlo = tri.min(axis=1)
    thi = tri.max(axis=1)
    order = np.arange(m)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        lo.append(tlo[idx].min(axis=0))
        hi.append(thi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(0)
        return len(lo) - 1

    root = new_node(0, m)
    work = [(root, 0, m)]
    while work:
        node, s, e = work.pop()
        if e - s <= LEAF_SIZE:
            count[node] = e - s
            continue
        idx = order[s:e]
        axis = int(np.argmax(hi[node] - lo[node]))
        mid = (e - s) // 2
        part = np.argpartition(cent[idx, axis], mid)
        order[s:e] = idx[part]
        l_node = new_node(s, s + mid)
        r_node = new_node(s + mid, e)
        left[node], right[node] = l_node, r_node
        work.append((l_node, s, s + mid))
        work.append((r_node, s + mid, e))
    return (
        np.array(lo),
        np.array(hi),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64),
        np.array(count, dtype=np.int64),
        order.astype(np.int64),
    )


def is_watertight(faces: np.ndarray) -> bool:
    """Every directed edge appears once and its reverse appears once."""
    if len(faces) == 0:
        return False
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts != 1):
        return False
    keys = directed[:, 0] * (faces.max() + 1) + directed[:, 1]
    rev = directed[:, 1] * (faces.max() + 1) + directed[:, 0]
    return bool(np.all(np.isin(rev, keys)))


class MeshField(ImplicitField):
    """Distance to a triangle mesh; signed when the mesh is closed."""

    def __init__(self, vertices, faces, bounds: BoundingBox = UNIT_BOX, signed: bool | None = None):
        super().__init__()
        v = np.ascontiguousarray(vertices, dtype=float).reshape(-1, 3)
        f = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0 or len(f) == 0:
            raise MeshLoadError("empty mesh")
        if not np.all(np.isfinite(v)):
            raise MeshLoadError("mesh has non-finite vertices")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshLoadError("face index out of range")
        self.vertices = v
        self.faces = f
        self.bounds = bounds
        self.lipschitz = 1.0
        watertight = is_watertight(f)
        if signed is None:
            signed = watertight
        elif signed and not watertight:
            raise MeshLoadError("signed distance requires a closed, consistently oriented mesh")
        self.signedness = Signedness.SIGNED if signed else Signedness.UNSIGNED
        self.triangles = np.ascontiguousarray(v[f])
        self._scale = float(np.ptp(v, axis=0).max()) or 1.0
        self._bvh = _build_bvh(self.triangles)
        self._tri_lo = np.ascontiguousarray(self.triangles.min(axis=1))
        self._tri_hi = np.ascontiguousarray(self.triangles.max(axis=1))
        self._build_guess_grid()
        self._pseudonormals()

    def _pseudonormals(self):
        tri = self.triangles
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        dbl_area = np.linalg.norm(cross, axis=1)
        self.face_areas = 0.5 * dbl_area
        with np.errstate(invalid="ignore", divide="ignore"):
            fn = np.where(dbl_area[:, None] > 0, cross / dbl_area[:, None], 0.0)
        self.face_normals = fn
        # vertex pseudonormals: incident face normals weighted by corner angle
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            e1 = tri[:, (k + 1) % 3] - tri[:, k]
            e2 = tri[:, (k + 2) % 3] - tri[:, k]
            cosang = np.einsum("ij,ij->i", e1, e2) / np.maximum(
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-300
            )
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, self.faces[:, k], ang[:, None] * fn)
        # edge pseudonormals: sum of the two adjacent face normals
        f = self.faces
        edges = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1)  # (m, 3, 2)
        key = np.sort(edges, axis=2).reshape(-1, 2)
        _, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        en = np.zeros((inv.max() + 1, 3))
        np.add.at(en, inv, np.repeat(fn, 3, axis=0))
        self.vertex_normals = vn
        self.edge_normals = en[inv].reshape(-1, 3, 3)

    def _build_guess_grid(self, res: int = GUESS_RES):
        # nearest triangle to each cell center of a coarse grid over the
        # bounds and the mesh; only used to seed exact queries
        lo = np.minimum(self.bounds.lo, self.vertices.min(axis=0))
        hi = np.maximum(self.bounds.hi, self.vertices.max(axis=0))
        self._guess_lo = lo
        self._guess_step = (hi - lo) / res
        c = (np.arange(res) + 0.5)
        X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
        centers = lo + np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1) * self._guess_step
        seed = np.zeros(len(centers), dtype=np.int64)
        self._guess_face = _query(centers, seed, self.triangles, self._tri_lo, self._tri_hi, *self._bvh)[1]
        self._guess_res = res

    def _guess(self, pts):
        r = self._guess_res
        ijk = np.clip(((pts - self._guess_lo) / self._guess_step).astype(np.int64), 0, r - 1)
        return self._guess_face[(ijk[:, 0] * r + ijk[:, 1]) * r + ijk[:, 2]]

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    def closest(self, points):
        """Closest surface data: (distance, face index, feature code, closest point)."""
        pts = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        d2, face, feat, q = _query(pts, self._guess(pts), self.triangles, self._tri_lo, self._tri_hi, *self._bvh)
        return np.sqrt(d2), face, feat, q

    def _feature_normal(self, face, feat):
        n = np.empty((len(face), 3))
        is_face = feat == FACE
        n[is_face] = self.face_normals[face[is_face]]
        for code, k in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
            sel = feat == code
            n[sel] = self.vertex_normals[self.faces[face[sel], k]]
        for code, k in ((EDGE_AB, 0), (EDGE_BC, 1), (EDGE_CA, 2)):
            sel = feat == code
            n[sel] = self.edge_normals[face[sel], k]
        return n

    def _signed(self, pts):
        dist, face, feat, q = self.closest(pts)
        if not self.is_signed:
            return dist, q, None
        normal = self._feature_normal(face, feat)
        side = np.einsum("ij,ij->i", pts - q, normal)
        sign = np.where(side < 0.0, -1.0, 1.0)
        return sign * dist, q, sign

    def _eval(self, p):
        return self._signed(p)[0]

    def _grad(self, p):
        dist, face, feat, q = self.closest(p)
        d = p - q
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(dist[:, None] > 0, d / dist[:, None], 0.0)
        if self.is_signed:
            normal = self._feature_normal(face, feat)
            sign = np.where(np.einsum("ij,ij->i", d, normal) < 0.0, -1.0, 1.0)
            g = g * sign[:, None]
            # in a face region sign * offset / dist is the face normal itself;
            # use it directly so the direction does not degrade as dist -> 0
            is_face = feat == FACE
            g[is_face] = normal[is_face]
            # on (or within rounding of) an edge or vertex: the pseudonormal,
            # the limit from outside
            on = dist <= 1e-12 * self._scale
            g[on] = normal[on] / np.linalg.norm(normal[on], axis=1, keepdims=True)
        return g

    def describe(self):
        return {"op": "mesh", "args": {"faces": int(len(self.faces)), "vertices": int(len(self.vertices))}}


# -- procedural meshes -------------------------------------------------------


def icosphere(level: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Subdivided icosahedron projected to a sphere (outward-oriented)."""
    t = (1.0 + 5.0**0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(int(level)):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.asarray(verts) * radius + np.asarray(center, dtype=float), np.asarray(faces, dtype=np.int64)


def torus_mesh(major_radius: float = 0.5, minor_radius: float = 0.2, n_u: int = 64, n_v: int = 32):
    """Torus about the z axis; ``u`` goes around the axis, ``v`` around the tube."""
    u = 2 * np.pi * np.arange(n_u) / n_u
    v = 2 * np.pi * np.arange(n_v) / n_v
    U, V = np.meshgrid(u, v, indexing="ij")
    rho = major_radius + minor_radius * np.cos(V)
    verts = np.stack([rho * np.cos(U), rho * np.sin(U), minor_radius * np.sin(V)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_u), np.arange(n_v), indexing="ij")
    a = i * n_v + j
    b = ((i + 1) % n_u) * n_v + j
    c = ((i + 1) % n_u) * n_v + (j + 1) % n_v
    d = i * n_v + (j + 1) % n_v
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return verts, faces


def bumpy_sphere(level: int = 3, radius: float = 0.6, amplitude: float = 0.25, lobes: int = 3):
    """Icosphere with radial bumps ``r (1 + a cos(k theta) sin(k phi))``; non-convex for a > ~0.1."""
    verts, faces = icosphere(level, 1.0)
    theta = np.arccos(np.clip(verts[:, 2], -1, 1))
    phi = np.arctan2(verts[:, 1], verts[:, 0])
    scale = radius * (1.0 + amplitude * np.cos(lobes * theta) * np.sin(lobes * phi))
    return verts * scale[:, None], faces
