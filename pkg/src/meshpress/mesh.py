"""Triangle meshes: OBJ I/O, normalization, surface sampling and BVH queries.

The BVH is a median-split hierarchy stored as flat arrays so the query
kernels can be compiled with numba. Batch queries (``closest_points``,
``inside_mask``) are what the TSDF initialisation uses; the scalar
``closest_point`` / ``is_inside`` wrap them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Tuple, Union

import numba
import numpy as np

PathLike = Union[str, os.PathLike]


class ObjParseError(ValueError):
    """Malformed OBJ record."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class MeshStructureError(ValueError):
    """Mesh connectivity refers to vertices that do not exist."""


class DegenerateMeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            lo, hi = self.faces.min(), self.faces.max()
            if lo < 0 or hi >= len(self.vertices):
                raise MeshStructureError(
                    f"face index {hi if hi >= len(self.vertices) else lo} out of range "
                    f"for {len(self.vertices)} vertices"
                )

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def drop_degenerate_faces(self, eps: float = 0.0) -> "TriangleMesh":
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        keep = np.linalg.norm(cross, axis=1) > eps
        return TriangleMesh(self.vertices.copy(), self.faces[keep])

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy())


@dataclass
class SurfaceSamples:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.normals):
            raise ValueError("points and normals differ in length")

    @property
    def count(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# OBJ I/O
# ---------------------------------------------------------------------------

def _resolve_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(lineno, f"bad face index {token!r}") from None
    if idx == 0:
        raise ObjParseError(lineno, "face index 0 is not valid in OBJ")
    return idx - 1 if idx > 0 else n_vertices + idx


def load_obj(path: PathLike) -> TriangleMesh:
    """Read a Wavefront OBJ file.

    Polygons are fan-triangulated, negative (relative) indices resolved and
    zero-area triangles dropped. Records other than ``v`` and ``f`` are
    ignored.
    """
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(lineno, "vertex needs 3 coordinates")
                try:
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError:
                    raise ObjParseError(lineno, "non-numeric vertex coordinate") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(lineno, "face needs at least 3 vertices")
                ids = [_resolve_index(t, len(verts), lineno) for t in parts[1:]]
                for a, b in zip(ids[1:-1], ids[2:]):
                    faces.append((ids[0], a, b))
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces_arr = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if faces_arr.size and (faces_arr.min() < 0 or faces_arr.max() >= len(vertices)):
        raise MeshStructureError(f"{path}: face index out of range for {len(vertices)} vertices")
    return TriangleMesh(vertices, faces_arr).drop_degenerate_faces()


def save_obj(mesh: TriangleMesh, path: PathLike) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


# ---------------------------------------------------------------------------
# normalization and sampling
# ---------------------------------------------------------------------------

def normalize_unit_cube(mesh: TriangleMesh, margin: float = 0.0) -> TriangleMesh:
    """Uniformly scale and center ``mesh`` so its longest side spans 2*(1-margin)."""
    if not 0.0 <= margin < 1.0:
        raise ValueError("margin must lie in [0, 1)")
    if mesh.n_vertices == 0:
        raise DegenerateMeshError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise DegenerateMeshError("mesh collapses to a single point")
    center = 0.5 * (lo + hi)
    scale = 2.0 * (1.0 - margin) / extent
    return TriangleMesh((mesh.vertices - center) * scale, mesh.faces.copy())


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> SurfaceSamples:
    """Area-weighted uniform samples; each point carries its source face normal."""
    if count <= 0:
        raise ValueError("count must be positive")
    if mesh.n_faces == 0:
        raise DegenerateMeshError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0.0:
        raise DegenerateMeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas)
    picks = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    picks = np.minimum(picks, mesh.n_faces - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.triangles()[picks]
    pts = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    return SurfaceSamples(pts, mesh.face_normals()[picks])


# ---------------------------------------------------------------------------
# bounding volume hierarchy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialIndex:
    """Median-split BVH over triangles; immutable after :func:`build_index`."""

    triangles: np.ndarray  # (F, 3, 3), reordered to leaf order
    tri_ids: np.ndarray  # original face id for each reordered triangle
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray  # -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    leaf_size: int = field(default=4)

    @property
    def n_triangles(self) -> int:
        return len(self.tri_ids)


def build_index(mesh: TriangleMesh, leaf_size: int = 4) -> SpatialIndex:
    if mesh.n_faces == 0:
        raise DegenerateMeshError("cannot index a mesh without faces")
    tri = mesh.triangles()
    centroids = tri.mean(axis=1)
    tlo = tri.min(axis=1)
    thi = tri.max(axis=1)
    order = np.arange(mesh.n_faces)

    lo_l, hi_l, left_l, right_l, start_l, count_l = [], [], [], [], [], []

    def new_node() -> int:
        for lst in (lo_l, hi_l):
            lst.append(None)
        for lst in (left_l, right_l, start_l, count_l):
            lst.append(-1)
        return len(lo_l) - 1

    root = new_node()
    stack = [(root, 0, mesh.n_faces)]
    while stack:
        node, start, end = stack.pop()
        ids = order[start:end]
        lo_l[node] = tlo[ids].min(axis=0)
        hi_l[node] = thi[ids].max(axis=0)
        n = end - start
        if n <= leaf_size:
            start_l[node], count_l[node] = start, n
            continue
        c = centroids[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = n // 2
        part = np.argsort(c[:, axis], kind="stable")
        order[start:end] = ids[part]
        left, right = new_node(), new_node()
        left_l[node], right_l[node] = left, right
        stack.append((right, start + mid, end))
        stack.append((left, start, start + mid))

    return SpatialIndex(
        triangles=np.ascontiguousarray(tri[order]),
        tri_ids=order.copy(),
        node_lo=np.array(lo_l, dtype=np.float64),
        node_hi=np.array(hi_l, dtype=np.float64),
        node_left=np.array(left_l, dtype=np.int64),
        node_right=np.array(right_l, dtype=np.int64),
        node_start=np.array(start_l, dtype=np.int64),
        node_count=np.array(count_l, dtype=np.int64),
        leaf_size=leaf_size,
    )


@numba.njit(cache=True, inline="always")
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@numba.njit(cache=True, inline="always")
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@numba.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@numba.njit(cache=True)
def _closest_pairs_kernel(points, tris, out_p, out_b):
    for i in range(points.shape[0]):
        a, b, c = tris[i, 0], tris[i, 1], tris[i, 2]
        q = _closest_on_triangle(points[i], a, b, c)
        out_p[i] = q
        # barycentrics of q via the normal equations of the triangle frame
        v0 = b - a
        v1 = c - a
        v2 = q - a
        d00 = _dot(v0, v0)
        d01 = _dot(v0, v1)
        d11 = _dot(v1, v1)
        d20 = _dot(v2, v0)
        d21 = _dot(v2, v1)
        den = d00 * d11 - d01 * d01
        if den <= 0.0:
            out_b[i, 0] = 1.0
            out_b[i, 1] = 0.0
            out_b[i, 2] = 0.0
            continue
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        out_b[i, 0] = 1.0 - v - w
        out_b[i, 1] = v
        out_b[i, 2] = w


def closest_on_triangles(points: np.ndarray, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Closest point on ``triangles[i]`` to ``points[i]`` and its barycentric coordinates."""
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    t = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    out_p = np.empty_like(p)
    out_b = np.empty_like(p)
    _closest_pairs_kernel(p, t, out_p, out_b)
    return out_p, out_b


@numba.njit(cache=True)
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d2 += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d2 += (p[k] - hi[k]) ** 2
    return d2


@numba.njit(cache=True)
def _closest_kernel(queries, tris, lo, hi, left, right, start, count, bound2, out_d, out_p, out_t):
    stack = np.empty(128, dtype=np.int64)
    for qi in range(queries.shape[0]):
        p = queries[qi]
        best = bound2
        best_t = -1
        best_p = np.full(3, np.nan)
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, lo[node], hi[node]) >= best:
                continue
            if left[node] < 0:
                for t in range(start[node], start[node] + count[node]):
                    q = _closest_on_triangle(p, tris[t, 0], tris[t, 1], tris[t, 2])
                    d2 = ((p - q) ** 2).sum()
                    if d2 < best:
                        best = d2
                        best_t = t
                        best_p = q
                continue
            l_node = left[node]
            r_node = right[node]
            dl = _box_dist2(p, lo[l_node], hi[l_node])
            dr = _box_dist2(p, lo[r_node], hi[r_node])
            # push the farther child first so the nearer one is visited next
            if dl <= dr:
                stack[top] = r_node
                stack[top + 1] = l_node
            else:
                stack[top] = l_node
                stack[top + 1] = r_node
            top += 2
        out_d[qi] = np.sqrt(best) if best_t >= 0 else np.inf
        out_p[qi] = best_p
        out_t[qi] = best_t


def closest_points(
    index: SpatialIndex, queries: np.ndarray, max_distance: float = np.inf
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch closest-point query: (distances, points, face ids).

    Queries with nothing closer than ``max_distance`` get distance ``inf``,
    NaN points and face id -1.
    """
    q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
    n = len(q)
    dist = np.empty(n)
    pts = np.empty((n, 3))
    tid = np.empty(n, dtype=np.int64)
    _closest_kernel(
        q, index.triangles, index.node_lo, index.node_hi, index.node_left,
        index.node_right, index.node_start, index.node_count,
        float(max_distance) ** 2, dist, pts, tid,
    )
    faces = np.where(tid >= 0, index.tri_ids[np.maximum(tid, 0)], -1)
    return dist, pts, faces


def closest_point(index: SpatialIndex, query) -> Tuple[float, np.ndarray, int]:
    d, p, t = closest_points(index, np.asarray(query, dtype=np.float64)[None])
    return float(d[0]), p[0], int(t[0])


# ray parity -----------------------------------------------------------------

_RAY_DIRS = np.array(
    [
        [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
        [0.8628562094610168, 0.3943904526441183, 0.3161512863423063],
        [-0.2353914419093254, 0.9093140391843587, 0.3430839716532093],
        [0.1270462015393406, -0.4310337487049547, 0.8933143627802061],
        [-0.6920251345109713, -0.1874218437510032, -0.6971193006271862],
        [0.3301540728929311, -0.8632451177271015, -0.3818836126127405],
    ]
)
_RAY_DIRS /= np.linalg.norm(_RAY_DIRS, axis=1, keepdims=True)


@numba.njit(cache=True)
def _ray_box(o, inv, lo, hi):
    tmin = 0.0
    tmax = np.inf
    for k in range(3):
        t1 = (lo[k] - o[k]) * inv[k]
        t2 = (hi[k] - o[k]) * inv[k]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
    return tmin <= tmax


@numba.njit(cache=True)
def _crossings(o, d, tris, lo, hi, left, right, start, count, eps):
    """Return crossing count along the ray, or -1 on a grazing hit."""
    inv = 1.0 / d
    stack = np.empty(128, dtype=np.int64)
    stack[0] = 0
    top = 1
    hits = 0
    while top > 0:
        top -= 1
        node = stack[top]
        if not _ray_box(o, inv, lo[node], hi[node]):
            continue
        if left[node] >= 0:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
            continue
        for t in range(start[node], start[node] + count[node]):
            a = tris[t, 0]
            e1 = tris[t, 1] - a
            e2 = tris[t, 2] - a
            pv = _cross(d, e2)
            det = _dot(e1, pv)
            scale = np.sqrt(_dot(e1, e1) * _dot(e2, e2))
            if abs(det) <= eps * scale:
                # ray parallel to the triangle plane; grazing only if coplanar
                n = _cross(e1, e2)
                if abs(_dot(o - a, n)) <= eps * scale:
                    return -1
                continue
            inv_det = 1.0 / det
            tv = o - a
            u = _dot(tv, pv) * inv_det
            if u < -eps or u > 1.0 + eps:
                continue
            qv = _cross(tv, e1)
            v = _dot(d, qv) * inv_det
            if v < -eps or u + v > 1.0 + eps:
                continue
            dist = _dot(e2, qv) * inv_det
            if dist < -eps:
                continue
            if u < eps or v < eps or u + v > 1.0 - eps or dist < eps:
                return -1
            hits += 1
    return hits


@numba.njit(cache=True)
def _inside_kernel(queries, dirs, tris, lo, hi, left, right, start, count, out):
    for qi in range(queries.shape[0]):
        res = -1
        for k in range(dirs.shape[0]):
            res = _crossings(queries[qi], dirs[k], tris, lo, hi, left, right, start, count, 1e-9)
            if res >= 0:
                break
        # every direction grazed: the point sits on the surface, call it outside
        out[qi] = res > 0 and (res % 2 == 1)


def inside_mask(index: SpatialIndex, queries: np.ndarray) -> np.ndarray:
    """Ray-parity inside test for a batch of points.

    The sign is only meaningful for closed, consistently oriented meshes.
    """
    q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
    out = np.zeros(len(q), dtype=np.bool_)
    _inside_kernel(
        q, _RAY_DIRS, index.triangles, index.node_lo, index.node_hi, index.node_left,
        index.node_right, index.node_start, index.node_count, out,
    )
    return out


def is_inside(mesh: TriangleMesh, index: SpatialIndex, query) -> bool:
    del mesh  # the index already holds the geometry
    return bool(inside_mask(index, np.asarray(query, dtype=np.float64)[None])[0])


def signed_distance(index: SpatialIndex, queries: np.ndarray) -> np.ndarray:
    """Distance to the surface, negative inside."""
    d, _, _ = closest_points(index, queries)
    return np.where(inside_mask(index, queries), -d, d)
