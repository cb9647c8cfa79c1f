"""Deformable marching cubes.

Topology comes from the classic case table evaluated on the undeformed
lattice; each surface vertex is interpolated between the *deformed*
endpoints of its edge, so vertex positions are differentiable in both the
TSDF values and the deformations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mesh import TriangleMesh
from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .grid import DEFORM_SCALE, TsdfDefTensor

_TABLE = np.full((256, 16), -1, dtype=np.int64)
for _case, _row in enumerate(TRI_TABLE):
    _TABLE[_case, : len(_row)] = _row
_N_TRIS = np.array([len(r) // 3 for r in TRI_TABLE])

_CORNERS = np.array(CORNER_OFFSETS)
# per local edge: (axis, offset of the edge's lower grid point within the cell)
_EDGE_AXIS = np.empty(12, dtype=np.int64)
_EDGE_BASE = np.empty((12, 3), dtype=np.int64)
for _e, (_ca, _cb) in enumerate(EDGE_CORNERS):
    _diff = _CORNERS[_cb] - _CORNERS[_ca]
    _EDGE_AXIS[_e] = int(np.flatnonzero(_diff)[0])
    _EDGE_BASE[_e] = np.minimum(_CORNERS[_ca], _CORNERS[_cb])

# The table winds triangles with normals toward the inside (negative) corner;
# flip to face positive TSDF.
_FLIP = True


@dataclass
class DmcResult:
    """Extracted mesh plus the edge each vertex was interpolated on.

    ``edge_a``/``edge_b`` are flat grid indices (into K^3) of the edge
    endpoints with ``edge_a`` the lower one; ``t`` is the interpolation
    weight toward ``edge_b``.
    """

    mesh: TriangleMesh
    edge_a: np.ndarray
    edge_b: np.ndarray
    t: np.ndarray


def _edge_weight(sa: np.ndarray, sb: np.ndarray) -> np.ndarray:
    denom = sa - sb
    same = denom == 0
    return np.where(same, 0.5, sa / np.where(same, 1.0, denom))


def dmc_extract_full(tensor: TsdfDefTensor) -> DmcResult:
    k = tensor.grid.resolution
    s = np.asarray(tensor.data[..., 0], dtype=np.float64)
    neg = s < 0

    # case index per cell
    cells = k - 1
    case = np.zeros((cells, cells, cells), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        case |= neg[dx : dx + cells, dy : dy + cells, dz : dz + cells].astype(np.int64) << c
    active = np.flatnonzero((case != 0) & (case != 255))
    if active.size == 0:
        return DmcResult(TriangleMesh.empty(), *(np.zeros(0, dtype=np.int64),) * 2, np.zeros(0))

    ci, cj, ck = np.unravel_index(active, case.shape)
    rows = _TABLE[case.ravel()[active]]  # (n, 16)
    ntri = _N_TRIS[case.ravel()[active]]
    slot = np.arange(15)[None, :]
    valid = slot < 3 * ntri[:, None]
    local = rows[:, :15]

    # global edge key = flat index of lower endpoint * 3 + axis
    cell_idx = np.stack([ci, cj, ck], axis=1)
    base = cell_idx[:, None, :] + _EDGE_BASE[np.maximum(local, 0)]
    axis = _EDGE_AXIS[np.maximum(local, 0)]
    flat = (base[..., 0] * k + base[..., 1]) * k + base[..., 2]
    keys = flat * 3 + axis
    keys = keys[valid].reshape(-1, 3)

    uniq, inverse = np.unique(keys, return_inverse=True)
    faces = inverse.reshape(-1, 3)
    if _FLIP:
        faces = faces[:, [0, 2, 1]]

    edge_a = uniq // 3
    edge_axis = uniq % 3
    stride = np.array([k * k, k, 1])[edge_axis]
    edge_b = edge_a + stride

    flat_s = s.ravel()
    t = _edge_weight(flat_s[edge_a], flat_s[edge_b])
    pos = tensor.deformed_positions().reshape(-1, 3)
    pa, pb = pos[edge_a], pos[edge_b]
    verts = pa + t[:, None] * (pb - pa)
    return DmcResult(TriangleMesh(verts, faces), edge_a, edge_b, t)


def dmc_extract(tensor: TsdfDefTensor) -> TriangleMesh:
    """Surface of ``tensor`` as a triangle mesh; empty if the TSDF never changes sign."""
    return dmc_extract_full(tensor).mesh


@dataclass
class EdgeJacobian:
    """Partials of one DMC vertex w.r.t. its edge's corner values.

    ``d_sa``/``d_sb`` are 3-vectors (vertex change per unit TSDF value);
    ``d_da``/``d_db`` are 3x3 blocks (per unit stored deformation).
    """

    t: float
    dt_dsa: float
    dt_dsb: float
    d_sa: np.ndarray
    d_sb: np.ndarray
    d_da: np.ndarray
    d_db: np.ndarray


def edge_jacobians(tensor: TsdfDefTensor, edge_a: np.ndarray, edge_b: np.ndarray):
    """Vectorized vertex partials for many edges.

    Returns ``(t, dt_dsa, dt_dsb, direction, wa, wb)`` where ``direction`` is
    p'_B - p'_A, so d vertex / d s_A = direction * dt_dsa, and the deformation
    blocks are ``wa * I`` and ``wb * I``.
    """
    flat = tensor.data.reshape(-1, 4).astype(np.float64)
    sa, sb = flat[edge_a, 0], flat[edge_b, 0]
    diff = sa - sb
    frozen = np.abs(diff) < 1e-12
    safe = np.where(frozen, 1.0, diff)
    t = np.where(frozen, 0.5, sa / safe)
    dt_dsa = np.where(frozen, 0.0, -sb / safe**2)
    dt_dsb = np.where(frozen, 0.0, sa / safe**2)
    pos = tensor.deformed_positions().reshape(-1, 3)
    direction = pos[edge_b] - pos[edge_a]
    scale = DEFORM_SCALE * tensor.grid.spacing
    return t, dt_dsa, dt_dsb, direction, (1.0 - t) * scale, t * scale


def dmc_vertex_jacobian(tensor: TsdfDefTensor, edge) -> EdgeJacobian:
    """Analytic partials of the vertex on ``edge``.

    ``edge`` is either a pair of flat grid indices ``(a, b)`` or a pair of
    ``(u, v, w)`` grid coordinates of adjacent lattice points.
    """
    a, b = edge
    k = tensor.grid.resolution
    if np.ndim(a):
        a = int(np.ravel_multi_index(tuple(a), (k, k, k)))
        b = int(np.ravel_multi_index(tuple(b), (k, k, k)))
    t, dsa, dsb, direction, wa, wb = edge_jacobians(tensor, np.array([a]), np.array([b]))
    eye = np.eye(3)
    return EdgeJacobian(
        t=float(t[0]),
        dt_dsa=float(dsa[0]),
        dt_dsb=float(dsb[0]),
        d_sa=direction[0] * dsa[0],
        d_sb=direction[0] * dsb[0],
        d_da=wa[0] * eye,
        d_db=wb[0] * eye,
    )


def vertex_grad_to_tensor(
    tensor: TsdfDefTensor, result: DmcResult, grad_vertices: np.ndarray
) -> np.ndarray:
    """Chain dL/d(vertex) back to dL/d(tensor data); returns a K^3 x 4 array."""
    k = tensor.grid.resolution
    _, dsa, dsb, direction, wa, wb = edge_jacobians(tensor, result.edge_a, result.edge_b)
    along = (grad_vertices * direction).sum(axis=1)
    out = np.zeros((k**3, 4))
    n = k**3
    out[:, 0] = np.bincount(result.edge_a, along * dsa, minlength=n) + np.bincount(
        result.edge_b, along * dsb, minlength=n
    )
    for c in range(3):
        g = grad_vertices[:, c]
        out[:, 1 + c] = np.bincount(result.edge_a, g * wa, minlength=n) + np.bincount(
            result.edge_b, g * wb, minlength=n
        )
    return out.reshape(k, k, k, 4)
