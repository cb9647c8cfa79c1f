import numpy as np
import pytest

from meshpress.mesh import TriangleMesh, sample_surface
from meshpress.metrics import chamfer_distance
from meshpress.rgr._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from meshpress.rgr.dmc import dmc_extract, dmc_extract_full, dmc_vertex_jacobian, vertex_grad_to_tensor
from meshpress.rgr.fit import EmptySurfaceError, fit_tensor_detailed, surrogate_loss, SurfaceTarget
from meshpress.rgr.grid import DEFORM_SCALE, GridSpec, TsdfDefTensor, init_tsdf_def
from meshpress.rgr.render import ViewSpec, default_views, recon_error, render
from meshpress.shapes import box, mesh_from_sdf, sphere


def analytic_tensor(sdf, k, deform=None):
    grid = GridSpec(k)
    data = np.zeros((k, k, k, 4))
    data[..., 0] = np.clip(sdf(grid.positions()) / grid.truncation, -1, 1)
    if deform is not None:
        data[..., 1:] = deform
    return TsdfDefTensor(grid, data)


@pytest.fixture(scope="module")
def sphere_mesh():
    return mesh_from_sdf(sphere(0.5), resolution=96)


# --- grid ------------------------------------------------------------------

def test_grid_positions():
    g = GridSpec(9)
    assert g.spacing == 0.25
    p = g.positions()
    assert np.allclose(p[0, 0, 0], [-1, -1, -1]) and np.allclose(p[-1, -1, -1], [1, 1, 1])
    assert np.allclose(p[2, 3, 4], [-0.5, -0.25, 0.0])
    with pytest.raises(ValueError):
        GridSpec(7)


def test_init_sphere(sphere_mesh):
    t = init_tsdf_def(sphere_mesh, GridSpec(32))
    assert t.tsdf[15:17, 15:17, 15:17].max() == -1.0
    assert np.all(t.deformation == 0)
    assert t.data.min() >= -1 and t.data.max() <= 1
    # against the analytic SDF: mesh faceting at resolution 96 is far below 1e-2 * tau
    ref = analytic_tensor(sphere(0.5), 32).tsdf
    assert np.abs(t.tsdf - ref).max() < 0.02


def test_init_point_on_surface():
    # cube faces at +-0.5 lie on grid planes of K=9 (h = 0.25)
    k = 9
    verts = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    faces = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
             [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    t = init_tsdf_def(TriangleMesh(verts, faces), GridSpec(k))
    assert t.tsdf[6, 4, 4] == 0.0  # (0.5, 0, 0)
    assert t.tsdf[4, 4, 4] < 0 and t.tsdf[7, 4, 4] > 0


# --- DMC -------------------------------------------------------------------------

def reference_mc(tensor):
    """Cell-by-cell marching cubes with per-edge vertex lookup, as a set of vertices."""
    s = tensor.tsdf
    pos = tensor.deformed_positions()
    k = tensor.grid.resolution
    verts = set()
    tris = []
    for i in range(k - 1):
        for j in range(k - 1):
            for l in range(k - 1):
                corners = [(i + a, j + b, l + c) for a, b, c in CORNER_OFFSETS]
                case = sum(1 << n for n, c in enumerate(corners) if s[c] < 0)
                row = TRI_TABLE[case]
                for tri in range(len(row) // 3):
                    pts = []
                    for e in row[3 * tri : 3 * tri + 3]:
                        ca, cb = (corners[x] for x in EDGE_CORNERS[e])
                        if ca > cb:
                            ca, cb = cb, ca
                        sa, sb = s[ca], s[cb]
                        t = 0.5 if sa == sb else sa / (sa - sb)
                        pts.append(pos[ca] + t * (pos[cb] - pos[ca]))
                    tris.append(pts)
                    verts.update(tuple(p) for p in pts)
    return verts, tris


def test_dmc_empty():
    t = TsdfDefTensor(GridSpec(8), np.concatenate([np.ones((8, 8, 8, 1)), np.zeros((8, 8, 8, 3))], -1))
    assert dmc_extract(t).n_faces == 0
    t.data[..., 0] = -1
    assert dmc_extract(t).n_faces == 0


def test_dmc_single_corner():
    t = TsdfDefTensor(GridSpec(8), np.concatenate([np.ones((8, 8, 8, 1)), np.zeros((8, 8, 8, 3))], -1))
    t.data[3, 3, 3, 0] = -0.5
    # the negative point is shared by 8 cells, each one a case-1 configuration
    m = dmc_extract(t)
    assert m.n_faces == 8
    assert m.n_vertices == 6


def test_table_uses_exactly_sign_change_edges():
    for case, row in enumerate(TRI_TABLE):
        neg = [(case >> c) & 1 for c in range(8)]
        crossing = {e for e, (a, b) in enumerate(EDGE_CORNERS) if neg[a] != neg[b]}
        assert set(row) == crossing


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dmc_matches_reference_with_deformation(seed):
    rng = np.random.default_rng(seed)
    k = 10
    deform = rng.uniform(-1, 1, (k, k, k, 3))
    sdf = lambda p: np.linalg.norm(p - rng.uniform(-0.1, 0.1, 3), axis=-1) - 0.6
    t = analytic_tensor(sdf, k, deform)
    ref_verts, ref_tris = reference_mc(t)
    m = dmc_extract(t)
    got = np.array(sorted(map(tuple, m.vertices)))
    ref = np.array(sorted(ref_verts))
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() < 1e-12
    assert m.n_faces == len(ref_tris)


def test_dmc_matches_skimage_zero_deformation():
    measure = pytest.importorskip("skimage.measure")
    t = analytic_tensor(sphere(0.5), 32)
    m = dmc_extract(t)
    v, f, _, _ = measure.marching_cubes(t.tsdf, level=0.0, spacing=(t.grid.spacing,) * 3)
    v = v - 1.0
    got = np.array(sorted(map(tuple, np.round(m.vertices, 5))))
    ref = np.array(sorted(map(tuple, np.round(v, 5))))
    assert got.shape == ref.shape
    assert np.abs(np.sort(m.vertices, axis=0) - np.sort(v, axis=0)).max() < 1e-6
    assert m.n_faces == len(f)


def test_dmc_sphere_accuracy_and_orientation():
    t = analytic_tensor(sphere(0.5), 32)
    m = dmc_extract(t)
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.all(np.abs(r - 0.5) < t.grid.spacing)
    # closed manifold: every undirected edge in exactly two faces, opposite directions
    e = np.concatenate([m.faces[:, [0, 1]], m.faces[:, [1, 2]], m.faces[:, [2, 0]]])
    directed = set(map(tuple, e))
    assert len(directed) == len(e)
    assert all((b, a) in directed for a, b in directed)
    # outward normals: toward positive TSDF
    centers = m.triangles().mean(axis=1)
    assert np.all((m.face_normals() * centers).sum(axis=1) > 0)


def test_deformation_stays_in_voronoi_cell():
    k = 12
    g = GridSpec(k)
    t = TsdfDefTensor(g, np.concatenate([np.zeros((k, k, k, 1)), np.ones((k, k, k, 3))], -1))
    off = t.deformed_positions() - g.positions()
    assert np.all(np.abs(off) <= g.spacing / 2 + 1e-15)
    assert DEFORM_SCALE == 0.5


def test_jacobian_hand_example():
    k = 8
    data = np.zeros((k, k, k, 4))
    data[..., 0] = 1.0
    data[2, 2, 2, 0] = -0.5
    data[3, 2, 2, 0] = 0.5
    t = TsdfDefTensor(GridSpec(k), data)
    j = dmc_vertex_jacobian(t, ((2, 2, 2), (3, 2, 2)))
    assert j.t == 0.5
    assert j.dt_dsa == pytest.approx(-0.5, abs=1e-15)
    assert j.dt_dsb == pytest.approx(-0.5, abs=1e-15)
    h = t.grid.spacing
    assert np.allclose(j.d_da, (1 - j.t) * 0.5 * h * np.eye(3))
    assert np.allclose(j.d_db, j.t * 0.5 * h * np.eye(3))


def test_jacobian_frozen_on_flat_edge():
    data = np.zeros((8, 8, 8, 4))
    data[..., 0] = 0.3
    t = TsdfDefTensor(GridSpec(8), data)
    j = dmc_vertex_jacobian(t, (0, 1))
    assert j.dt_dsa == 0.0 and j.dt_dsb == 0.0 and j.t == 0.5


def vertex_on_edge(data, grid, a, b):
    t = TsdfDefTensor(grid, data)
    flat = data.reshape(-1, 4)
    sa, sb = flat[a, 0], flat[b, 0]
    w = sa / (sa - sb)
    pos = t.deformed_positions().reshape(-1, 3)
    return pos[a] + w * (pos[b] - pos[a])


def test_jacobian_vs_finite_differences():
    rng = np.random.default_rng(0)
    k = 8
    grid = GridSpec(k)
    strides = (k * k, k, 1)
    eps = 1e-5
    worst = 0.0
    for _ in range(1000):
        data = np.zeros((k, k, k, 4))
        flat = data.reshape(-1, 4)
        axis = rng.integers(3)
        u = rng.integers(0, k, 3)
        u[axis] = rng.integers(0, k - 1)
        a = int(np.ravel_multi_index(tuple(u), (k, k, k)))
        b = a + strides[axis]
        sa = -rng.uniform(0.05, 1.0)
        sb = rng.uniform(0.05, 1.0)
        flat[a, 0], flat[b, 0] = sa, sb
        flat[a, 1:], flat[b, 1:] = rng.uniform(-0.9, 0.9, (2, 3))
        j = dmc_vertex_jacobian(TsdfDefTensor(grid, data), (a, b))
        analytic = np.column_stack([j.d_sa, j.d_sb, j.d_da, j.d_db])  # 3 x 8
        numeric = np.zeros((3, 8))
        for col, (idx, ch) in enumerate([(a, 0), (b, 0)] + [(a, c) for c in (1, 2, 3)] + [(b, c) for c in (1, 2, 3)]):
            plus, minus = data.copy(), data.copy()
            plus.reshape(-1, 4)[idx, ch] += eps
            minus.reshape(-1, 4)[idx, ch] -= eps
            numeric[:, col] = (vertex_on_edge(plus, grid, a, b) - vertex_on_edge(minus, grid, a, b)) / (2 * eps)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_vertex_grad_chain_rule():
    # d/d(data) of sum(c . v) for all DMC vertices, against finite differences
    rng = np.random.default_rng(3)
    t = analytic_tensor(sphere(0.45), 10, rng.uniform(-0.5, 0.5, (10, 10, 10, 3)))
    res = dmc_extract_full(t)
    c = rng.normal(size=res.mesh.vertices.shape)
    grad = vertex_grad_to_tensor(t, res, c)
    eps = 1e-6
    for _ in range(40):
        idx = (*rng.integers(0, 10, 3), rng.integers(0, 4))
        p, m = t.copy(), t.copy()
        p.data[idx] += eps
        m.data[idx] -= eps
        rp, rm = dmc_extract_full(p), dmc_extract_full(m)
        if rp.mesh.n_vertices != res.mesh.n_vertices or rm.mesh.n_vertices != res.mesh.n_vertices:
            continue
        num = ((rp.mesh.vertices * c).sum() - (rm.mesh.vertices * c).sum()) / (2 * eps)
        assert abs(num - grad[idx]) < 1e-6 * max(1.0, abs(num))


# --- rendering ------------------------------------------------------------------------

def square(z=0.0, half=1.0):
    v = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


FRONT = ViewSpec(direction=(0.0, 0.0, -1.0), height=64, width=64)


def test_render_empty():
    r = render(TriangleMesh.empty(), FRONT)
    assert not r.silhouette.any() and not r.depth.any()


def test_render_full_square():
    r = render(square(), FRONT)
    assert r.silhouette.all()
    assert np.allclose(r.depth, 2.0)


def test_render_sphere_area():
    m = mesh_from_sdf(sphere(0.5), resolution=96)
    r = render(m, ViewSpec(direction=(0.0, 0.0, -1.0), height=256, width=256))
    frac = r.silhouette.mean()
    assert abs(frac - np.pi * 0.25 / 4) / (np.pi * 0.25 / 4) < 0.02
    assert np.all(r.depth[~r.silhouette] == 0)


def test_view_validation():
    with pytest.raises(ValueError):
        ViewSpec(direction=(0.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        ViewSpec(direction=(0.0, 0.0, 2.0))


def test_recon_error_examples(sphere_mesh):
    views = default_views(64)
    assert recon_error(sphere_mesh, sphere_mesh, views) == (0.0, 0.0, 0.0)
    e_m, e_d, e = recon_error(TriangleMesh.empty(), square(), [FRONT])
    assert e_m == 64 * 64
    assert e_d == pytest.approx(64 * 64 * 2.0)
    assert e == pytest.approx(e_m + 10 * e_d)
    e_m, e_d, e = recon_error(TriangleMesh.empty(), square(), [FRONT], lambda_rec=0.0)
    assert e == e_m
    with pytest.raises(ValueError):
        recon_error(square(), square(), [])


# --- fitting ------------------------------------------------------------------------

def test_surrogate_gradient_direction(sphere_mesh):
    # the analytic gradient predicts the loss change of a small step
    t = init_tsdf_def(sphere_mesh, GridSpec(16))
    target = SurfaceTarget(sphere_mesh, 5000, 0)
    loss, _, grad = surrogate_loss(t, target, 10.0)
    step = t.copy()
    step.data -= 1e-4 * grad / np.abs(grad).max()
    assert surrogate_loss(step, target, 10.0, with_grad=False)[0] < loss


def test_fit_improves_sphere(sphere_mesh):
    grid = GridSpec(16)
    res = fit_tensor_detailed(sphere_mesh, grid, max_iter=40, n_target=5000)
    assert res.final_loss <= res.initial_loss
    gt = sample_surface(sphere_mesh, 20000, 1)
    before = chamfer_distance(sample_surface(dmc_extract(init_tsdf_def(sphere_mesh, grid)), 20000, 2), gt)
    after = chamfer_distance(sample_surface(dmc_extract(res.tensor), 20000, 2), gt)
    assert after <= before
    assert np.abs(res.tensor.data).max() <= 1.0


def test_fit_regularizer_shrinks_deformation():
    mesh = mesh_from_sdf(box((0.5, 0.3, 0.4)), resolution=64)
    grid = GridSpec(16)
    with_reg = fit_tensor_detailed(mesh, grid, max_iter=30, lambda_reg=10.0, n_target=5000).tensor
    no_reg = fit_tensor_detailed(mesh, grid, max_iter=30, lambda_reg=0.0, n_target=5000).tensor
    assert np.abs(with_reg.deformation).sum() < np.abs(no_reg.deformation).sum()


def test_fit_deterministic(sphere_mesh):
    a = fit_tensor_detailed(sphere_mesh, GridSpec(12), max_iter=5, n_target=2000, seed=4)
    b = fit_tensor_detailed(sphere_mesh, GridSpec(12), max_iter=5, n_target=2000, seed=4)
    assert np.array_equal(a.tensor.data, b.tensor.data)


def test_fit_empty_surface():
    tiny = mesh_from_sdf(sphere(0.03), resolution=96)
    with pytest.raises(EmptySurfaceError):
        fit_tensor_detailed(tiny, GridSpec(8), max_iter=3)
