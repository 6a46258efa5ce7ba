"""FE space construction, basis evaluation, conformity and reproduction."""

import numpy as np
import pytest

from abpfem.mesh import Domain, build_initial_mesh, refine_adaptive
from abpfem.spaces import (DegreeUnsupported, FamilyMeshMismatch,
                           PointOutsideDomain, boundary_lagrange_points,
                           build_space, eval_basis, eval_function,
                           interpolate_bfs, interpolate_dg)


def unit_rect(h0=0.5):
    return build_initial_mesh(Domain.unit_square(), "rect", h0)


def test_bfs_ndof_2x2():
    space = build_space(unit_rect(), "bfs")
    assert space.ndof == 36
    assert space.nloc == 16


def test_dg_ndof_six_triangles():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    space = build_space(mesh, "dg", 2)
    assert space.ndof == 6 * 6
    # no inter-cell coupling: every cell owns its own dof block
    assert len(np.unique(space.cell_dofs)) == space.ndof


def test_bfs_hanging_ndof():
    mesh = refine_adaptive(unit_rect(), np.array([0]))
    space = build_space(mesh, "bfs")
    assert len(mesh.hanging) > 0
    assert space.ndof == 4 * mesh.nvertices - 4 * len(mesh.hanging)


def test_family_mesh_mismatch():
    with pytest.raises(FamilyMeshMismatch):
        build_space(unit_rect(), "dg", 2)
    with pytest.raises(FamilyMeshMismatch):
        build_space(build_initial_mesh(Domain.unit_square(), "tri", 0.5),
                    "bfs")
    with pytest.raises(DegreeUnsupported):
        build_space(build_initial_mesh(Domain.unit_square(), "tri", 0.5),
                    "dg", 0)


def test_bfs_hermite_duality():
    # 16x16 matrix of dof functionals applied to local basis functions is
    # the identity: value, dx, dy, dxy at the four corners
    space = build_space(unit_rect(), "bfs")
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    V, G, H = eval_basis(space, 0, corners, order=2)
    M = np.empty((16, 16))
    for k in range(4):
        M[4 * k + 0] = V[k]
        M[4 * k + 1] = G[k, :, 0]
        M[4 * k + 2] = G[k, :, 1]
        M[4 * k + 3] = H[k, :, 0, 1]
    assert np.allclose(M, np.eye(16), atol=1e-12)


def test_bfs_partition_of_unity():
    space = build_space(unit_rect(), "bfs")
    rng = np.random.default_rng(0)
    pts = np.vstack([[0.5, 0.5], rng.random((8, 2))])
    V, G = eval_basis(space, 2, pts, order=1)
    vals = V[:, 0::4].sum(axis=1)
    grads = G[:, 0::4, :].sum(axis=1)
    assert np.allclose(vals, 1.0, atol=1e-13)
    assert np.allclose(grads, 0.0, atol=1e-12)


def test_dg_reproduces_x_squared():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    space = build_space(mesh, "dg", 2)
    coeffs = interpolate_dg(space, lambda p, lip=0: p[:, 0] ** 2)
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.uniform(-1.0, 0.0, size=2) + np.array([0.0, 1.0])  # upper-left
        u = eval_function(space, coeffs, x)
        assert abs(u - x[0] ** 2) <= 1e-12


def test_eval_function_zero_everywhere():
    space = build_space(unit_rect(), "bfs")
    z = np.zeros(space.ndof)
    x = np.array([0.3, 0.7])
    assert eval_function(space, z, x) == 0.0
    assert np.all(eval_function(space, z, x, order=1) == 0.0)
    assert np.all(eval_function(space, z, x, order=2) == 0.0)


def test_bfs_reproduces_xy():
    space = build_space(unit_rect(), "bfs")
    coeffs = interpolate_bfs(
        space,
        lambda p, lip=0: p[:, 0] * p[:, 1],
        lambda p, lip=0: np.stack([p[:, 1], p[:, 0]], axis=1),
        lambda p, lip=0: np.broadcast_to(np.array([[0.0, 1.0], [1.0, 0.0]]),
                                         (len(p), 2, 2)))
    rng = np.random.default_rng(2)
    for x in rng.random((10, 2)):
        assert abs(eval_function(space, coeffs, x) - x[0] * x[1]) <= 1e-12


def test_bfs_reproduces_q3_single_cell():
    mesh = build_initial_mesh(Domain.unit_square(), "rect", 1.0)
    space = build_space(mesh, "bfs")
    assert space.ndof == 16

    def u(p, lip=0):
        return p[:, 0] ** 3 * p[:, 1] ** 3

    def grad(p, lip=0):
        return np.stack([3 * p[:, 0] ** 2 * p[:, 1] ** 3,
                         3 * p[:, 0] ** 3 * p[:, 1] ** 2], axis=1)

    def hess(p, lip=0):
        x, y = p[:, 0], p[:, 1]
        h = np.empty((len(p), 2, 2))
        h[:, 0, 0] = 6 * x * y ** 3
        h[:, 0, 1] = h[:, 1, 0] = 9 * x ** 2 * y ** 2
        h[:, 1, 1] = 6 * x ** 3 * y
        return h

    coeffs = interpolate_bfs(space, u, grad, hess)
    rng = np.random.default_rng(3)
    for x in rng.random((10, 2)):
        ue = x[0] ** 3 * x[1] ** 3
        assert abs(eval_function(space, coeffs, x) - ue) <= 1e-11
        ge = np.array([3 * x[0] ** 2 * x[1] ** 3, 3 * x[0] ** 3 * x[1] ** 2])
        assert np.allclose(eval_function(space, coeffs, x, order=1), ge,
                           atol=1e-10)


def test_dg_reproduces_p3():
    mesh = build_initial_mesh(Domain.unit_square(), "tri", 0.5)
    space = build_space(mesh, "dg", 3)
    rng = np.random.default_rng(4)
    c = rng.standard_normal(10)

    def poly(p, lip=0):
        x, y = p[:, 0], p[:, 1]
        return (c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y
                + c[5] * y * y + c[6] * x ** 3 + c[7] * x * x * y
                + c[8] * x * y * y + c[9] * y ** 3)

    coeffs = interpolate_dg(space, poly)
    pts = rng.random((20, 2))
    for x in pts:
        exact = poly(x[None, :])[0]
        assert abs(eval_function(space, coeffs, x) - exact) <= 1e-11


def test_boundary_points_bfs_2x2():
    space = build_space(unit_rect(), "bfs")
    pts = boundary_lagrange_points(space)
    assert len(pts) == 32
    keys = [(q.side, q.param, q.cell) for q in pts]
    assert keys == sorted(keys)
    # every point sits on the unit-square boundary
    for q in pts:
        x, y = q.x
        assert min(abs(x), abs(x - 1), abs(y), abs(y - 1)) <= 1e-14


def test_boundary_points_dg_per_cell_attribution():
    from abpfem.spaces import dg_node_lattice
    mesh = build_initial_mesh(Domain.unit_square(), "tri", 0.5)
    space = build_space(mesh, "dg", 2)
    pts = boundary_lagrange_points(space)
    nodes_ref = dg_node_lattice(2)
    per_cell = np.zeros(mesh.ncells, dtype=int)
    for q in pts:
        per_cell[q.cell] += 1
    expected = np.zeros(mesh.ncells, dtype=int)
    for c in range(mesh.ncells):
        vv = mesh.vertices[mesh.cells[c]]
        J = np.column_stack([vv[1] - vv[0], vv[2] - vv[0]])
        phys = vv[0] + nodes_ref @ J.T
        on = (np.abs(phys) <= 1e-12) | (np.abs(phys - 1.0) <= 1e-12)
        expected[c] = int(on.any(axis=1).sum())
    assert np.array_equal(per_cell, expected)
    # a triangle with a single boundary edge and interior third vertex
    # carries exactly the 3 nodes of that edge
    assert 3 in per_cell


def test_boundary_points_slit_lips():
    mesh = build_initial_mesh(Domain.slit_square(), "rect", 0.5)
    space = build_space(mesh, "bfs")
    pts = boundary_lagrange_points(space)
    centers = mesh.cell_centers()
    on_slit = [q for q in pts if q.lip != 0]
    assert {q.lip for q in on_slit} == {-1, 1}
    for q in on_slit:
        assert 0.0 <= q.x[0] <= 1.0 and abs(q.x[1]) <= 1e-14
        assert np.sign(centers[q.cell][1]) == q.lip
    # each slit location appears once per lip
    above = sorted(q.x for q in on_slit if q.lip == 1)
    below = sorted(q.x for q in on_slit if q.lip == -1)
    assert above == below and len(above) > 0


def _c1_jumps(space, coeffs, nsample=5):
    mesh = space.mesh
    worst = 0.0
    for s in mesh.sides:
        if s.boundary or len(set(s.cells)) != 2:
            continue
        a, b = mesh.vertices[s.v0], mesh.vertices[s.v1]
        ca, cb = s.cells[0], s.cells[1]
        for t in np.linspace(0.05, 0.95, nsample):
            x = a + t * (b - a)
            ua = eval_function(space, coeffs, x, cell=ca)
            ub = eval_function(space, coeffs, x, cell=cb)
            ga = eval_function(space, coeffs, x, order=1, cell=ca)
            gb = eval_function(space, coeffs, x, order=1, cell=cb)
            worst = max(worst, abs(ua - ub), np.abs(ga - gb).max())
    return worst


def test_bfs_c1_conforming_mesh():
    space = build_space(unit_rect(), "bfs")
    rng = np.random.default_rng(5)
    coeffs = rng.standard_normal(space.ndof)
    assert _c1_jumps(space, coeffs) <= 1e-10


def test_bfs_c1_one_irregular_mesh():
    mesh = refine_adaptive(unit_rect(), np.array([0]))
    mesh = refine_adaptive(mesh, np.array([1]))
    space = build_space(mesh, "bfs")
    assert len(mesh.hanging) > 0
    rng = np.random.default_rng(6)
    coeffs = rng.standard_normal(space.ndof)
    assert _c1_jumps(space, coeffs) <= 1e-10


def test_bfs_c1_across_hanging_edges():
    # jumps across the subdivided edges themselves, sampled on each slave
    # side against the coarse neighbour
    mesh = refine_adaptive(unit_rect(), np.array([0]))
    space = build_space(mesh, "bfs")
    rng = np.random.default_rng(7)
    coeffs = rng.standard_normal(space.ndof)
    full = space.expand(coeffs)
    assert full.shape == (space.nfull,)
    assert _c1_jumps(space, coeffs) <= 1e-10


def test_hessian_matches_fd_gradient():
    space = build_space(unit_rect(), "bfs")
    rng = np.random.default_rng(8)
    coeffs = rng.standard_normal(space.ndof)
    step = 1e-5
    for x in rng.uniform(0.3, 0.7, size=(5, 2)):
        H = eval_function(space, coeffs, x, order=2)
        for a in range(2):
            e = np.zeros(2)
            e[a] = step
            gp = eval_function(space, coeffs, x + e, order=1)
            gm = eval_function(space, coeffs, x - e, order=1)
            fd = (gp - gm) / (2 * step)
            assert np.allclose(H[a], fd, rtol=1e-5, atol=1e-7)


def test_point_outside_domain():
    space = build_space(unit_rect(), "bfs")
    with pytest.raises(PointOutsideDomain):
        eval_function(space, np.zeros(space.ndof), np.array([2.0, 2.0]))
