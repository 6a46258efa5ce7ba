"""Quadratic objective, stabilization, constraint, and least-squares
assembly against independent brute-force quadrature oracles."""

import numpy as np
import pytest
import scipy.linalg as la

from abpfem.assembly import (FamilyMismatch, assemble_constraints,
                             assemble_least_squares, assemble_residual,
                             assemble_stabilization, boundary_misfit,
                             default_quad_degree, residual_per_cell,
                             stabilization_per_cell)
from abpfem.mesh import Domain, build_initial_mesh, refine_adaptive
from abpfem.optimize import solve_spd
from abpfem.pde import (apply_operator, cell_quadrature, edge_quadrature,
                        make_problem, problem_registry)
from abpfem.spaces import (build_space, eval_basis, eval_function,
                           interpolate_bfs, interpolate_dg)


def _poisson(domain, f, g, exact=None):
    return make_problem(
        "brute", domain,
        lambda p: np.broadcast_to(np.eye(2), (len(p), 2, 2)),
        None, None, f, g, exact, grid=50)


def _poly_problem():
    # polynomial coefficients keep every quadrature rule in play exact,
    # so assembled and brute-force values must agree to roundoff
    def A(p):
        x, y = p[:, 0], p[:, 1]
        out = np.empty((len(p), 2, 2))
        out[:, 0, 0] = 2.0 + x ** 2
        out[:, 0, 1] = out[:, 1, 0] = x * y
        out[:, 1, 1] = 2.0 + y ** 2
        return out

    return make_problem(
        "poly", Domain.unit_square(), A,
        lambda p: np.stack([p[:, 1], -p[:, 0]], axis=1),
        lambda p: 1.0 + p[:, 0],
        lambda p: p[:, 0] ** 2 - p[:, 1] + 1.0,
        lambda p, lip=0: np.zeros(len(p)),
        grid=50)


def brute_residual_sq(space, problem, coeffs, extra_degree=6):
    """Direct quadrature of the squared operator misfit, cell by cell,
    through the generic point-evaluation path."""
    dq = default_quad_degree(space) + extra_degree
    mesh = space.mesh
    q = cell_quadrature(mesh.cell_kind, dq)
    refarea = 1.0 if mesh.cell_kind == "rect" else 0.5
    areas = mesh.cell_areas()
    full = space.expand(coeffs)
    total = 0.0
    for c in range(mesh.ncells):
        V, Gd, H = eval_basis(space, c, q.points, order=2)
        loc = full[space.cell_dofs[c]]
        if mesh.cell_kind == "rect":
            origin = mesh.vertices[mesh.cells[c][0]]
            s = mesh.vertices[mesh.cells[c][1]][0] - origin[0]
            pts = origin[None, :] + s * q.points
        else:
            vv = mesh.vertices[mesh.cells[c]]
            J = np.column_stack([vv[1] - vv[0], vv[2] - vv[0]])
            pts = vv[0][None, :] + q.points @ J.T
        lv = apply_operator(problem, pts, V @ loc,
                            np.einsum("kia,i->ka", Gd, loc),
                            np.einsum("kiab,i->kab", H, loc))
        fv = np.asarray(problem.f(pts), dtype=float)
        w = q.weights * (areas[c] / refarea)
        total += float(w @ (fv - lv) ** 2)
    return total


def brute_jump_penalty(space, coeffs):
    """Independent edge-wise integration of the interior jump penalty."""
    mesh = space.mesh
    q = edge_quadrature(2 * space.degree + 6)
    tpar = np.ravel(q.points)
    total = 0.0
    for s in mesh.sides:
        if s.boundary:
            continue
        a, b = mesh.vertices[s.v0], mesh.vertices[s.v1]
        pts = a[None, :] + tpar[:, None] * (b - a)[None, :]
        jv = np.empty(len(pts))
        jg = np.empty((len(pts), 2))
        for k, x in enumerate(pts):
            u0 = eval_function(space, coeffs, x, cell=s.cells[0])
            u1 = eval_function(space, coeffs, x, cell=s.cells[1])
            g0 = eval_function(space, coeffs, x, order=1, cell=s.cells[0])
            g1 = eval_function(space, coeffs, x, order=1, cell=s.cells[1])
            jv[k] = u0 - u1
            jg[k] = g0 - g1
        total += s.h ** -2 * float(q.weights @ jv ** 2)
        total += float(q.weights @ (jg ** 2).sum(axis=1))
    return total


def objective_value(form, coeffs):
    return float(coeffs @ (form.G @ coeffs) - 2.0 * form.r @ coeffs + form.c0)


# ---------------------------------------------------------------------------
# residual form


def test_residual_zero_f():
    problem = _poisson(Domain.unit_square(),
                       lambda p: np.zeros(len(p)),
                       lambda p, lip=0: np.zeros(len(p)))
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    form = assemble_residual(space, problem)
    assert np.all(form.r == 0.0)
    assert form.c0 == 0.0
    assert objective_value(form, np.zeros(space.ndof)) == 0.0


def test_residual_exact_on_quadratic():
    # L(x^2 + y^2) = -4 for the Laplacian, so the misfit vanishes
    problem = _poisson(Domain.unit_square(),
                       lambda p: np.full(len(p), -4.0),
                       lambda p, lip=0: p[:, 0] ** 2 + p[:, 1] ** 2)
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    coeffs = interpolate_bfs(
        space,
        lambda p, lip=0: p[:, 0] ** 2 + p[:, 1] ** 2,
        lambda p, lip=0: 2.0 * p,
        lambda p, lip=0: np.broadcast_to(2.0 * np.eye(2), (len(p), 2, 2)))
    form = assemble_residual(space, problem)
    assert abs(objective_value(form, coeffs)) <= 1e-10


def test_residual_matches_brute_quadrature_bfs():
    problem = _poly_problem()
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    form = assemble_residual(space, problem)
    rng = np.random.default_rng(10)
    for _ in range(3):
        v = rng.standard_normal(space.ndof)
        got = objective_value(form, v)
        want = brute_residual_sq(space, problem, v)
        assert got >= 0.0
        assert got == pytest.approx(want, rel=1e-9)


def test_residual_matches_brute_quadrature_dg():
    problem = _poly_problem()
    mesh = build_initial_mesh(problem.domain, "tri", 1.0)
    assert mesh.ncells == 2
    space = build_space(mesh, "dg", 2)
    form = assemble_residual(space, problem)
    rng = np.random.default_rng(11)
    for _ in range(3):
        v = rng.standard_normal(space.ndof)
        got = objective_value(form, v)
        want = brute_residual_sq(space, problem, v)
        assert got == pytest.approx(want, rel=1e-9)


def test_residual_per_cell_sums_to_objective():
    problem = problem_registry(1)
    for family, kind, deg in (("bfs", "rect", None), ("dg", "tri", 2)):
        space = build_space(
            build_initial_mesh(problem.domain, kind, 0.5), family, deg)
        form = assemble_residual(space, problem)
        rng = np.random.default_rng(12)
        v = rng.standard_normal(space.ndof)
        per = residual_per_cell(space, problem, v)
        assert np.all(per >= 0.0)
        assert per.sum() == pytest.approx(objective_value(form, v),
                                          rel=1e-10)


def test_condensed_objective_matches_brute_on_hanging_mesh():
    # hanging-node elimination: the condensed quadratic form evaluates the
    # same integral as direct quadrature of the expanded function
    problem = _poly_problem()
    mesh = refine_adaptive(build_initial_mesh(problem.domain, "rect", 0.5),
                           np.array([0]))
    assert len(mesh.hanging) > 0
    space = build_space(mesh, "bfs")
    form = assemble_residual(space, problem)
    rng = np.random.default_rng(13)
    for _ in range(3):
        v = rng.standard_normal(space.ndof)
        got = objective_value(form, v)
        want = brute_residual_sq(space, problem, v)
        assert got == pytest.approx(want, rel=1e-10)


# ---------------------------------------------------------------------------
# stabilization


def test_stabilization_vanishes_on_global_polynomials():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 0.5)
    rng = np.random.default_rng(14)
    for p in (2, 3):
        space = build_space(mesh, "dg", p)
        S = assemble_stabilization(space).S
        c = rng.standard_normal((p + 1) * (p + 2) // 2)

        def poly(pts, lip=0):
            out = np.zeros(len(pts))
            i = 0
            for a in range(p + 1):
                for b in range(p + 1 - a):
                    out += c[i] * pts[:, 0] ** a * pts[:, 1] ** b
                    i += 1
            return out

        v = interpolate_dg(space, poly)
        assert v @ (S @ v) <= 1e-12 * max(1.0, v @ v)


def test_stabilization_indicator_hand_value():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    space = build_space(mesh, "dg", 2)
    S = assemble_stabilization(space).S
    cell = 0
    v = np.zeros(space.ndof)
    v[space.cell_dofs[cell]] = 1.0
    expected = sum(s.h ** -2 for s in mesh.sides
                   if not s.boundary and cell in s.cells)
    assert v @ (S @ v) == pytest.approx(expected, rel=1e-12)


def test_stabilization_psd_and_symmetric():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    for m in (mesh, refine_adaptive(mesh, np.array([1, 3]))):
        space = build_space(m, "dg", 2)
        S = assemble_stabilization(space).S
        dense = S.toarray()
        assert np.abs(dense - dense.T).max() <= 1e-12
        la.cholesky(dense + 1e-12 * np.eye(len(dense)))


def test_stabilization_matches_brute_jumps():
    space = build_space(build_initial_mesh(Domain.unit_square(), "tri", 0.5),
                        "dg", 2)
    S = assemble_stabilization(space).S
    rng = np.random.default_rng(15)
    v = rng.standard_normal(space.ndof)
    assert v @ (S @ v) == pytest.approx(brute_jump_penalty(space, v),
                                        rel=1e-8)
    per = stabilization_per_cell(space, v)
    assert per.sum() == pytest.approx(v @ (S @ v), rel=1e-10)


def test_stabilization_rejects_bfs():
    space = build_space(build_initial_mesh(Domain.unit_square(), "rect", 0.5),
                        "bfs")
    with pytest.raises(FamilyMismatch):
        assemble_stabilization(space)
    with pytest.raises(FamilyMismatch):
        stabilization_per_cell(space, np.zeros(space.ndof))


# ---------------------------------------------------------------------------
# boundary constraints


def test_constraints_zero_g():
    problem = problem_registry(3)
    space = build_space(build_initial_mesh(problem.domain, "tri", 0.5),
                        "dg", 2)
    con = assemble_constraints(space, problem)
    assert np.all(con.d == 0.0)
    assert con.C.shape == (len(con.points), space.ndof)


def test_constraints_bfs_row_structure():
    problem = _poisson(Domain.unit_square(),
                       lambda p: np.ones(len(p)),
                       lambda p, lip=0: np.zeros(len(p)))
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    con = assemble_constraints(space, problem)
    assert con.C.shape[0] == 32
    csr = con.C.tocsr()
    for i, z in enumerate(con.points):
        cols = csr.indices[csr.indptr[i]:csr.indptr[i + 1]]
        assert set(cols) <= set(space.cell_dofs[z.cell])


def test_constraints_feasible_interpolant():
    def g(p, lip=0):
        return p[:, 0] ** 3 - 2.0 * p[:, 0] * p[:, 1] + p[:, 1] ** 2 + 1.0

    def grad(p, lip=0):
        return np.stack([3.0 * p[:, 0] ** 2 - 2.0 * p[:, 1],
                         -2.0 * p[:, 0] + 2.0 * p[:, 1]], axis=1)

    def hess(p, lip=0):
        H = np.empty((len(p), 2, 2))
        H[:, 0, 0] = 6.0 * p[:, 0]
        H[:, 0, 1] = H[:, 1, 0] = -2.0
        H[:, 1, 1] = 2.0
        return H

    problem = _poisson(Domain.unit_square(),
                       lambda p: np.zeros(len(p)), g)
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.25),
                        "bfs")
    v = interpolate_bfs(space, g, grad, hess)
    con = assemble_constraints(space, problem)
    assert np.abs(con.C @ v - con.d).max() <= 1e-12


# ---------------------------------------------------------------------------
# least squares


def test_least_squares_zero_data():
    problem = _poisson(Domain.unit_square(),
                       lambda p: np.zeros(len(p)),
                       lambda p, lip=0: np.zeros(len(p)))
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    K, rhs = assemble_least_squares(space, problem)
    assert np.all(rhs == 0.0)
    assert np.all(solve_spd(K, rhs) == 0.0)


def test_least_squares_q3_manufactured():
    def u(p, lip=0):
        return p[:, 0] ** 3 * p[:, 1] ** 3 - 2.0 * p[:, 0] ** 2 * p[:, 1] + 5.0

    def grad(p, lip=0):
        x, y = p[:, 0], p[:, 1]
        return np.stack([3 * x ** 2 * y ** 3 - 4 * x * y,
                         3 * x ** 3 * y ** 2 - 2 * x ** 2], axis=1)

    def hess(p, lip=0):
        x, y = p[:, 0], p[:, 1]
        H = np.empty((len(p), 2, 2))
        H[:, 0, 0] = 6 * x * y ** 3 - 4 * y
        H[:, 0, 1] = H[:, 1, 0] = 9 * x ** 2 * y ** 2 - 4 * x
        H[:, 1, 1] = 6 * x ** 3 * y
        return H

    def f(p):
        x, y = p[:, 0], p[:, 1]
        return -(6 * x * y ** 3 - 4 * y) - 6 * x ** 3 * y

    problem = _poisson(Domain.unit_square(), f, u)
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    cstar = interpolate_bfs(space, u, grad, hess)
    K, rhs = assemble_least_squares(space, problem)
    scale = max(np.abs(rhs).max(), 1.0)
    assert np.abs(K @ cstar - rhs).max() <= 1e-10 * scale
    sol = solve_spd(K, rhs)
    assert np.abs(sol - cstar).max() <= 1e-9


def test_least_squares_spd():
    problem = problem_registry(1)
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    K, _ = assemble_least_squares(space, problem)
    dense = K.toarray()
    assert np.abs(dense - dense.T).max() <= 1e-12 * np.abs(dense).max()
    assert la.eigvalsh(dense).min() > 0.0


# ---------------------------------------------------------------------------
# objective equivalence


def test_objective_equivalence_bfs():
    alpha = 10.0
    problem = _poly_problem()
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    form = assemble_residual(space, problem)
    rng = np.random.default_rng(16)
    brute_checked = 0
    for i in range(100):
        v = rng.standard_normal(space.ndof)
        t = float(rng.random())
        psi = alpha * t * t + objective_value(form, v)
        assert psi >= 0.0
        if i < 5:
            want = alpha * t * t + brute_residual_sq(space, problem, v)
            assert psi == pytest.approx(want, rel=1e-8)
            brute_checked += 1
    assert brute_checked == 5


def test_objective_equivalence_dg_with_stabilization():
    alpha, sigma = 10.0, 1.0
    problem = _poly_problem()
    space = build_space(build_initial_mesh(problem.domain, "tri", 0.5),
                        "dg", 2)
    form = assemble_residual(space, problem)
    S = assemble_stabilization(space).S
    rng = np.random.default_rng(17)
    for _ in range(3):
        v = rng.standard_normal(space.ndof)
        t = float(rng.random())
        psi = alpha * t * t + objective_value(form, v) + sigma * (v @ (S @ v))
        want = (alpha * t * t + brute_residual_sq(space, problem, v)
                + sigma * brute_jump_penalty(space, v))
        assert psi == pytest.approx(want, rel=1e-8)


def test_boundary_misfit_zero_for_interpolated_g():
    def g(p, lip=0):
        return p[:, 0] ** 3 - p[:, 1]

    problem = _poisson(Domain.unit_square(),
                       lambda p: np.zeros(len(p)), g)
    space = build_space(build_initial_mesh(problem.domain, "rect", 0.5),
                        "bfs")
    v = interpolate_bfs(
        space, g,
        lambda p, lip=0: np.stack([3.0 * p[:, 0] ** 2,
                                   -np.ones(len(p))], axis=1),
        lambda p, lip=0: np.stack(
            [np.stack([6.0 * p[:, 0], np.zeros(len(p))], axis=1),
             np.zeros((len(p), 2))], axis=1))
    per = boundary_misfit(space, problem, v)
    assert np.abs(per).max() <= 1e-20
    w = np.random.default_rng(18).standard_normal(space.ndof)
    per_w = boundary_misfit(space, problem, w, beta=1.0)
    assert np.all(per_w >= 0.0)
    assert per_w.sum() > 0.0
