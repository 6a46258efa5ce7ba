"""Sparse forms for the residual-minimization schemes.

Everything here reduces the quadratic functionals to matrices on the free
DOFs of a space: the volume residual

    ||f - L v||^2_{L2(Omega)} = v^T G v - 2 r^T v + c0,

the boundary point-evaluation constraints -t <= d - C v <= t, the interior
jump stabilization v^T S v of the nonconforming scheme, and the linear
system of the least-squares variant.  Hanging-node and tied-vertex
constraints are condensed through the space's expansion matrix R, so all
outputs act on vectors of length space.ndof.

Assembly is chunked over cells (rect cells grouped by size so reference
tables are shared; triangles in fixed-size blocks with per-cell affine
maps).  Triplet order is a pure function of the mesh, which keeps repeated
assemblies bit-identical.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .pde import cell_quadrature, edge_quadrature
from .spaces import bfs_tables, bfs_dofscale, dg_tables

__all__ = [
    "AssemblyError",
    "FamilyMismatch",
    "SingularSystem",
    "ResidualForm",
    "StabilizationForm",
    "ConstraintSystem",
    "assemble_residual",
    "residual_per_cell",
    "assemble_stabilization",
    "stabilization_per_cell",
    "assemble_constraints",
    "assemble_least_squares",
    "boundary_misfit",
]

_CHUNK = 4096


class AssemblyError(Exception):
    pass


class FamilyMismatch(AssemblyError):
    pass


class SingularSystem(AssemblyError):
    pass


@dataclass(frozen=True)
class ResidualForm:
    G: sp.csr_matrix
    r: np.ndarray
    c0: float


@dataclass(frozen=True)
class StabilizationForm:
    S: sp.csr_matrix


@dataclass(frozen=True)
class ConstraintSystem:
    C: sp.csr_matrix
    d: np.ndarray
    points: tuple


def default_quad_degree(space):
    # coefficients carry r^(1/2) factors, so overshoot the polynomial need
    return 2 * space.degree + 4


# ---------------------------------------------------------------------------
# chunked application of L to the local basis


def _operator_chunks(space, problem, quad_degree):
    """Yield (cells, w (n,k), pts (n,k,2), Lphi (n,k,nloc)) blocks.

    w carries the physical cell measure; Lphi holds the piecewise operator
    applied to every (physically scaled) local basis function.
    """
    mesh = space.mesh
    q = cell_quadrature(mesh.cell_kind, quad_degree)
    ref = q.points
    k = len(ref)

    def apply_L(pts_flat, val, grad, hess, n):
        Av = np.asarray(problem.A(pts_flat), dtype=float).reshape(n, k, 2, 2)
        out = -np.einsum("nkab,nkiab->nki", Av, hess)
        bv = np.asarray(problem.b(pts_flat), dtype=float)
        if np.any(bv):
            out += np.einsum("nka,nkia->nki", bv.reshape(n, k, 2), grad)
        cv = np.asarray(problem.c(pts_flat), dtype=float)
        if np.any(cv):
            out += cv.reshape(n, k)[:, :, None] * val
        return out

    if mesh.cell_kind == "rect":
        T0, T1, T2 = bfs_tables(ref, 2)
        sizes = mesh.cell_sizes()
        for s in np.unique(sizes):
            group = np.nonzero(sizes == s)[0]
            d = bfs_dofscale(s)
            V = T0 * d                                   # (k, nloc)
            Gd = T1 * d[None, :, None] / s
            H = T2 * d[None, :, None, None] / (s * s)
            for lo in range(0, len(group), _CHUNK):
                cells = group[lo:lo + _CHUNK]
                n = len(cells)
                origins = mesh.vertices[mesh.cells[cells, 0]]
                pts = origins[:, None, :] + s * ref[None, :, :]
                flat = pts.reshape(-1, 2)
                val = np.broadcast_to(V, (n, k, V.shape[1]))
                grad = np.broadcast_to(Gd, (n,) + Gd.shape)
                hess = np.broadcast_to(H, (n,) + H.shape)
                Lphi = apply_L(flat, val, grad, hess, n)
                w = np.broadcast_to(q.weights * s * s, (n, k))
                yield cells, w, pts, Lphi
        return

    M0, M1, M2 = dg_tables(space.degree, ref, 2)
    all_cells = np.arange(mesh.ncells)
    verts = mesh.vertices
    for lo in range(0, mesh.ncells, _CHUNK):
        cells = all_cells[lo:lo + _CHUNK]
        n = len(cells)
        vv = verts[mesh.cells[cells]]                    # (n, 3, 2)
        J = np.stack([vv[:, 1] - vv[:, 0], vv[:, 2] - vv[:, 0]], axis=2)
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        invJ = np.empty_like(J)
        invJ[:, 0, 0] = J[:, 1, 1]
        invJ[:, 0, 1] = -J[:, 0, 1]
        invJ[:, 1, 0] = -J[:, 1, 0]
        invJ[:, 1, 1] = J[:, 0, 0]
        invJ /= detJ[:, None, None]
        pts = vv[:, None, 0, :] + np.einsum("kr,nar->nka", ref, J)
        flat = pts.reshape(-1, 2)
        val = np.broadcast_to(M0, (n,) + M0.shape)
        grad = np.einsum("kib,nba->nkia", M1, invJ)
        hess = np.einsum("nca,kicd,ndb->nkiab", invJ, M2, invJ)
        Lphi = apply_L(flat, val, grad, hess, n)
        w = q.weights[None, :] * np.abs(detJ)[:, None]
        yield cells, w, pts, Lphi


def assemble_residual(space, problem, quad_degree=None):
    if quad_degree is None:
        quad_degree = default_quad_degree(space)
    nloc = space.nloc
    rows, cols, vals = [], [], []
    r_full = np.zeros(space.nfull)
    c0 = 0.0
    for cells, w, pts, Lphi in _operator_chunks(space, problem, quad_degree):
        fv = np.asarray(problem.f(pts.reshape(-1, 2)),
                        dtype=float).reshape(w.shape)
        Lw = Lphi * w[:, :, None]
        M = np.einsum("nki,nkj->nij", Lw, Lphi)
        dofs = space.cell_dofs[cells]
        rows.append(np.repeat(dofs, nloc, axis=1).ravel())
        cols.append(np.tile(dofs, (1, nloc)).ravel())
        vals.append(M.ravel())
        np.add.at(r_full, dofs.ravel(),
                  np.einsum("nki,nk->ni", Lw, fv).ravel())
        c0 += float((w * fv * fv).sum())
    G_full = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.nfull, space.nfull)).tocsr()
    G = (space.R.T @ G_full @ space.R).tocsr()
    G = ((G + G.T) * 0.5).tocsr()
    r = space.R.T @ r_full
    return ResidualForm(G, r, c0)


def residual_per_cell(space, problem, coeffs, quad_degree=None):
    """||f - L u_h||^2 on each cell (piecewise L for dG)."""
    if quad_degree is None:
        quad_degree = default_quad_degree(space)
    full = space.expand(coeffs)
    out = np.zeros(space.mesh.ncells)
    for cells, w, pts, Lphi in _operator_chunks(space, problem, quad_degree):
        fv = np.asarray(problem.f(pts.reshape(-1, 2)),
                        dtype=float).reshape(w.shape)
        Lu = np.einsum("nki,ni->nk", Lphi, full[space.cell_dofs[cells]])
        out[cells] = (w * (fv - Lu) ** 2).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# boundary constraints


def assemble_constraints(space, problem):
    """Point-evaluation rows at the boundary Lagrange points.

    Row order follows the deterministic point order; d holds g at the
    points (sheet-resolved on the slit)."""
    from .spaces import boundary_lagrange_points, eval_basis, to_reference

    pts = boundary_lagrange_points(space)
    m = len(pts)
    nloc = space.nloc
    rows = np.repeat(np.arange(m), nloc)
    cols = np.empty(m * nloc, dtype=np.int64)
    vals = np.empty(m * nloc)
    for i, z in enumerate(pts):
        ref = to_reference(space, z.cell, np.array(z.x))
        vals[i * nloc:(i + 1) * nloc] = eval_basis(space, z.cell, ref, 0)[0][0]
        cols[i * nloc:(i + 1) * nloc] = space.cell_dofs[z.cell]
    C_full = sp.coo_matrix((vals, (rows, cols)),
                           shape=(m, space.nfull)).tocsr()
    C = (C_full @ space.R).tocsr()
    d = np.empty(m)
    xy = np.array([z.x for z in pts]) if m else np.zeros((0, 2))
    lips = np.array([z.lip for z in pts], dtype=np.int64) if m else np.zeros(0)
    for lip in (-1, 0, 1):
        sel = np.nonzero(lips == lip)[0]
        if len(sel):
            d[sel] = np.asarray(problem.g(xy[sel], lip=lip), dtype=float)
    return ConstraintSystem(C, d, tuple(pts))


# ---------------------------------------------------------------------------
# edge traces (stabilization, boundary integrals)


def _side_traces(space, sides, tpts, order, nadj=2):
    """Basis values (and gradients) of each side's adjacent cells at the
    physical points a + t (b - a); returns one list per adjacency."""
    mesh = space.mesh
    v = mesh.vertices
    out = []
    for adj in range(nadj):
        idx = [s.cells[adj] if len(s.cells) > adj else s.cells[0]
               for s in sides]
        idx = np.asarray(idx, dtype=np.int64)
        a = v[[s.v0 for s in sides]]
        b = v[[s.v1 for s in sides]]
        phys = a[:, None, :] + tpts[None, :, None] * (b - a)[:, None, :]
        if mesh.cell_kind == "rect":
            origins = v[mesh.cells[idx, 0]]
            ss = v[mesh.cells[idx, 1], 0] - origins[:, 0]
            ref = (phys - origins[:, None, :]) / ss[:, None, None]
            T = bfs_tables(ref.reshape(-1, 2), order)
            k = len(tpts)
            nloc = space.nloc
            dsc = np.stack([bfs_dofscale(s) for s in ss])        # (nS, nloc)
            V = T[0].reshape(len(sides), k, nloc) * dsc[:, None, :]
            res = [V]
            if order >= 1:
                Gd = (T[1].reshape(len(sides), k, nloc, 2)
                      * dsc[:, None, :, None] / ss[:, None, None, None])
                res.append(Gd)
            out.append(res)
        else:
            vv = v[mesh.cells[idx]]
            J = np.stack([vv[:, 1] - vv[:, 0], vv[:, 2] - vv[:, 0]], axis=2)
            invJ = np.linalg.inv(J)
            ref = np.einsum("nab,nkb->nka", invJ, phys - vv[:, None, 0, :])
            T = dg_tables(space.degree, ref.reshape(-1, 2), order)
            k = len(tpts)
            nloc = space.nloc
            V = T[0].reshape(len(sides), k, nloc)
            res = [V]
            if order >= 1:
                Gr = T[1].reshape(len(sides), k, nloc, 2)
                res.append(np.einsum("nkib,nba->nkia", Gr, invJ))
            out.append(res)
    return out


def assemble_stabilization(space):
    """Interior jump penalty sum_F (h^-3 ||[v]||^2_F + h^-1 ||[grad v]||^2_F)."""
    if space.family != "dg":
        raise FamilyMismatch("stabilization is defined for dG spaces only")
    mesh = space.mesh
    sides = [s for s in mesh.sides if not s.boundary]
    n_x = space.ndof
    if not sides:
        return StabilizationForm(sp.csr_matrix((n_x, n_x)))
    q = edge_quadrature(2 * space.degree + 4)
    (V0, G0), (V1, G1) = _side_traces(space, sides, q.points, 1)
    h = np.array([s.h for s in sides])
    Jv = np.concatenate([V0, -V1], axis=2)               # (nS, k, 2 nloc)
    Jg = np.concatenate([G0, -G1], axis=2)               # (nS, k, 2 nloc, 2)
    wv = q.weights[None, :] * (h ** -2)[:, None]         # h^-3 * h measure
    wg = q.weights[None, :] * np.ones_like(h)[:, None]   # h^-1 * h
    M = np.einsum("sk,ski,skj->sij", wv, Jv, Jv)
    M += np.einsum("sk,skia,skja->sij", wg, Jg, Jg)
    dofs = np.concatenate(
        [space.cell_dofs[[s.cells[0] for s in sides]],
         space.cell_dofs[[s.cells[1] for s in sides]]], axis=1)
    m2 = dofs.shape[1]
    rows = np.repeat(dofs, m2, axis=1).ravel()
    cols = np.tile(dofs, (1, m2)).ravel()
    S_full = sp.coo_matrix((M.ravel(), (rows, cols)),
                           shape=(space.nfull, space.nfull)).tocsr()
    S = (space.R.T @ S_full @ space.R).tocsr()
    S = ((S + S.T) * 0.5).tocsr()
    return StabilizationForm(S)


def stabilization_per_cell(space, coeffs):
    """Jump penalty of u_h split half-and-half onto the two cells of
    each interior side; sums to coeffs @ S @ coeffs."""
    if space.family != "dg":
        raise FamilyMismatch("stabilization is defined for dG spaces only")
    mesh = space.mesh
    out = np.zeros(mesh.ncells)
    sides = [s for s in mesh.sides if not s.boundary]
    if not sides:
        return out
    q = edge_quadrature(2 * space.degree + 4)
    (V0, G0), (V1, G1) = _side_traces(space, sides, q.points, 1)
    full = space.expand(coeffs)
    c0 = np.array([s.cells[0] for s in sides], dtype=np.int64)
    c1 = np.array([s.cells[1] for s in sides], dtype=np.int64)
    u0 = full[space.cell_dofs[c0]]
    u1 = full[space.cell_dofs[c1]]
    jv = np.einsum("ski,si->sk", V0, u0) - np.einsum("ski,si->sk", V1, u1)
    jg = (np.einsum("skia,si->ska", G0, u0)
          - np.einsum("skia,si->ska", G1, u1))
    h = np.array([s.h for s in sides])
    sval = ((q.weights[None, :] * jv ** 2).sum(axis=1) * h ** -2
            + (q.weights[None, :] * (jg ** 2).sum(axis=2)).sum(axis=1))
    np.add.at(out, c0, 0.5 * sval)
    np.add.at(out, c1, 0.5 * sval)
    return out


def _boundary_l2_terms(space, problem, quad_degree):
    """Boundary mass matrix B and moment vector of g (condensed)."""
    mesh = space.mesh
    sides = [s for s in mesh.sides if s.boundary]
    q = edge_quadrature(quad_degree)
    V = _side_traces(space, sides, q.points, 0, nadj=1)[0][0]
    h = np.array([s.h for s in sides])
    v = mesh.vertices
    a = v[[s.v0 for s in sides]]
    b = v[[s.v1 for s in sides]]
    phys = a[:, None, :] + q.points[None, :, None] * (b - a)[:, None, :]
    lips = np.array([s.lip for s in sides], dtype=np.int64)
    gv = np.empty(phys.shape[:2])
    flat = phys.reshape(-1, 2)
    for lip in (-1, 0, 1):
        sel = lips == lip
        if sel.any():
            gv[sel] = np.asarray(
                problem.g(phys[sel].reshape(-1, 2), lip=lip),
                dtype=float).reshape(-1, len(q.points))
    w = q.weights[None, :] * h[:, None]
    M = np.einsum("sk,ski,skj->sij", w, V, V)
    mom = np.einsum("sk,sk,ski->si", w, gv, V)
    dofs = space.cell_dofs[[s.cells[0] for s in sides]]
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    B_full = sp.coo_matrix((M.ravel(), (rows, cols)),
                           shape=(space.nfull, space.nfull)).tocsr()
    mom_full = np.zeros(space.nfull)
    np.add.at(mom_full, dofs.ravel(), mom.ravel())
    B = (space.R.T @ B_full @ space.R).tocsr()
    B = ((B + B.T) * 0.5).tocsr()
    return B, space.R.T @ mom_full


def boundary_misfit(space, problem, coeffs, beta=1.0, quad_degree=None):
    """Per-cell sum over its boundary sides of h^(2 beta) || g - u_h ||^2_F."""
    if quad_degree is None:
        quad_degree = default_quad_degree(space)
    mesh = space.mesh
    out = np.zeros(mesh.ncells)
    sides = [s for s in mesh.sides if s.boundary]
    if not sides:
        return out
    q = edge_quadrature(quad_degree)
    V = _side_traces(space, sides, q.points, 0, nadj=1)[0][0]
    full = space.expand(coeffs)
    cells = np.array([s.cells[0] for s in sides], dtype=np.int64)
    uh = np.einsum("ski,si->sk", V, full[space.cell_dofs[cells]])
    h = np.array([s.h for s in sides])
    v = mesh.vertices
    a = v[[s.v0 for s in sides]]
    b = v[[s.v1 for s in sides]]
    phys = a[:, None, :] + q.points[None, :, None] * (b - a)[:, None, :]
    lips = np.array([s.lip for s in sides], dtype=np.int64)
    gv = np.empty(phys.shape[:2])
    for lip in (-1, 0, 1):
        sel = lips == lip
        if sel.any():
            gv[sel] = np.asarray(
                problem.g(phys[sel].reshape(-1, 2), lip=lip),
                dtype=float).reshape(-1, len(q.points))
    contrib = (h ** (2.0 * beta + 1.0)) * (q.weights[None, :]
                                           * (gv - uh) ** 2).sum(axis=1)
    np.add.at(out, cells, contrib)
    return out


def assemble_least_squares(space, problem, variant="conforming", sigma=1.0,
                           quad_degree=None):
    """Euler-Lagrange system K x = rhs of the unconstrained least squares

        min_v ||f - L v||^2_{L2(Omega)} + ||g - v||^2_{L2(dOmega)}
              (+ sigma s(v) for the nc variant).
    """
    if variant not in ("conforming", "nc"):
        raise AssemblyError(f"unknown variant {variant!r}")
    if quad_degree is None:
        quad_degree = default_quad_degree(space)
    form = assemble_residual(space, problem, quad_degree)
    B, mom = _boundary_l2_terms(space, problem, 2 * space.degree + 4)
    K = (form.G + B).tocsr()
    rhs = form.r + mom
    if variant == "nc":
        K = (K + sigma * assemble_stabilization(space).S).tocsr()
    return K, rhs
