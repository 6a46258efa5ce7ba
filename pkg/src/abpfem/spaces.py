"""Discrete spaces: C1 Bogner-Fox-Schmit bicubics on rect meshes and
discontinuous Lagrange triangles.

The BFS space carries four Hermite degrees of freedom per vertex (value,
d/dx, d/dy, d2/dxdy).  On 1-irregular meshes the hanging-vertex DOFs are
slaves: the value and tangential-derivative DOFs come from the cubic value
trace of the coarse master edge, the normal and mixed ones from its cubic
normal-derivative trace, which keeps the glued space exactly C1.  The two
copies of the slit tip are glued the same way.  Assembly and evaluation see
only the free DOFs through the expansion matrix R (full = R @ free).

The DG space is the broken Lagrange space of total degree p on triangles,
nodal on the uniform lattice, with no coupling between cells.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

__all__ = [
    "FeSpace",
    "BoundaryLagrangePoint",
    "SpaceError",
    "FamilyMeshMismatch",
    "DegreeUnsupported",
    "PointOutsideDomain",
    "build_space",
    "eval_basis",
    "eval_function",
    "boundary_lagrange_points",
    "interpolate_bfs",
    "interpolate_dg",
]


class SpaceError(Exception):
    pass


class FamilyMeshMismatch(SpaceError):
    pass


class DegreeUnsupported(SpaceError):
    pass


class PointOutsideDomain(SpaceError):
    pass


# ---------------------------------------------------------------------------
# reference bases


def _hermite(t, deriv):
    """Cubic Hermite shape values on [0,1]: rows (h00, h10, h01, h11)."""
    t = np.asarray(t, dtype=float)
    if deriv == 0:
        return np.stack([
            2 * t ** 3 - 3 * t ** 2 + 1,
            t ** 3 - 2 * t ** 2 + t,
            -2 * t ** 3 + 3 * t ** 2,
            t ** 3 - t ** 2,
        ])
    if deriv == 1:
        return np.stack([
            6 * t ** 2 - 6 * t,
            3 * t ** 2 - 4 * t + 1,
            -6 * t ** 2 + 6 * t,
            3 * t ** 2 - 2 * t,
        ])
    return np.stack([
        12 * t - 6,
        6 * t - 4,
        -12 * t + 6,
        6 * t - 2,
    ])


# corner order matches rect cell storage (SW, SE, NE, NW)
_BFS_CORNERS = ((0, 0), (1, 0), (1, 1), (0, 1))
# local dof = 4*corner + dtype, dtype: 0 val, 1 dx, 2 dy, 3 dxy
_BFS_XDER = (0, 1, 0, 1)   # dtype -> Hermite family in xi (0: h0*, 1: h1*)
_BFS_YDER = (0, 0, 1, 1)


def bfs_tables(pts, order):
    """Reference BFS arrays on the unit cell with unit DOF scaling.

    Returns up to (values (k,16), gradients (k,16,2), Hessians (k,16,2,2))
    for the cell size s = 1; on a physical cell of size s the caller scales
    by dofscale = (1, s, s, s*s) per vertex block and 1/s per derivative
    order.
    """
    pts = np.asarray(pts, dtype=float)
    xi, eta = pts[:, 0], pts[:, 1]
    hx = [_hermite(xi, d) for d in range(order + 1)]    # each (4, k)
    hy = [_hermite(eta, d) for d in range(order + 1)]
    k = len(xi)
    out = []
    # index into the hermite stack: family f, corner bit a -> 2*f + ... rows
    # of _hermite are (h00, h10, h01, h11) = family0/corner0, family1/corner0,
    # family0/corner1, family1/corner1
    def row(f, a):
        return 2 * a + f

    vals = np.empty((k, 16))
    for c, (a, b) in enumerate(_BFS_CORNERS):
        for d in range(4):
            fx, fy = _BFS_XDER[d], _BFS_YDER[d]
            vals[:, 4 * c + d] = hx[0][row(fx, a)] * hy[0][row(fy, b)]
    out.append(vals)
    if order >= 1:
        g = np.empty((k, 16, 2))
        for c, (a, b) in enumerate(_BFS_CORNERS):
            for d in range(4):
                fx, fy = _BFS_XDER[d], _BFS_YDER[d]
                g[:, 4 * c + d, 0] = hx[1][row(fx, a)] * hy[0][row(fy, b)]
                g[:, 4 * c + d, 1] = hx[0][row(fx, a)] * hy[1][row(fy, b)]
        out.append(g)
    if order >= 2:
        H = np.empty((k, 16, 2, 2))
        for c, (a, b) in enumerate(_BFS_CORNERS):
            for d in range(4):
                fx, fy = _BFS_XDER[d], _BFS_YDER[d]
                H[:, 4 * c + d, 0, 0] = hx[2][row(fx, a)] * hy[0][row(fy, b)]
                H[:, 4 * c + d, 0, 1] = hx[1][row(fx, a)] * hy[1][row(fy, b)]
                H[:, 4 * c + d, 1, 1] = hx[0][row(fx, a)] * hy[2][row(fy, b)]
        H[:, :, 1, 0] = H[:, :, 0, 1]
        out.append(H)
    return tuple(out)


def bfs_dofscale(s):
    """Per-local-DOF Hermite scaling (1, s, s, s^2) repeated per corner."""
    return np.tile(np.array([1.0, s, s, s * s]), 4)


def dg_node_lattice(p):
    nodes = []
    for j in range(p + 1):
        for i in range(p + 1 - j):
            nodes.append((i / p, j / p))
    return np.array(nodes)


def _dg_exponents(p):
    exps = []
    for total in range(p + 1):
        for a in range(total, -1, -1):
            exps.append((a, total - a))
    return exps


@lru_cache(maxsize=None)
def _dg_coeffs(p):
    """Monomial coefficients of the Lagrange basis (column j = function j)."""
    nodes = dg_node_lattice(p)
    exps = _dg_exponents(p)
    V = np.empty((len(nodes), len(exps)))
    for t, (a, b) in enumerate(exps):
        V[:, t] = nodes[:, 0] ** a * nodes[:, 1] ** b
    return np.linalg.inv(V)


def _mono_eval(pts, exps, dx, dy):
    """Evaluate d^(dx+dy)/dx^dx dy^dy of the monomials at pts, (k, nterm)."""
    x, y = pts[:, 0], pts[:, 1]
    out = np.zeros((len(pts), len(exps)))
    for t, (a, b) in enumerate(exps):
        if a < dx or b < dy:
            continue
        ca = 1.0
        for i in range(dx):
            ca *= a - i
        for i in range(dy):
            ca *= b - i
        out[:, t] = ca * x ** (a - dx) * y ** (b - dy)
    return out


def dg_tables(p, pts, order):
    """Reference values/gradients/Hessians of the Lagrange basis at pts."""
    pts = np.asarray(pts, dtype=float)
    C = _dg_coeffs(p)
    exps = _dg_exponents(p)
    out = [_mono_eval(pts, exps, 0, 0) @ C]
    if order >= 1:
        g = np.stack([_mono_eval(pts, exps, 1, 0) @ C,
                      _mono_eval(pts, exps, 0, 1) @ C], axis=-1)
        out.append(g)
    if order >= 2:
        hxx = _mono_eval(pts, exps, 2, 0) @ C
        hxy = _mono_eval(pts, exps, 1, 1) @ C
        hyy = _mono_eval(pts, exps, 0, 2) @ C
        H = np.empty((len(pts), C.shape[1], 2, 2))
        H[:, :, 0, 0] = hxx
        H[:, :, 0, 1] = hxy
        H[:, :, 1, 0] = hxy
        H[:, :, 1, 1] = hyy
        out.append(H)
    return tuple(out)


# ---------------------------------------------------------------------------
# space container


@dataclass(frozen=True)
class FeSpace:
    mesh: Mesh
    family: str          # 'bfs' | 'dg'
    degree: int          # 3 for bfs, p for dg
    ndof: int
    nfull: int
    cell_dofs: np.ndarray        # (N, nloc) full DOF ids
    free_dofs: np.ndarray        # (ndof,) full ids of the free DOFs
    R: sp.csr_matrix             # (nfull, ndof) expansion, full = R @ free

    def __post_init__(self):
        self.cell_dofs.flags.writeable = False
        self.free_dofs.flags.writeable = False

    @property
    def nloc(self):
        return self.cell_dofs.shape[1]

    def expand(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.ndof,):
            raise SpaceError(f"expected {self.ndof} coefficients")
        return self.R @ coeffs


@dataclass(frozen=True)
class BoundaryLagrangePoint:
    cell: int
    x: tuple
    side: int
    param: float
    lip: int = 0


# ---------------------------------------------------------------------------
# constraint construction (BFS)


def _bfs_constraints(mesh):
    """Slave full-DOF -> [(master full-DOF, weight)] for hanging vertices
    and tied slit-tip copies, masters fully resolved to free DOFs."""
    v = mesh.vertices
    raw = {}
    for (vm, va, vb) in mesh.hanging:
        pa, pb = v[va], v[vb]
        horizontal = pa[1] == pb[1]
        H = abs((pb[0] - pa[0]) if horizontal else (pb[1] - pa[1]))
        # DOF roles along/across the edge
        if horizontal:
            tang, nrm = 1, 2      # dx tangential, dy normal
        else:
            tang, nrm = 2, 1
        val, mix = 0, 3
        A, B, S = 4 * va, 4 * vb, 4 * vm
        # value trace: cubic from (value, tangential) endpoint data
        raw[S + val] = [(A + val, 0.5), (B + val, 0.5),
                        (A + tang, H / 8), (B + tang, -H / 8)]
        raw[S + tang] = [(A + val, -1.5 / H), (B + val, 1.5 / H),
                         (A + tang, -0.25), (B + tang, -0.25)]
        # normal-derivative trace: cubic from (normal, mixed) endpoint data
        raw[S + nrm] = [(A + nrm, 0.5), (B + nrm, 0.5),
                        (A + mix, H / 8), (B + mix, -H / 8)]
        raw[S + mix] = [(A + nrm, -1.5 / H), (B + nrm, 1.5 / H),
                        (A + mix, -0.25), (B + mix, -0.25)]
    for (prim, dup) in mesh.tied_pairs:
        for d in range(4):
            raw[4 * dup + d] = [(4 * prim + d, 1.0)]

    # resolve chains (masters that are themselves slaves); terminates since
    # substitution always moves toward coarser generations
    resolved = {}

    def resolve(dof, depth=0):
        if dof in resolved:
            return resolved[dof]
        if depth > 64:
            raise SpaceError("constraint chain does not terminate")
        acc = {}
        for (mdof, w) in raw[dof]:
            if mdof in raw:
                for (m2, w2) in resolve(mdof, depth + 1).items():
                    acc[m2] = acc.get(m2, 0.0) + w * w2
            else:
                acc[mdof] = acc.get(mdof, 0.0) + w
        resolved[dof] = acc
        return acc

    for dof in list(raw):
        resolve(dof)
    return resolved


def build_space(mesh, family, degree=None):
    """Build a BFS space on a rect mesh or a degree-p DG space on a tri
    mesh."""
    if family == "bfs":
        if mesh.cell_kind != "rect":
            raise FamilyMeshMismatch("bfs requires a rect mesh")
        if degree not in (None, 3):
            raise DegreeUnsupported("bfs is bicubic (degree 3)")
        nfull = 4 * mesh.nvertices
        slaves = _bfs_constraints(mesh)
        free = np.array([d for d in range(nfull) if d not in slaves],
                        dtype=np.int64)
        col = {int(d): i for i, d in enumerate(free)}
        rows, cols, weights = [], [], []
        for i, d in enumerate(free):
            rows.append(int(d))
            cols.append(i)
            weights.append(1.0)
        for d, combo in slaves.items():
            for (m, w) in combo.items():
                rows.append(d)
                cols.append(col[m])
                weights.append(w)
        R = sp.csr_matrix((weights, (rows, cols)), shape=(nfull, len(free)))
        cell_dofs = (4 * mesh.cells[:, :, None]
                     + np.arange(4)[None, None, :]).reshape(mesh.ncells, 16)
        return FeSpace(mesh, "bfs", 3, len(free), nfull,
                       cell_dofs.astype(np.int64), free, R)
    if family == "dg":
        if mesh.cell_kind != "tri":
            raise FamilyMeshMismatch("dg requires a tri mesh")
        p = 2 if degree is None else int(degree)
        if not 1 <= p <= 10:
            raise DegreeUnsupported(f"dg degree {p} out of range [1, 10]")
        m = (p + 1) * (p + 2) // 2
        ndof = mesh.ncells * m
        cell_dofs = np.arange(ndof, dtype=np.int64).reshape(mesh.ncells, m)
        free = np.arange(ndof, dtype=np.int64)
        R = sp.identity(ndof, format="csr")
        return FeSpace(mesh, "dg", p, ndof, ndof, cell_dofs, free, R)
    raise FamilyMeshMismatch(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# evaluation


def cell_geometry(space, cell):
    """(origin, s) for rect cells; (v0, J) for tri cells."""
    mesh = space.mesh
    vv = mesh.vertices[mesh.cells[cell]]
    if mesh.cell_kind == "rect":
        s = vv[1, 0] - vv[0, 0]
        return vv[0], s
    J = np.column_stack([vv[1] - vv[0], vv[2] - vv[0]])
    return vv[0], J


def eval_basis(space, cell, x_ref, order=0):
    """Local basis values (and derivatives up to `order`) at reference
    points, with physical-derivative scaling for the given cell."""
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=float))
    if space.family == "bfs":
        tabs = bfs_tables(x_ref, order)
        _, s = cell_geometry(space, cell)
        d = bfs_dofscale(s)
        out = [tabs[0] * d]
        if order >= 1:
            out.append(tabs[1] * d[None, :, None] / s)
        if order >= 2:
            out.append(tabs[2] * d[None, :, None, None] / (s * s))
        return tuple(out)
    tabs = dg_tables(space.degree, x_ref, order)
    _, J = cell_geometry(space, cell)
    invJ = np.linalg.inv(J)
    out = [tabs[0]]
    if order >= 1:
        out.append(np.einsum("kib,ba->kia", tabs[1], invJ))
    if order >= 2:
        out.append(np.einsum("ca,kicd,db->kiab", invJ, tabs[2], invJ))
    return tuple(out)


def locate_cell(mesh, x, tol=1e-12):
    """Lowest-index cell whose closure contains x."""
    x = np.asarray(x, dtype=float)
    v = mesh.vertices
    if mesh.cell_kind == "rect":
        lo = v[mesh.cells[:, 0]]
        hi = v[mesh.cells[:, 2]]
        s = hi[:, 0] - lo[:, 0]
        ok = ((x[0] >= lo[:, 0] - tol * s) & (x[0] <= hi[:, 0] + tol * s)
              & (x[1] >= lo[:, 1] - tol * s) & (x[1] <= hi[:, 1] + tol * s))
        idx = np.nonzero(ok)[0]
    else:
        p0 = v[mesh.cells[:, 0]]
        d1 = v[mesh.cells[:, 1]] - p0
        d2 = v[mesh.cells[:, 2]] - p0
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        rx, ry = x[0] - p0[:, 0], x[1] - p0[:, 1]
        a = (rx * d2[:, 1] - ry * d2[:, 0]) / det
        b = (ry * d1[:, 0] - rx * d1[:, 1]) / det
        ok = (a >= -tol) & (b >= -tol) & (a + b <= 1 + tol)
        idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        raise PointOutsideDomain(f"point {tuple(x)} is outside the mesh")
    return int(idx[0])


def to_reference(space, cell, x):
    origin, geo = cell_geometry(space, cell)
    x = np.asarray(x, dtype=float)
    if space.mesh.cell_kind == "rect":
        return (x - origin) / geo
    return np.linalg.solve(geo, x - origin)


def eval_function(space, coeffs, x, order=0, cell=None):
    """Evaluate the FE function (or its gradient / Hessian) at one point.

    On interfaces the lowest-index containing cell is used unless `cell`
    is supplied (DG functions are two-valued there)."""
    if cell is None:
        cell = locate_cell(space.mesh, x)
    full = space.expand(coeffs)
    ref = np.atleast_2d(to_reference(space, cell, x))
    tabs = eval_basis(space, cell, ref, order)
    loc = full[space.cell_dofs[cell]]
    if order == 0:
        return float(tabs[0][0] @ loc)
    if order == 1:
        return tabs[1][0].T @ loc
    return np.einsum("iab,i->ab", tabs[2][0], loc)


# ---------------------------------------------------------------------------
# boundary Lagrange points


_BFS_EDGE_PARAMS = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)


def boundary_lagrange_points(space):
    """Boundary points carrying the L-infinity boundary constraints.

    BFS: the four Lagrange points of the cubic trace on every boundary
    side.  DG: every lattice node of every cell lying on the boundary
    (including nodes where only a vertex of the cell touches it).  Points
    come in (side index, parameter, cell) order.
    """
    mesh = space.mesh
    v = mesh.vertices
    out = []
    if space.family == "bfs":
        for si, s in enumerate(mesh.sides):
            if not s.boundary:
                continue
            a, b = v[s.v0], v[s.v1]
            for t in _BFS_EDGE_PARAMS:
                p = a + t * (b - a)
                out.append(BoundaryLagrangePoint(
                    s.cells[0], (float(p[0]), float(p[1])), si, t, s.lip))
        out.sort(key=lambda q: (q.side, q.param, q.cell))
        return out

    bsides = [(si, s) for si, s in enumerate(mesh.sides) if s.boundary]
    ends = np.array([[v[s.v1] - v[s.v0]] for _, s in bsides]).reshape(-1, 2)
    starts = np.array([v[s.v0] for _, s in bsides])
    lens = np.array([s.h for _, s in bsides])
    centers = mesh.cell_centers()
    nodes_ref = dg_node_lattice(space.degree)
    seen = set()
    for c in range(mesh.ncells):
        vv = v[mesh.cells[c]]
        J = np.column_stack([vv[1] - vv[0], vv[2] - vv[0]])
        phys = vv[0] + nodes_ref @ J.T
        sheet = 1 if centers[c][1] > 0.0 else -1
        for k, p in enumerate(phys):
            # on-segment test against every boundary side
            d = p[None, :] - starts
            t = (d * ends).sum(axis=1) / lens ** 2
            off = d - t[:, None] * ends
            on = (np.abs(off).max(axis=1) <= 1e-12) & (t >= -1e-12) & (t <= 1 + 1e-12)
            best = None
            for j in np.nonzero(on)[0]:
                si, s = bsides[j]
                if s.lip != 0 and mesh.domain.has_slit() and s.lip != sheet:
                    continue
                if best is None:
                    best = (si, float(np.clip(t[j], 0.0, 1.0)), s.lip)
            if best is None:
                continue
            key = (c, k)
            if key in seen:
                continue
            seen.add(key)
            out.append(BoundaryLagrangePoint(
                c, (float(p[0]), float(p[1])), best[0], best[1], best[2]))
    out.sort(key=lambda q: (q.side, q.param, q.cell))
    return out


# ---------------------------------------------------------------------------
# interpolation (test and experiment harness helpers)


def interpolate_bfs(space, u, grad, hess):
    """Hermite interpolant coefficients from callables u(pts, lip),
    grad(pts, lip), hess(pts, lip)."""
    if space.family != "bfs":
        raise FamilyMeshMismatch("interpolate_bfs needs a BFS space")
    mesh = space.mesh
    pts = mesh.vertices
    lips = mesh.vertex_lips()
    full = np.empty(space.nfull)
    for cls in (0, 1, -1):
        idx = np.nonzero(lips == cls)[0]
        if len(idx) == 0:
            continue
        P = pts[idx]
        uv = u(P, lip=cls)
        gv = grad(P, lip=cls)
        hv = hess(P, lip=cls)
        full[4 * idx + 0] = uv
        full[4 * idx + 1] = gv[:, 0]
        full[4 * idx + 2] = gv[:, 1]
        full[4 * idx + 3] = hv[:, 0, 1]
    return full[space.free_dofs]


def interpolate_dg(space, u):
    """Nodal interpolant coefficients from a callable u(pts, lip)."""
    if space.family != "dg":
        raise FamilyMeshMismatch("interpolate_dg needs a DG space")
    mesh = space.mesh
    nodes_ref = dg_node_lattice(space.degree)
    centers = mesh.cell_centers()
    coeffs = np.empty(space.ndof)
    slit = mesh.domain.has_slit()
    for c in range(mesh.ncells):
        vv = mesh.vertices[mesh.cells[c]]
        J = np.column_stack([vv[1] - vv[0], vv[2] - vv[0]])
        phys = vv[0] + nodes_ref @ J.T
        lip = 0
        if slit:
            lip = 1 if centers[c][1] > 0.0 else -1
        coeffs[space.cell_dofs[c]] = u(phys, lip=lip)
    return coeffs
