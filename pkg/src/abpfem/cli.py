"""Benchmark driver: study rows, error norms, rate fits, CSV artifacts and
the strong boundary condition stagnation demo.

Every floating cell is printed with %.17g so a written study reads back bit
identical; error columns stay empty when the benchmark problem carries no
closed form solution.  fit_rate reports the least squares slope of
log(quantity) against log(ndof) over the last `window` levels, sign flipped
so decaying quantities fit positive rates.
"""

import argparse
import sys
from dataclasses import dataclass

import numpy as np

from . import assembly, optimize
from .adapt import DiscreteSolution, _solve_qp_step, afem_loop, gub
from .mesh import build_initial_mesh, export_mesh, refine_uniform
from .pde import cell_quadrature, make_lshape_poisson, problem_registry
from .spaces import bfs_dofscale, bfs_tables, build_space, dg_tables

__all__ = [
    "CSV_HEADER",
    "InsufficientData",
    "NoExactSolution",
    "RunConfig",
    "StudyRow",
    "default_alpha",
    "error_norms",
    "fit_rate",
    "main",
    "make_study_row",
    "read_study_csv",
    "run",
    "strong_bc_demo",
    "write_study_csv",
]

CSV_HEADER = ("ndof,h_inv,linf_error,l2_error,h1_error,h2_error,"
              "estimator,boundary_linf,objective,status")

_CHUNK = 512


class NoExactSolution(Exception):
    """Error norms were requested for a problem without a closed form."""


class InsufficientData(Exception):
    """Not enough positive finite values to fit a rate."""


@dataclass(frozen=True)
class StudyRow:
    """One refinement level of a benchmark study.

    Error fields are None when the problem has no exact solution; they land
    as empty CSV cells.  h1/h2 are broken seminorms of the error (gradient
    and hessian misfit only).
    """

    ndof: int
    h_inv: float
    linf_error: float | None
    l2_error: float | None
    h1_error: float | None
    h2_error: float | None
    estimator: float
    boundary_linf: float
    objective: float
    status: str

    @property
    def solver_status(self):
        return self.status


@dataclass
class RunConfig:
    experiment: int = 1
    method: str = "bfs-qp"
    mode: str = "uniform"
    degree: int = 2
    alpha: float | None = None      # None resolves per experiment
    sigma: float = 1.0
    beta: float = 1.0
    theta: float = 0.5
    max_ndof: int = 20_000
    quad_degree: int | None = None
    h0: float = 0.5
    out: str | None = None
    dump_mesh: str | None = None
    dump_matrices: str | None = None


# ---------------------------------------------------------------------------
# error norms


def _linf_grid(cell_kind):
    t = np.linspace(0.0, 1.0, 5)
    X, Y = np.meshgrid(t, t, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    if cell_kind == "tri":
        pts = pts[pts.sum(axis=1) <= 1.0 + 1e-12]
    return pts


def _field_chunks(space, coeffs, ref, wref):
    """Yield (pts (n,k,2), w (n,kq), uh (n,k), guh (n,k,2), huh (n,k,2,2)).

    k = len(ref) evaluation points per cell; physical quadrature weights w
    cover only the leading len(wref) of them.
    """
    mesh = space.mesh
    loc = space.expand(coeffs)[space.cell_dofs]          # (N, nloc)
    if mesh.cell_kind == "rect":
        T0, T1, T2 = bfs_tables(ref, 2)
        sizes = mesh.cell_sizes()
        for s in np.unique(sizes):
            group = np.nonzero(sizes == s)[0]
            d = bfs_dofscale(s)
            V = T0 * d
            Gd = T1 * d[None, :, None] / s
            H = T2 * d[None, :, None, None] / (s * s)
            for lo in range(0, len(group), _CHUNK):
                cells = group[lo:lo + _CHUNK]
                cf = loc[cells]
                origins = mesh.vertices[mesh.cells[cells, 0]]
                pts = origins[:, None, :] + s * ref[None, :, :]
                uh = cf @ V.T
                guh = np.einsum("ni,kia->nka", cf, Gd)
                huh = np.einsum("ni,kiab->nkab", cf, H)
                w = np.broadcast_to(wref * s * s, (len(cells), len(wref)))
                yield pts, w, uh, guh, huh
        return
    M0, M1, M2 = dg_tables(space.degree, ref, 2)
    verts = mesh.vertices
    for lo in range(0, mesh.ncells, _CHUNK):
        cells = np.arange(lo, min(lo + _CHUNK, mesh.ncells))
        cf = loc[cells]
        vv = verts[mesh.cells[cells]]
        J = np.stack([vv[:, 1] - vv[:, 0], vv[:, 2] - vv[:, 0]], axis=2)
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        invJ = np.empty_like(J)
        invJ[:, 0, 0] = J[:, 1, 1]
        invJ[:, 0, 1] = -J[:, 0, 1]
        invJ[:, 1, 0] = -J[:, 1, 0]
        invJ[:, 1, 1] = J[:, 0, 0]
        invJ /= detJ[:, None, None]
        pts = vv[:, None, 0, :] + np.einsum("kr,nar->nka", ref, J)
        uh = cf @ M0.T
        guh = np.einsum("ni,kib,nba->nka", cf, M1, invJ)
        huh = np.einsum("ni,nca,kicd,ndb->nkab", cf, invJ, M2, invJ)
        w = wref[None, :] * np.abs(detJ)[:, None]
        yield pts, w, uh, guh, huh


def error_norms(space, coeffs, exact, quad_degree=None):
    """(linf, l2, h1, h2) errors of the discrete field against a closed form.

    The max norm additionally samples a 5 x 5 lattice per cell so extrema on
    cell boundaries are not missed by the interior quadrature nodes.  On the
    slit domain each cell evaluates the sheet its own side of the cut.
    """
    if exact is None:
        raise NoExactSolution("problem carries no closed form solution")
    mesh = space.mesh
    if quad_degree is None:
        quad_degree = assembly.default_quad_degree(space)
    q = cell_quadrature(mesh.cell_kind, quad_degree)
    kq = len(q.points)
    ref = np.vstack([q.points, _linf_grid(mesh.cell_kind)])
    slit = mesh.domain.has_slit()
    linf = 0.0
    l2 = h1 = h2 = 0.0
    for pts, w, uh, guh, huh in _field_chunks(space, coeffs, ref, q.weights):
        n, k = uh.shape
        if slit:
            lips = np.where(pts[:, :, 1].mean(axis=1) > 0.0, 1, -1)
        else:
            lips = np.zeros(n, dtype=int)
        ue = np.empty((n, k))
        ge = np.empty((n, kq, 2))
        he = np.empty((n, kq, 2, 2))
        for lip in np.unique(lips):
            m = lips == lip
            sub = pts[m].reshape(-1, 2)
            ue[m] = np.asarray(exact.u(sub, lip=int(lip))).reshape(-1, k)
            # derivatives only at the interior quadrature nodes: the exact
            # gradient may blow up on cell corners (reentrant corner, slit tip)
            subq = pts[m][:, :kq].reshape(-1, 2)
            ge[m] = np.asarray(exact.grad(subq, lip=int(lip))).reshape(-1, kq, 2)
            he[m] = np.asarray(exact.hess(subq, lip=int(lip))).reshape(-1, kq, 2, 2)
        linf = max(linf, float(np.abs(ue - uh).max()))
        de = (ue - uh)[:, :kq]
        dg = ge - guh[:, :kq]
        dh = he - huh[:, :kq]
        l2 += float(np.sum(w * de ** 2))
        h1 += float(np.sum(w * np.sum(dg ** 2, axis=2)))
        h2 += float(np.sum(w * np.sum(dh ** 2, axis=(2, 3))))
    return linf, float(np.sqrt(l2)), float(np.sqrt(h1)), float(np.sqrt(h2))


# ---------------------------------------------------------------------------
# study rows


def make_study_row(solution, report, problem):
    space = solution.space
    mesh = space.mesh
    if mesh.cell_kind == "rect":
        h = float(mesh.cell_sizes().max())
    else:
        h = float(mesh.cell_diameters().max())
    if problem.exact is not None:
        linf, l2, h1, h2 = error_norms(space, solution.coeffs, problem.exact)
    else:
        linf = l2 = h1 = h2 = None
    return StudyRow(
        ndof=space.ndof,
        h_inv=1.0 / h,
        linf_error=linf,
        l2_error=l2,
        h1_error=h1,
        h2_error=h2,
        estimator=report.gub,
        boundary_linf=report.boundary_linf,
        objective=solution.objective,
        status=solution.status,
    )


def fit_rate(rows, column, window=3):
    """Rate r in quantity ~ C * ndof^(-r), fit over the last `window` rows."""
    nd, vals = [], []
    for row in rows:
        v = getattr(row, column)
        if v is not None and np.isfinite(v) and v > 0.0:
            nd.append(row.ndof)
            vals.append(v)
    if len(vals) < window:
        raise InsufficientData(
            f"need {window} positive finite values of {column}, have {len(vals)}")
    x = np.log(np.asarray(nd[-window:], dtype=float))
    y = np.log(np.asarray(vals[-window:], dtype=float))
    return float(-np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# CSV artifacts


def _fmt(v):
    return "" if v is None else "%.17g" % v


def write_study_csv(rows, path):
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join([
            str(r.ndof), _fmt(r.h_inv), _fmt(r.linf_error), _fmt(r.l2_error),
            _fmt(r.h1_error), _fmt(r.h2_error), _fmt(r.estimator),
            _fmt(r.boundary_linf), _fmt(r.objective), r.status]))
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text


def read_study_csv(path):
    with open(path) as fh:
        lines = fh.read().strip("\n").split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError(f"unrecognized study header in {path}")
    rows = []
    for line in lines[1:]:
        c = line.split(",")
        num = [None if s == "" else float(s) for s in c[1:9]]
        rows.append(StudyRow(int(c[0]), num[0], num[1], num[2], num[3],
                             num[4], num[5], num[6], num[7], c[9]))
    return rows


# ---------------------------------------------------------------------------
# experiment presets


def default_alpha(experiment, family, degree):
    """Penalty weights used in the benchmark tables.  The dG runs on the
    corner singularity scale the weight with the polynomial degree."""
    if experiment == 1:
        return 1.0e3
    if experiment == 2 and family == "dg":
        return 10.0 ** (degree - 2)
    return 10.0


def _print_summary(rows, header, out):
    parts = [header, f"levels={len(rows)}", f"ndof={rows[-1].ndof}"]
    for col in ("estimator", "linf_error", "l2_error"):
        try:
            parts.append(f"{col}_rate={fit_rate(rows, col):.3f}")
        except InsufficientData:
            pass
    parts.append(f"out={out}")
    print("  ".join(parts))


def _coo_text(M):
    M = M.tocoo()
    order = np.lexsort((M.col, M.row))
    lines = [f"{M.shape[0]} {M.shape[1]} {M.nnz}"]
    for i, j, v in zip(M.row[order], M.col[order], M.data[order]):
        lines.append("%d %d %.17g" % (i, j, v))
    return "\n".join(lines) + "\n"


def _dump_matrices(space, problem, config, prefix):
    res = assembly.assemble_residual(space, problem, config.quad_degree)
    con = assembly.assemble_constraints(space, problem)
    with open(prefix + "_G.txt", "w") as fh:
        fh.write(_coo_text(res.G))
    with open(prefix + "_C.txt", "w") as fh:
        fh.write(_coo_text(con.C))
    if space.family == "dg":
        stab = assembly.assemble_stabilization(space)
        with open(prefix + "_S.txt", "w") as fh:
            fh.write(_coo_text(stab.S))


def run(config):
    """Execute one benchmark study and write its CSV.  Returns (rows, path)."""
    problem = problem_registry(config.experiment)
    family = config.method.split("-")[0]
    alpha = config.alpha
    if alpha is None:
        alpha = default_alpha(config.experiment, family, config.degree)
    if family == "dg" and config.degree < 2:
        print("warning: dg degree < 2 leaves the second derivatives of the "
              "residual uncontrolled; the bound theory needs degree >= 2",
              file=sys.stderr)
    triples = afem_loop(
        problem, config.method, mode=config.mode, degree=config.degree,
        alpha=alpha, sigma=config.sigma, beta=config.beta, theta=config.theta,
        max_ndof=config.max_ndof, h0=config.h0, quad_degree=config.quad_degree)
    rows = [row for _, _, row in triples]
    out = config.out or f"exp{config.experiment}_{config.method}_{config.mode}.csv"
    write_study_csv(rows, out)
    if config.dump_mesh:
        with open(config.dump_mesh, "w") as fh:
            fh.write(export_mesh(triples[-1][0].space.mesh))
    if config.dump_matrices:
        _dump_matrices(triples[-1][0].space, problem, config, config.dump_matrices)
    header = (f"exp{config.experiment} {config.method} {config.mode} "
              f"alpha={alpha:g}")
    if family == "dg":
        # the order label k of the underlying estimates is p - 2
        header += f" p={config.degree} k={config.degree - 2}"
    _print_summary(rows, header, out)
    return rows, out


# ---------------------------------------------------------------------------
# strong boundary condition demo


def _strong_boundary_dofs(mesh):
    """Value dof and tangential derivative dof of every boundary vertex.
    The mixed dof stays free (only u and its edge direction derivative are
    pinned by a zero trace)."""
    fixed = set()
    for side in mesh.sides:
        if not side.boundary:
            continue
        tang = 2 if side.normal[0] != 0.0 else 1
        for v in (side.v0, side.v1):
            fixed.add(4 * v)
            fixed.add(4 * v + tang)
    return np.array(sorted(fixed), dtype=np.int64)


def strong_bc_demo(max_ndof=4000, alpha=10.0, out=None, h0=1.0):
    """Two treatments of the zero boundary condition on the same problem,
    a Poisson equation on the L-shape whose solution leaves every discrete
    trace space.

    Strong imposition restricts minimization of the residual to the zero
    trace subspace; the inequality constrained program keeps the boundary
    misfit in the objective via the slack.  Rows are (ndof, phi_strong,
    phi_qp) and the strong bound is expected to stagnate while the
    constrained one keeps dropping.
    """
    problem = make_lshape_poisson()
    mesh = build_initial_mesh(problem.domain, "rect", h0)
    rows = []
    while True:
        space = build_space(mesh, "bfs")
        if space.ndof > max_ndof:
            break
        if space.ndof != space.nfull:
            raise RuntimeError("strong demo expects an unconstrained space")
        res = assembly.assemble_residual(space, problem)
        fixed = _strong_boundary_dofs(mesh)
        keep = np.setdiff1d(np.arange(space.ndof), fixed)
        K = res.G[keep][:, keep].tocsc()
        v = optimize.solve_spd(K, res.r[keep])
        coeffs = np.zeros(space.ndof)
        coeffs[keep] = v
        obj = float(coeffs @ (res.G @ coeffs) - 2.0 * res.r @ coeffs + res.c0)
        strong = DiscreteSolution(space, coeffs, t=0.0, objective=obj,
                                  alpha=alpha)
        phi_strong = gub(strong, problem).gub
        qp_sol = _solve_qp_step(space, problem, alpha, 1.0, None,
                                1e-10, 1e-10, 10_000)
        phi_qp = gub(qp_sol, problem).gub
        rows.append((space.ndof, phi_strong, phi_qp))
        print(f"ndof={space.ndof:6d}  phi_strong={phi_strong:.6e}  "
              f"phi_qp={phi_qp:.6e}  qp={qp_sol.status}")
        mesh = refine_uniform(mesh)
    path = out or "strong_bc_demo.csv"
    lines = ["ndof,phi_strong,phi_qp"]
    for ndof, ps, pq in rows:
        lines.append("%d,%s,%s" % (ndof, _fmt(ps), _fmt(pq)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"out={path}")
    return rows


# ---------------------------------------------------------------------------
# command line


_CONFIG_TYPES = {
    "experiment": int, "method": str, "mode": str, "degree": int,
    "alpha": float, "sigma": float, "beta": float, "theta": float,
    "max_ndof": int, "quad_degree": int, "h0": float, "out": str,
    "dump_mesh": str, "dump_matrices": str,
}


def _load_config_file(path):
    """key = value lines, # comments; keys match the long flags."""
    vals = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line {raw.strip()!r}")
            key, sval = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _CONFIG_TYPES:
                raise ValueError(f"unknown config key {key!r}")
            vals[key] = _CONFIG_TYPES[key](sval)
    return vals


def build_parser():
    p = argparse.ArgumentParser(
        prog="abpfem",
        description="residual minimization benchmark studies with guaranteed "
                    "max norm error bounds")
    p.add_argument("--experiment", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--method", choices=("bfs-qp", "dg-qp", "bfs-ls", "dg-ls"))
    p.add_argument("--degree", type=int, help="dg polynomial degree")
    p.add_argument("--mode", choices=("uniform", "adaptive"))
    p.add_argument("--alpha", type=float, help="boundary penalty weight")
    p.add_argument("--sigma", type=float, help="jump stabilization weight")
    p.add_argument("--beta", type=float, help="boundary indicator exponent")
    p.add_argument("--theta", type=float, help="bulk marking fraction")
    p.add_argument("--max-ndof", type=int, dest="max_ndof")
    p.add_argument("--quad-degree", type=int, dest="quad_degree")
    p.add_argument("--h0", type=float, help="initial mesh size")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--dump-mesh", dest="dump_mesh", metavar="PATH")
    p.add_argument("--dump-matrices", dest="dump_matrices", metavar="PREFIX")
    p.add_argument("--strong-bc-demo", action="store_true",
                   dest="strong_bc_demo")
    p.add_argument("--config", dest="config_file", metavar="FILE",
                   help="key = value defaults; explicit flags win")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    file_vals = _load_config_file(args.config_file) if args.config_file else {}

    def pick(name, fallback):
        cli_val = getattr(args, name)
        if cli_val is not None:
            return cli_val
        return file_vals.get(name, fallback)

    if args.strong_bc_demo:
        strong_bc_demo(max_ndof=pick("max_ndof", 4000),
                       alpha=pick("alpha", 10.0), out=pick("out", None),
                       h0=pick("h0", 1.0))
        return 0
    experiment = pick("experiment", None)
    if experiment is None:
        parser.error("--experiment is required (or --strong-bc-demo)")
    config = RunConfig(
        experiment=int(experiment),
        method=pick("method", "bfs-qp"),
        mode=pick("mode", "uniform"),
        degree=int(pick("degree", 2)),
        alpha=pick("alpha", None),
        sigma=float(pick("sigma", 1.0)),
        beta=float(pick("beta", 1.0)),
        theta=float(pick("theta", 0.5)),
        max_ndof=int(pick("max_ndof", 20_000)),
        quad_degree=pick("quad_degree", None),
        h0=float(pick("h0", 0.5)),
        out=pick("out", None),
        dump_mesh=pick("dump_mesh", None),
        dump_matrices=pick("dump_matrices", None),
    )
    rows, _ = run(config)
    if any(r.status == "PrimalInfeasible" for r in rows):
        print("solver reported an infeasible program", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
