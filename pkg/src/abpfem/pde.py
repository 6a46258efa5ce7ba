"""Problem data for the nondivergence-form operator

    L u := -A : D^2 u + b . grad u + c u        in Omega,  u = g on dOmega,

together with quadrature rules and the ABP-type stability constant used in
the guaranteed error bound: for uniformly elliptic A with ess-inf det A = D
and |b| <= b_inf in two dimensions,

    ||u||_Linf(Omega) <= ||u||_Linf(dOmega) + c1 ||L u||_L2(Omega),
    c1 = diam(Omega) * sqrt((exp(diam^2 (1 + b_inf^2 / D) / (4 pi)) - 1) / D).

Coefficient fields are callables on point batches (k, 2).  Boundary data g
and exact solutions additionally take a `lip` keyword (+1 upper sheet, -1
lower sheet) resolving values on the two lips of the slit domain; it only
affects points lying exactly on the slit.

Ellipticity data (lam, Lam, det_inf, b_inf) is sampled on a 400 x 400 grid
with a one-percent conservative margin (lam and det_inf rounded down, Lam
up), which keeps the error bound a guaranteed overestimate.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .mesh import Domain

__all__ = [
    "ProblemSpec",
    "ExactSolution",
    "Quadrature",
    "PdeError",
    "UnknownExperiment",
    "DegreeUnsupported",
    "QuadratureFailure",
    "cell_quadrature",
    "edge_quadrature",
    "lobatto_points",
    "apply_operator",
    "abp_constant",
    "problem_registry",
    "make_problem",
    "make_lshape_poisson",
]


class PdeError(Exception):
    pass


class UnknownExperiment(PdeError):
    pass


class DegreeUnsupported(PdeError):
    pass


class QuadratureFailure(PdeError):
    pass


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray    # (k, 2) reference coordinates (or (k,) on edges)
    weights: np.ndarray   # (k,) summing to the reference measure
    degree: int

    def __post_init__(self):
        self.points.flags.writeable = False
        self.weights.flags.writeable = False


def _gauss01(m):
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def cell_quadrature(kind, degree):
    """Rule exact to total `degree` on the reference cell.

    rect: tensor Gauss-Legendre on [0,1]^2 (weights sum to 1).  tri: the
    collapsed tensor rule Gauss-Legendre x Gauss-Jacobi(1,0) on the
    reference triangle {x, y >= 0, x + y <= 1} (weights positive, sum 1/2).
    """
    degree = int(degree)
    if not 0 <= degree <= 60:
        raise DegreeUnsupported(f"quadrature degree {degree} out of range")
    m = max(1, (degree + 2) // 2)
    if kind == "rect":
        x, w = _gauss01(m)
        X, Y = np.meshgrid(x, x, indexing="ij")
        W = np.outer(w, w)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        return Quadrature(pts, W.ravel(), degree)
    if kind == "tri":
        x, wx = _gauss01(m)
        tj, wj = roots_jacobi(m, 1, 0)          # weight (1 - t) on [-1, 1]
        eta = 0.5 * (tj + 1.0)
        weta = 0.25 * wj                        # carries the (1 - eta) factor
        XI, ETA = np.meshgrid(x, eta, indexing="ij")
        W = np.outer(wx, weta)
        pts = np.column_stack([(XI * (1.0 - ETA)).ravel(), ETA.ravel()])
        q = Quadrature(pts, W.ravel(), degree)
        if q.weights.min() <= 0:
            raise QuadratureFailure("nonpositive triangle weight")
        return q
    raise QuadratureFailure(f"unknown cell kind {kind!r}")


@lru_cache(maxsize=None)
def edge_quadrature(degree):
    """Gauss-Legendre rule on [0,1] exact to `degree` (weights sum to 1)."""
    degree = int(degree)
    if not 0 <= degree <= 120:
        raise DegreeUnsupported(f"edge quadrature degree {degree} out of range")
    m = max(1, (degree + 2) // 2)
    x, w = _gauss01(m)
    return Quadrature(x, w, degree)


@lru_cache(maxsize=None)
def lobatto_points(n):
    """n Gauss-Lobatto points on [0,1] (both endpoints included)."""
    if n < 2:
        raise DegreeUnsupported("need at least two Lobatto points")
    interior = np.polynomial.legendre.Legendre.basis(n - 1).deriv().roots()
    pts = np.concatenate([[-1.0], np.real(interior), [1.0]])
    pts = 0.5 * (np.sort(pts) + 1.0)
    pts.flags.writeable = False
    return pts


# ---------------------------------------------------------------------------
# problem container


@dataclass(frozen=True)
class ExactSolution:
    u: callable        # (pts, lip=0) -> (k,)
    grad: callable     # (pts, lip=0) -> (k, 2)
    hess: callable     # (pts, lip=0) -> (k, 2, 2)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    domain: Domain
    A: callable        # (pts) -> (k, 2, 2), symmetric
    b: callable        # (pts) -> (k, 2)
    c: callable        # (pts) -> (k,), nonnegative
    f: callable        # (pts) -> (k,)
    g: callable        # (pts, lip=0) -> (k,)
    lam: float
    Lam: float
    det_inf: float
    b_inf: float
    c_inf: float
    exact: ExactSolution | None = None


def _domain_samples(domain, n):
    # inclusive node lattice of the n x n grid; corners and axis midlines
    # are nodes, so the sqrt(r)-type coefficient dips are sampled exactly
    if domain.kind == "unit_square":
        lo, hi = 0.0, 1.0
    else:
        lo, hi = -1.0, 1.0
    x = np.linspace(lo, hi, n + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    if domain.kind == "l_shape":
        pts = pts[~((pts[:, 0] > 0.0) & (pts[:, 1] < 0.0))]
    return pts


def make_problem(name, domain, A, b, c, f, g, exact=None, grid=400):
    """Assemble a ProblemSpec, sampling ellipticity data with conservative
    margins and auditing symmetry, positivity of the spectrum, and c >= 0."""
    if b is None:
        b = lambda pts: np.zeros((len(pts), 2))
    if c is None:
        c = lambda pts: np.zeros(len(pts))
    pts = _domain_samples(domain, grid)
    Av = np.asarray(A(pts), dtype=float)
    if Av.shape != (len(pts), 2, 2):
        raise PdeError("A must return (k, 2, 2) batches")
    if np.abs(Av[:, 0, 1] - Av[:, 1, 0]).max() > 1e-12:
        raise PdeError("A must be symmetric")
    mean = 0.5 * (Av[:, 0, 0] + Av[:, 1, 1])
    disc = np.sqrt(0.25 * (Av[:, 0, 0] - Av[:, 1, 1]) ** 2 + Av[:, 0, 1] ** 2)
    eig_min = mean - disc
    eig_max = mean + disc
    det = Av[:, 0, 0] * Av[:, 1, 1] - Av[:, 0, 1] ** 2
    if eig_min.min() <= 0:
        raise PdeError("A is not uniformly elliptic on the sample grid")
    cv = np.asarray(c(pts), dtype=float)
    if cv.min() < 0:
        raise PdeError("c must be nonnegative")
    bv = np.asarray(b(pts), dtype=float)
    lam = 0.99 * float(eig_min.min())
    Lam = 1.01 * float(eig_max.max())
    det_inf = 0.99 * float(det.min())
    b_inf = 1.01 * float(np.sqrt((bv ** 2).sum(axis=1)).max())
    c_inf = 1.01 * float(cv.max())
    if not lam ** 2 <= det_inf <= Lam ** 2:
        raise PdeError("det_inf outside [lam^2, Lam^2]")
    _audit(domain, A, c, lam, Lam)
    return ProblemSpec(name, domain, A, b, c, f, g,
                       lam, Lam, det_inf, b_inf, c_inf, exact)


def _audit(domain, A, c, lam, Lam, n=100):
    pts = _domain_samples(domain, n)
    Av = np.asarray(A(pts), dtype=float)
    mean = 0.5 * (Av[:, 0, 0] + Av[:, 1, 1])
    disc = np.sqrt(0.25 * (Av[:, 0, 0] - Av[:, 1, 1]) ** 2 + Av[:, 0, 1] ** 2)
    if (mean - disc).min() < lam or (mean + disc).max() > Lam:
        raise PdeError("ellipticity bounds violated on the audit grid")
    if np.asarray(c(pts), dtype=float).min() < 0:
        raise PdeError("c negative on the audit grid")


def apply_operator(problem, pts, value, grad, hess):
    """L u at the points, from pointwise data (value, grad, hess) of u."""
    pts = np.asarray(pts, dtype=float)
    Av = np.asarray(problem.A(pts), dtype=float)
    out = -np.einsum("kab,kab->k", Av, np.asarray(hess, dtype=float))
    bv = np.asarray(problem.b(pts), dtype=float)
    if np.any(bv):
        out = out + np.einsum("ka,ka->k", bv, np.asarray(grad, dtype=float))
    cv = np.asarray(problem.c(pts), dtype=float)
    if np.any(cv):
        out = out + cv * np.asarray(value, dtype=float)
    return out


def abp_constant(problem):
    """The multiplicative constant in the maximum-norm residual bound."""
    d = problem.domain.diameter
    D = problem.det_inf
    if D <= 0:
        raise PdeError("nonpositive infimum of det A")
    expo = d * d * (1.0 + problem.b_inf ** 2 / D) / (4.0 * np.pi)
    return float(d * np.sqrt(np.expm1(expo) / D))


# ---------------------------------------------------------------------------
# polar helpers (branch cut along the positive x-axis, phi in [0, 2 pi))


def _polar(pts, lip=0):
    x, y = pts[:, 0], pts[:, 1]
    r = np.hypot(x, y)
    phi = np.arctan2(y, x)
    phi = np.where(phi < 0.0, phi + 2.0 * np.pi, phi)
    if lip == -1:
        phi = np.where((y == 0.0) & (x > 0.0), 2.0 * np.pi, phi)
    return r, phi


def _im_power(alpha):
    """Callables for u = Im z^alpha and its derivatives on the cut plane."""

    def u(pts, lip=0):
        r, phi = _polar(pts, lip)
        return r ** alpha * np.sin(alpha * phi)

    def grad(pts, lip=0):
        # d/dx Im z^a = Im(a z^(a-1)), d/dy = Re(a z^(a-1))
        r, phi = _polar(pts, lip)
        s = alpha * r ** (alpha - 1.0)
        return np.stack([s * np.sin((alpha - 1.0) * phi),
                         s * np.cos((alpha - 1.0) * phi)], axis=1)

    def hess(pts, lip=0):
        r, phi = _polar(pts, lip)
        s = alpha * (alpha - 1.0) * r ** (alpha - 2.0)
        uxx = s * np.sin((alpha - 2.0) * phi)
        uxy = s * np.cos((alpha - 2.0) * phi)
        H = np.empty((len(pts), 2, 2))
        H[:, 0, 0] = uxx
        H[:, 0, 1] = uxy
        H[:, 1, 0] = uxy
        H[:, 1, 1] = -uxx
        return H

    return u, grad, hess


# ---------------------------------------------------------------------------
# benchmark problems


def _exp1():
    dom = Domain.unit_square()

    def sqrt_r(pts):
        return np.sqrt(np.hypot(pts[:, 0], pts[:, 1]))

    def A(pts):
        s = sqrt_r(pts)
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = 1.0 + s
        out[:, 0, 1] = -s
        out[:, 1, 0] = -s
        out[:, 1, 1] = 1.0 + 5.0 * s
        return out

    pi = np.pi

    def u(pts, lip=0):
        return np.sin(pi * pts[:, 0]) * np.sin(pi * pts[:, 1])

    def grad(pts, lip=0):
        sx, cx = np.sin(pi * pts[:, 0]), np.cos(pi * pts[:, 0])
        sy, cy = np.sin(pi * pts[:, 1]), np.cos(pi * pts[:, 1])
        return pi * np.stack([cx * sy, sx * cy], axis=1)

    def hess(pts, lip=0):
        sx, cx = np.sin(pi * pts[:, 0]), np.cos(pi * pts[:, 0])
        sy, cy = np.sin(pi * pts[:, 1]), np.cos(pi * pts[:, 1])
        H = np.empty((len(pts), 2, 2))
        H[:, 0, 0] = -pi * pi * sx * sy
        H[:, 0, 1] = pi * pi * cx * cy
        H[:, 1, 0] = H[:, 0, 1]
        H[:, 1, 1] = -pi * pi * sx * sy
        return H

    def f(pts):
        s = sqrt_r(pts)
        sx, cx = np.sin(pi * pts[:, 0]), np.cos(pi * pts[:, 0])
        sy, cy = np.sin(pi * pts[:, 1]), np.cos(pi * pts[:, 1])
        return pi * pi * ((2.0 + 6.0 * s) * sx * sy + 2.0 * s * cx * cy)

    def g(pts, lip=0):
        return u(pts, lip)

    return make_problem("exp1", dom, A, None, None, f, g,
                        ExactSolution(u, grad, hess))


def _offdiag_square_matrix(pts):
    """A = [[1 + 5 sqrt(r), r^2/2], [r^2/2, 1 + 5 sqrt(r)]]; the r^2
    off-diagonal cancels the corner singularity of the mixed derivative."""
    r = np.hypot(pts[:, 0], pts[:, 1])
    out = np.empty((len(pts), 2, 2))
    out[:, 0, 0] = 1.0 + 5.0 * np.sqrt(r)
    out[:, 0, 1] = 0.5 * r ** 2
    out[:, 1, 0] = out[:, 0, 1]
    out[:, 1, 1] = out[:, 0, 0]
    return out


def _exp2():
    dom = Domain.l_shape()
    u, grad, hess = _im_power(2.0 / 3.0)

    def f(pts):
        r, phi = _polar(pts)
        return (2.0 / 9.0) * r ** (2.0 / 3.0) * np.cos(4.0 * phi / 3.0)

    def g(pts, lip=0):
        return u(pts, lip)

    return make_problem("exp2", dom, _offdiag_square_matrix, None, None, f, g,
                        ExactSolution(u, grad, hess))


def _exp3():
    dom = Domain.l_shape()

    def A(pts):
        s = np.sqrt(np.hypot(pts[:, 0], pts[:, 1]))
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = 15.0 - s
        out[:, 0, 1] = 1.0
        out[:, 1, 0] = 1.0
        out[:, 1, 1] = 3.0 + s
        return out

    def f(pts):
        return np.ones(len(pts))

    def g(pts, lip=0):
        return np.zeros(len(pts))

    return make_problem("exp3", dom, A, None, None, f, g, None)


def _exp4():
    dom = Domain.slit_square()
    su, sgrad, shess = _im_power(0.5)

    def u(pts, lip=0):
        return su(pts, lip) - pts[:, 1] ** 2

    def grad(pts, lip=0):
        gv = sgrad(pts, lip)
        gv[:, 1] -= 2.0 * pts[:, 1]
        return gv

    def hess(pts, lip=0):
        H = shess(pts, lip)
        H[:, 1, 1] -= 2.0
        return H

    def upper(pts):
        # region x1 <= x2 (ties included)
        return pts[:, 0] <= pts[:, 1]

    def A(pts):
        out = _offdiag_square_matrix(pts)
        lower = ~upper(pts)
        d = np.hypot(pts[lower, 0] - 0.0, pts[lower, 1] + 1.0)
        iso = 1.0 + np.cbrt(d)
        out[lower, 0, 0] = iso
        out[lower, 0, 1] = 0.0
        out[lower, 1, 0] = 0.0
        out[lower, 1, 1] = iso
        return out

    def f(pts):
        r, phi = _polar(pts)
        up = upper(pts)
        out = np.empty(len(pts))
        out[up] = (2.0 * (1.0 + 5.0 * np.sqrt(r[up]))
                   + 0.25 * np.sqrt(r[up]) * np.cos(1.5 * phi[up]))
        lo = ~up
        d = np.hypot(pts[lo, 0] - 0.0, pts[lo, 1] + 1.0)
        out[lo] = 2.0 * (1.0 + np.cbrt(d))
        return out

    def g(pts, lip=0):
        return u(pts, lip)

    return make_problem("exp4", dom, A, None, None, f, g,
                        ExactSolution(u, grad, hess))


_BUILDERS = {1: _exp1, 2: _exp2, 3: _exp3, 4: _exp4}


@lru_cache(maxsize=None)
def problem_registry(experiment):
    """The four benchmark problems (1: smooth on the unit square, 2: corner
    singularity on the L-shape, 3: L-shape with unknown solution, 4: slit
    square with a discontinuous coefficient)."""
    try:
        builder = _BUILDERS[int(experiment)]
    except (KeyError, ValueError, TypeError):
        raise UnknownExperiment(f"experiment {experiment!r} not in 1..4")
    return builder()


@lru_cache(maxsize=None)
def make_lshape_poisson():
    """-Laplace u = 1 on the L-shape with zero boundary values (the strong
    boundary-condition stagnation example)."""
    dom = Domain.l_shape()

    def A(pts):
        out = np.zeros((len(pts), 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 1.0
        return out

    def f(pts):
        return np.ones(len(pts))

    def g(pts, lip=0):
        return np.zeros(len(pts))

    return make_problem("lshape_poisson", dom, A, None, None, f, g, None)
