"""Coordinate-chart arithmetic for fields and forms on the solid torus.

Everything lives on the covering chart D^2 x T with coordinates (x, y, phi),
phi 2pi-periodic.  Evaluation callables are vectorized: they accept an array
of points of shape (n, 3) (a single point of shape (3,) is promoted) and
return arrays with matching leading dimension.

Storage conventions, fixed once for the whole package:

* vector fields are contravariant triples (v^x, v^y, v^phi),
* one-forms are covariant triples (a_x, a_y, a_phi),
* two-forms are stored as the triple (b_xy, b_xphi, b_yphi) of coefficients
  of ``b_xy dx^dy + b_xphi dx^dphi + b_yphi dy^dphi``,
* volume forms are densities rho in ``rho dx^dy^dphi`` with rho > 0.

With this orientation the flux form of B is
``i_B Omega = rho*B^phi dx^dy - rho*B^y dx^dphi + rho*B^x dy^dphi``,
so a field with positive toroidal component has a positive disk flux.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import EmptySampleSet, MissingMetric

TWO_PI = 2.0 * np.pi

# Default step for fourth-order finite differences on smooth fields.
FD_STEP = 1e-4


def as_points(pts):
    """Promote a point or array of points to shape (n, 3)."""
    a = np.asarray(pts, dtype=float)
    if a.ndim == 1:
        return a.reshape(1, 3)
    return a


@dataclass(frozen=True)
class Point:
    """A chart point (x, y, phi); phi is reduced mod 2pi."""

    x: float
    y: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "phi", float(self.phi) % TWO_PI)

    def array(self):
        return np.array([self.x, self.y, self.phi])


def fd_jacobian(f, pts, h=FD_STEP, width=3):
    """Fourth-order central-difference Jacobian of a vectorized map.

    f maps (n, 3) -> (n, m); returns (n, m, 3).  Error is O(h^4).
    """
    pts = as_points(pts)
    n = pts.shape[0]
    cols = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        fp1 = f(pts + h * e)
        fm1 = f(pts - h * e)
        fp2 = f(pts + 2 * h * e)
        fm2 = f(pts - 2 * h * e)
        cols.append((8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h))
    out = np.stack(cols, axis=-1)
    if out.ndim == 2:  # scalar f -> gradient rows
        out = out.reshape(n, 3)
    return out


def fd_gradient(f, pts, h=FD_STEP):
    """Fourth-order gradient of a scalar field, shape (n, 3)."""
    return fd_jacobian(lambda q: np.asarray(f(q), dtype=float), pts, h=h)


def fd_hessian(f, pts, h=1e-3):
    """Hessian of a scalar field by nested fourth-order differences, (n, 3, 3)."""
    grad = lambda q: fd_gradient(f, q, h=h)
    H = fd_jacobian(grad, pts, h=h)
    return 0.5 * (H + np.swapaxes(H, 1, 2))


@dataclass(frozen=True)
class VectorField:
    """Contravariant vector field on the chart.

    ``eval`` returns (n, 3); ``jacobian``, when given, returns (n, 3, 3) with
    entries d v^i / d x^j.  Without an analytic Jacobian a fourth-order
    central difference with step ``fd_step`` is used.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fd_step: float = FD_STEP

    def __call__(self, pts):
        return self.eval(as_points(pts))

    def jac(self, pts):
        pts = as_points(pts)
        if self.jacobian is not None:
            return self.jacobian(pts)
        return fd_jacobian(self.eval, pts, h=self.fd_step)

    @property
    def has_analytic_jacobian(self):
        return self.jacobian is not None


@dataclass(frozen=True)
class OneForm:
    """Covariant triple (a_x, a_y, a_phi)."""

    eval: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fd_step: float = FD_STEP

    def __call__(self, pts):
        return self.eval(as_points(pts))

    def jac(self, pts):
        pts = as_points(pts)
        if self.jacobian is not None:
            return self.jacobian(pts)
        return fd_jacobian(self.eval, pts, h=self.fd_step)

    def d(self, pts):
        """Exterior derivative as a two-form triple (b_xy, b_xphi, b_yphi)."""
        J = self.jac(pts)
        return np.stack(
            [
                J[:, 1, 0] - J[:, 0, 1],
                J[:, 2, 0] - J[:, 0, 2],
                J[:, 2, 1] - J[:, 1, 2],
            ],
            axis=-1,
        )


@dataclass(frozen=True)
class TwoForm:
    """Two-form stored as (b_xy, b_xphi, b_yphi)."""

    eval: Callable[[np.ndarray], np.ndarray]
    fd_step: float = FD_STEP

    def __call__(self, pts):
        return self.eval(as_points(pts))

    def d(self, pts):
        """Coefficient of dx^dy^dphi in the exterior derivative.

        d(beta) = (d_x b_yphi - d_y b_xphi + d_phi b_xy) dx^dy^dphi.
        """
        J = fd_jacobian(self.eval, as_points(pts), h=self.fd_step)
        return J[:, 2, 0] - J[:, 1, 1] + J[:, 0, 2]


@dataclass(frozen=True)
class VolumeForm:
    """Volume form rho dx^dy^dphi with rho >= rho_floor > 0."""

    rho: Callable[[np.ndarray], np.ndarray]
    grad_rho: Optional[Callable[[np.ndarray], np.ndarray]] = None
    rho_floor: float = 1e-8

    def __call__(self, pts):
        return np.asarray(self.rho(as_points(pts)), dtype=float)

    def grad(self, pts):
        pts = as_points(pts)
        if self.grad_rho is not None:
            return self.grad_rho(pts)
        return fd_gradient(self.rho, pts)


def unit_volume():
    return VolumeForm(
        rho=lambda pts: np.ones(pts.shape[0]),
        grad_rho=lambda pts: np.zeros((pts.shape[0], 3)),
    )


@dataclass(frozen=True)
class Metric:
    """Riemannian metric as symmetric positive-definite (n, 3, 3) matrices.

    ``deriv`` optionally returns d g_ij / d x^k with shape (n, 3, 3, 3).
    """

    g: Callable[[np.ndarray], np.ndarray]
    deriv: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, pts):
        return self.g(as_points(pts))

    def dg(self, pts):
        pts = as_points(pts)
        if self.deriv is not None:
            return self.deriv(pts)
        h = FD_STEP
        parts = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            gp1, gm1 = self.g(pts + h * e), self.g(pts - h * e)
            gp2, gm2 = self.g(pts + 2 * h * e), self.g(pts - 2 * h * e)
            parts.append((8.0 * (gp1 - gm1) - (gp2 - gm2)) / (12.0 * h))
        return np.stack(parts, axis=-1)

    def flat(self, V):
        """Index-lowering map: returns a OneForm g(V, .)."""

        def ev(pts):
            return np.einsum("nij,nj->ni", self.g(as_points(pts)), V(pts))

        return OneForm(eval=ev)

    def norm2(self, V):
        """Scalar field g(V, V)."""

        def ev(pts):
            v = V(pts)
            return np.einsum("ni,nij,nj->n", v, self.g(as_points(pts)), v)

        return ev


def euclidean_metric():
    return Metric(
        g=lambda pts: np.broadcast_to(np.eye(3), (pts.shape[0], 3, 3)).copy(),
        deriv=lambda pts: np.zeros((pts.shape[0], 3, 3, 3)),
    )


@dataclass(frozen=True)
class IntegrableSystem:
    """The tuple (B, J, p, Omega) with optional potentials and metric.

    ``alpha`` is a primitive of the flux form i_B Omega, ``kappa`` a primitive
    of the current form i_J Omega.  ``dp`` / ``hess_p`` carry analytic
    derivatives of p when the construction provides them; finite differences
    are used otherwise.
    """

    B: VectorField
    J: VectorField
    p: Callable[[np.ndarray], np.ndarray]
    omega: VolumeForm
    alpha: Optional[OneForm] = None
    kappa: Optional[OneForm] = None
    metric: Optional[Metric] = None
    dp: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess_p: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "system"
    meta: dict = field(default_factory=dict)

    def pressure(self, pts):
        return np.asarray(self.p(as_points(pts)), dtype=float)

    def grad_p(self, pts):
        pts = as_points(pts)
        if self.dp is not None:
            return self.dp(pts)
        return fd_gradient(self.p, pts)

    def hessian_p(self, pts):
        pts = as_points(pts)
        if self.hess_p is not None:
            return self.hess_p(pts)
        if self.dp is not None:
            H = fd_jacobian(self.dp, pts, h=1e-3)
            return 0.5 * (H + np.swapaxes(H, 1, 2))
        return fd_hessian(self.p, pts)

    @property
    def beta(self):
        return flux_form(self.B, self.omega)

    @property
    def j_form(self):
        return flux_form(self.J, self.omega)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class ResidualReport:
    """Worst-case residuals of the integrability conditions over a sample set."""

    max_div_B: float
    max_div_J: float
    max_bracket: float
    max_hamiltonian_pair: float
    max_mhs: Optional[float]
    sample_count: int

    def worst(self):
        vals = [self.max_div_B, self.max_div_J, self.max_bracket,
                self.max_hamiltonian_pair]
        if self.max_mhs is not None:
            vals.append(self.max_mhs)
        return max(vals)

    def as_dict(self):
        return {
            "max_div_B": self.max_div_B,
            "max_div_J": self.max_div_J,
            "max_bracket": self.max_bracket,
            "max_hamiltonian_pair": self.max_hamiltonian_pair,
            "max_mhs": self.max_mhs,
            "sample_count": self.sample_count,
        }


# ---------------------------------------------------------------------------
# pointwise algebra
# ---------------------------------------------------------------------------

def flux_form(B: VectorField, omega: VolumeForm) -> TwoForm:
    """Interior product i_B Omega as a TwoForm.

    Components: (rho*B^phi, -rho*B^y, rho*B^x) in the (b_xy, b_xphi, b_yphi)
    storage.  The contraction i_B (i_B Omega) vanishes identically.
    """

    def ev(pts):
        pts = as_points(pts)
        v = B(pts)
        r = omega(pts)
        return np.stack([r * v[:, 2], -r * v[:, 1], r * v[:, 0]], axis=-1)

    return TwoForm(eval=ev)


def contract_two_form(V: VectorField, beta: TwoForm) -> OneForm:
    """Pointwise interior product i_V beta; linear in V."""

    def ev(pts):
        pts = as_points(pts)
        v = V(pts)
        b = beta(pts)
        return interior_product(v, b)

    return OneForm(eval=ev)


def interior_product(v, b):
    """i_v beta for component arrays v (n,3), b (n,3) -> one-form (n,3)."""
    return np.stack(
        [
            -b[:, 0] * v[:, 1] - b[:, 1] * v[:, 2],
            b[:, 0] * v[:, 0] - b[:, 2] * v[:, 2],
            b[:, 1] * v[:, 0] + b[:, 2] * v[:, 1],
        ],
        axis=-1,
    )


def kernel_field(b):
    """Pointwise kernel direction of a two-form triple: (b_yphi, -b_xphi, b_xy)."""
    return np.stack([b[:, 2], -b[:, 1], b[:, 0]], axis=-1)


def wedge_two_one(b, a):
    """Coefficient of dx^dy^dphi in beta ^ alpha for component arrays."""
    return b[:, 0] * a[:, 2] - b[:, 1] * a[:, 1] + b[:, 2] * a[:, 0]


def lie_bracket(V: VectorField, W: VectorField) -> VectorField:
    """Commutator [V, W] = DV W ... DW V with analytic Jacobians when present.

    With finite-difference Jacobians the truncation error is O(h^2) in the
    worst case (nested differencing); with the default fourth-order stencils
    on smooth fields it is O(h^4).
    """

    def ev(pts):
        pts = as_points(pts)
        JV = V.jac(pts)
        JW = W.jac(pts)
        return np.einsum("nij,nj->ni", JW, V(pts)) - np.einsum(
            "nij,nj->ni", JV, W(pts)
        )

    return VectorField(eval=ev)


def divergence(V: VectorField, omega: VolumeForm):
    """Scalar field (1/rho) d_i (rho V^i)."""

    def ev(pts):
        pts = as_points(pts)
        J = V.jac(pts)
        r = omega(pts)
        gr = omega.grad(pts)
        return np.trace(J, axis1=1, axis2=2) + np.einsum("ni,ni->n", V(pts), gr) / r

    return ev


def metric_cross(X, Y, metric: Metric, omega: VolumeForm) -> VectorField:
    """Cross product X x Y defined through i_{X x Y} Omega = X_flat ^ Y_flat."""

    def ev(pts):
        pts = as_points(pts)
        g = metric(pts)
        r = omega(pts)
        xf = np.einsum("nij,nj->ni", g, X(pts))
        yf = np.einsum("nij,nj->ni", g, Y(pts))
        c = np.cross(xf, yf)
        return c / r[:, None]

    return VectorField(eval=ev)


def sample_points(rng, n, r_max=0.5, r_min=0.0):
    """Uniform-in-area random sample of chart points inside radius r_max."""
    r = np.sqrt(rng.uniform(r_min ** 2, r_max ** 2, n))
    th = rng.uniform(0.0, TWO_PI, n)
    phi = rng.uniform(0.0, TWO_PI, n)
    return np.stack([r * np.cos(th), r * np.sin(th), phi], axis=-1)


def integrability_residuals(sys: IntegrableSystem, samples) -> ResidualReport:
    """Worst-case residuals of div B, div J, [B,J] and i_J i_B Omega + dp.

    The Hamiltonian-pair residual uses the metric-free contraction
    i_J(i_B Omega) + dp so it is meaningful without a metric.
    """
    pts = as_points(samples)
    if pts.shape[0] == 0:
        raise EmptySampleSet("integrability_residuals needs at least one sample")
    div_B = divergence(sys.B, sys.omega)(pts)
    div_J = divergence(sys.J, sys.omega)(pts)
    br = lie_bracket(sys.B, sys.J)(pts)
    beta = sys.beta(pts)
    ham = interior_product(sys.J(pts), beta) + sys.grad_p(pts)
    mhs = None
    if sys.metric is not None:
        mhs = float(np.max(np.abs(mhs_residual_components(sys, pts))))
    return ResidualReport(
        max_div_B=float(np.max(np.abs(div_B))),
        max_div_J=float(np.max(np.abs(div_J))),
        max_bracket=float(np.max(np.abs(br))),
        max_hamiltonian_pair=float(np.max(np.abs(ham))),
        max_mhs=mhs,
        sample_count=pts.shape[0],
    )


def mhs_residual_components(sys: IntegrableSystem, pts):
    """Componentwise i_J Omega - d(i_B g) at the sample points, (n, 3)."""
    if sys.metric is None:
        raise MissingMetric("mhs_residual requires sys.metric")
    pts = as_points(pts)
    j = flux_form(sys.J, sys.omega)(pts)
    bflat = sys.metric.flat(sys.B)
    dbflat = bflat.d(pts)
    return j - dbflat


def mhs_residual(sys: IntegrableSystem, samples) -> float:
    """Max-norm magnetohydrostatic residual |i_J Omega - d(i_B g)|."""
    pts = as_points(samples)
    if pts.shape[0] == 0:
        raise EmptySampleSet("mhs_residual needs at least one sample")
    return float(np.max(np.abs(mhs_residual_components(sys, pts))))


# ---------------------------------------------------------------------------
# primitives of closed two-forms
# ---------------------------------------------------------------------------

def homotopy_potential(beta: TwoForm, n_quad=32) -> OneForm:
    """A primitive alpha with d(alpha) = beta on the solid torus.

    Radial homotopy operator for the contraction (x, y, phi) -> (tx, ty, phi):
    alpha_z(v) = int_0^1 beta_(tx,ty,phi)(K(z), D gamma_t v) dt with Euler
    field K = (x, y, 0).  Valid because beta is closed and pulls back to zero
    on the core circle.  Gauss-Legendre quadrature in t (the integrand is
    smooth), exact to machine precision for polynomial two-forms of modest
    degree.
    """
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    t = 0.5 * (nodes + 1.0)
    w = 0.5 * weights

    def ev(pts):
        pts = as_points(pts)
        n = pts.shape[0]
        out = np.zeros((n, 3))
        K = np.zeros((n, 3))
        K[:, 0] = pts[:, 0]
        K[:, 1] = pts[:, 1]
        for tk, wk in zip(t, w):
            q = pts.copy()
            q[:, 0] *= tk
            q[:, 1] *= tk
            b = beta(q)
            # i_K beta at the scaled point, with K evaluated at z (not scaled):
            # one-form acting on v as beta(K, Dgamma v); Dgamma = diag(t, t, 1).
            row = interior_product(K, b)
            row[:, 0] *= tk
            row[:, 1] *= tk
            out += wk * row
        return out

    return OneForm(eval=ev)
