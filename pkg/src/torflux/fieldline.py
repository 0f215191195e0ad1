"""Field-line tracing, Poincare return maps and magnetic-axis analysis.

The toroidal angle is the integration parameter: with B^phi bounded away from
zero the field-line equations are the nonautonomous planar system

    dx/dphi = B^x / B^phi,    dy/dphi = B^y / B^phi.

Return-map Jacobians are integrated from the variational equations alongside
the trajectory, never by differencing returns.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .diffeo import TrigSeries
from .errors import (
    DegenerateAxis,
    DomainExit,
    InconsistentClassification,
    NewtonDivergence,
    SingularJacobian,
    TorBFieldVanishes,
)
from .fields import TWO_PI, IntegrableSystem, VectorField, as_points

DEFAULT_TRACE_TOL = 1e-10
DEFAULT_NEWTON_TOL = 1e-12
BPHI_FLOOR = 1e-8
PARABOLIC_MARGIN = 1e-6


@dataclass(frozen=True)
class IntegratorStats:
    steps: int
    rejected: int  # estimated from the RHS evaluation count
    n_rhs: int
    tol: float


@dataclass(frozen=True)
class Trace:
    """A traced field line: nodes (phi, x, y) plus dense output."""

    phi: np.ndarray
    xy: np.ndarray
    stats: IntegratorStats
    sol: object = field(repr=False, default=None)

    @property
    def nodes(self):
        return np.column_stack([self.phi, self.xy])

    def at(self, phi):
        """Dense-output evaluation (n, 2) at requested phi values."""
        out = self.sol.sol(np.atleast_1d(phi))
        return out[:2].T


@dataclass(frozen=True)
class ClosedOrbit:
    """Periodic field line phi -> (x(phi), y(phi)) with section residual."""

    x0: np.ndarray
    curve: TrigSeries
    residual: float
    period: float = TWO_PI
    newton_residuals: tuple = ()

    def points(self, phi):
        phi = np.atleast_1d(phi)
        xy = self.curve.eval(phi)
        return np.column_stack([xy, phi])


@dataclass(frozen=True)
class MonodromyMatrix:
    """Linearized return map over one period of the axis."""

    m: np.ndarray
    tol: float
    m_double: Optional[np.ndarray] = None

    @property
    def trace(self):
        return float(np.trace(self.m))

    @property
    def det(self):
        return float(np.linalg.det(self.m))

    def eigenvalues(self):
        return np.linalg.eigvals(self.m)


class AxisKind(str, enum.Enum):
    ELLIPTIC = "elliptic"
    DIRECT_HYPERBOLIC = "direct_hyperbolic"
    REFLECTION_HYPERBOLIC = "reflection_hyperbolic"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class AxisReport:
    orbit: ClosedOrbit
    monodromy: MonodromyMatrix
    kind: AxisKind
    iota0: Optional[float]
    hessian_c: float
    hessian_signature: tuple
    hessian_mean: np.ndarray
    double_cover: bool = False


def _rhs_factory(B: VectorField):
    def rhs(phi, state):
        pts = np.array([[state[0], state[1], phi]])
        v = B(pts)[0]
        return [v[0] / v[2], v[1] / v[2]]

    return rhs


def _rhs_var_factory(B: VectorField):
    """RHS with the 2x2 variational matrix appended column-major."""

    def rhs(phi, state):
        pts = np.array([[state[0], state[1], phi]])
        v = B(pts)[0]
        DV = B.jac(pts)[0]
        bphi = v[2]
        f = v[:2] / bphi
        A = (DV[:2, :2] - np.outer(f, DV[2, :2])) / bphi
        M = state[2:].reshape(2, 2)
        return np.concatenate([f, (A @ M).ravel()])

    return rhs


def _events(r_max, bphi_floor, B):
    def domain(phi, state):
        return r_max ** 2 - (state[0] ** 2 + state[1] ** 2)

    domain.terminal = True

    def bphi(phi, state):
        v = B(np.array([[state[0], state[1], phi]]))[0]
        return abs(v[2]) - bphi_floor

    bphi.terminal = True
    return [domain, bphi]


def _stats(sol, tol, dense):
    steps = max(len(sol.t) - 1, 0)
    per_step = 15 if dense else 12
    rejected = max(0, int(round((sol.nfev - 1 - per_step * steps) / 12.0)))
    return IntegratorStats(steps=steps, rejected=rejected, n_rhs=sol.nfev, tol=tol)


def trace(B: VectorField, start, phi_span, tol=DEFAULT_TRACE_TOL,
          r_max=1.0, phi0=0.0, bphi_floor=BPHI_FLOOR) -> Trace:
    """Adaptive high-order trace of a field line over a toroidal span.

    ``start`` may be a Point, an (x, y) pair or an (x, y, phi0) triple.
    Raises TorBFieldVanishes when |B^phi| falls below ``bphi_floor`` and
    DomainExit when the trajectory reaches the chart boundary r_max.
    """
    s = np.asarray(start if not hasattr(start, "array") else start.array(),
                   dtype=float).ravel()
    if s.size == 3:
        phi0 = float(s[2])
    xy0 = s[:2]
    v0 = B(np.array([[xy0[0], xy0[1], phi0]]))[0]
    if abs(v0[2]) < bphi_floor:
        raise TorBFieldVanishes("B^phi below floor at start", bphi=float(v0[2]))
    sol = solve_ivp(
        _rhs_factory(B), (phi0, phi0 + phi_span), xy0, method="DOP853",
        rtol=tol, atol=tol, dense_output=True,
        events=_events(r_max, bphi_floor, B),
    )
    if sol.status == 1:
        if len(sol.t_events[0]):
            raise DomainExit("trajectory left the chart",
                             phi=float(sol.t_events[0][0]), r_max=r_max)
        raise TorBFieldVanishes("B^phi below floor along trace",
                                phi=float(sol.t_events[1][0]))
    return Trace(phi=sol.t, xy=sol.y[:2].T, stats=_stats(sol, tol, True), sol=sol)


def poincare_map(B: VectorField, start, with_jacobian=False,
                 tol=DEFAULT_TRACE_TOL, r_max=1.0, phi0=0.0, span=TWO_PI):
    """Return point of the phi-section map, optionally with its Jacobian.

    The Jacobian is integrated from the variational equations alongside the
    trajectory.
    """
    xy0 = np.asarray(start, dtype=float).ravel()[:2]
    if with_jacobian:
        state0 = np.concatenate([xy0, np.eye(2).ravel()])
        sol = solve_ivp(_rhs_var_factory(B), (phi0, phi0 + span), state0,
                        method="DOP853", rtol=tol, atol=tol,
                        events=_events(r_max, BPHI_FLOOR, B))
        if sol.status == 1:
            raise DomainExit("poincare trajectory left the domain")
        out = sol.y[:, -1]
        return out[:2], out[2:].reshape(2, 2)
    sol = solve_ivp(_rhs_factory(B), (phi0, phi0 + span), xy0, method="DOP853",
                    rtol=tol, atol=tol, events=_events(r_max, BPHI_FLOOR, B))
    if sol.status == 1:
        raise DomainExit("poincare trajectory left the domain")
    return sol.y[:, -1], None


def find_axis(B: VectorField, guess, tol=DEFAULT_NEWTON_TOL, max_iter=50,
              trace_tol=None, r_max=1.0, n_curve=256) -> ClosedOrbit:
    """Newton search for the closed field line from a section guess.

    Newton iterates on P(z) - z with the variational Jacobian DP.  The
    converged fixed point is expanded to the periodic curve by tracing with
    dense output and fitting a trigonometric series.
    """
    if trace_tol is None:
        trace_tol = min(1e-12, tol)
    z = np.asarray(guess, dtype=float).ravel()[:2].copy()
    history = []
    converged = False
    for _ in range(max_iter):
        Pz, DP = poincare_map(B, z, with_jacobian=True, tol=trace_tol,
                              r_max=r_max)
        g = Pz - z
        res = float(np.linalg.norm(g))
        history.append(res)
        if res < tol:
            converged = True
            break
        A = DP - np.eye(2)
        det = np.linalg.det(A)
        if abs(det) < 1e-12:
            raise SingularJacobian(
                "return map has unit eigenvalue at iterate (parabolic axis)",
                det=float(det))
        z = z - np.linalg.solve(A, g)
        if not np.isfinite(z).all() or z @ z > r_max ** 2:
            raise NewtonDivergence("Newton iterate left the domain")
    if not converged:
        raise NewtonDivergence("Newton did not converge", residual=history[-1],
                               iterations=max_iter)
    tr = trace(B, z, TWO_PI, tol=trace_tol, r_max=r_max)
    phi_grid = np.linspace(0.0, TWO_PI, n_curve, endpoint=False)
    curve = TrigSeries(tr.at(phi_grid))
    return ClosedOrbit(x0=z, curve=curve, residual=history[-1],
                       newton_residuals=tuple(history))


def monodromy(B: VectorField, orbit: ClosedOrbit, tol=1e-12,
              double_cover=False) -> MonodromyMatrix:
    """Variational return-map Jacobian at the axis fixed point.

    With ``double_cover`` the variational system is integrated over 4pi (the
    natural period on the orientation double cover) and the 2pi half-map is
    reported as ``m``.
    """
    state0 = np.concatenate([orbit.x0, np.eye(2).ravel()])
    span = 2 * TWO_PI if double_cover else TWO_PI
    sol = solve_ivp(_rhs_var_factory(B), (0.0, span), state0, method="DOP853",
                    rtol=tol, atol=tol, dense_output=double_cover)
    if double_cover:
        m_half = sol.sol(TWO_PI)[2:].reshape(2, 2)
        m_full = sol.y[2:, -1].reshape(2, 2)
        return MonodromyMatrix(m=m_half, tol=tol, m_double=m_full)
    m = sol.y[2:, -1].reshape(2, 2)
    return MonodromyMatrix(m=m, tol=tol)


def _transverse_hessians(sys: IntegrableSystem, orbit: ClosedOrbit, n_phi=64):
    phi = np.linspace(0.0, TWO_PI, n_phi, endpoint=False)
    pts = orbit.points(phi)
    H = sys.hessian_p(pts)
    return H[:, :2, :2]


def classify_axis(sys: IntegrableSystem, orbit: ClosedOrbit,
                  margin=PARABOLIC_MARGIN, allow_degenerate=False,
                  mono_tol=1e-12) -> AxisReport:
    """Classify a magnetic axis by its monodromy, cross-checked by the
    transverse pressure Hessian.

    The monodromy trace decides: |tr| < 2 elliptic, tr > 2 direct hyperbolic,
    tr < -2 reflection hyperbolic (negative real Floquet multipliers exactly
    correspond to non-orientable invariant bundles).  The averaged signature
    of the normal Hessian of p must agree: sign-definite for elliptic,
    indefinite for hyperbolic; disagreement raises rather than resolving
    silently.
    """
    mono = monodromy(sys.B, orbit, tol=mono_tol)
    tr = mono.trace
    if abs(abs(tr) - 2.0) <= margin:
        kind = AxisKind.DEGENERATE
        if not allow_degenerate:
            raise DegenerateAxis("monodromy trace within parabolic margin",
                                 trace=tr, margin=margin)
    elif abs(tr) < 2.0:
        kind = AxisKind.ELLIPTIC
    elif tr > 2.0:
        kind = AxisKind.DIRECT_HYPERBOLIC
    else:
        kind = AxisKind.REFLECTION_HYPERBOLIC

    H = _transverse_hessians(sys, orbit)
    Hmean = H.mean(axis=0)
    dets = np.linalg.det(H)
    eigs = np.linalg.eigvalsh(H)
    c_vals = np.sqrt(np.abs(dets))
    if kind is AxisKind.ELLIPTIC:
        c = float(np.mean(np.sign(eigs[:, 0]) * c_vals))
        signature = (int(np.sign(Hmean.trace())),) * 2
    else:
        c = float(np.mean(c_vals))
        signature = (1, -1)

    if kind is not AxisKind.DEGENERATE:
        hess_definite = bool(np.all(dets > 0))
        hess_indefinite = bool(np.all(dets < 0))
        if kind is AxisKind.ELLIPTIC and not hess_definite:
            raise InconsistentClassification(
                "elliptic monodromy but indefinite normal Hessian",
                trace=tr, min_det=float(dets.min()))
        if kind is not AxisKind.ELLIPTIC and not hess_indefinite:
            raise InconsistentClassification(
                "hyperbolic monodromy but sign-definite normal Hessian",
                trace=tr, max_det=float(dets.max()))

    iota0 = None
    if kind is AxisKind.ELLIPTIC:
        ct = tr / 2.0
        st = np.sqrt(max(0.0, 1.0 - ct * ct))
        direction = 1.0 if mono.m[1, 0] >= 0 else -1.0
        iota0 = float(np.arctan2(direction * st, ct) / TWO_PI % 1.0)

    if kind is AxisKind.REFLECTION_HYPERBOLIC:
        mono = monodromy(sys.B, orbit, tol=mono_tol, double_cover=True)

    return AxisReport(orbit=orbit, monodromy=mono, kind=kind, iota0=iota0,
                      hessian_c=c, hessian_signature=signature,
                      hessian_mean=Hmean,
                      double_cover=kind is AxisKind.REFLECTION_HYPERBOLIC)


def iota_fieldline(B: VectorField, seed, n_transits=64, axis=None,
                   tol=DEFAULT_TRACE_TOL, r_max=1.0, samples_per_transit=16):
    """Rotational transform from the average poloidal advance of a field line.

    Unwraps the poloidal angle about the axis along ``n_transits`` toroidal
    transits and fits a line; the slope converges to iota at O(1/n) on
    irrational surfaces.
    """
    if n_transits < 32:
        raise ValueError("n_transits must be >= 32 for the drift estimator")
    if axis is None:
        axis = find_axis(B, np.asarray(seed, dtype=float) * 0.5, r_max=r_max)
    tr = trace(B, seed, n_transits * TWO_PI, tol=tol, r_max=r_max)
    phi = np.linspace(0.0, n_transits * TWO_PI, n_transits * samples_per_transit,
                      endpoint=False)
    xy = tr.at(phi)
    ax = axis.curve.eval(np.mod(phi, TWO_PI))
    rel = xy - ax
    theta = np.unwrap(np.arctan2(rel[:, 1], rel[:, 0]))
    slope = np.polyfit(phi, theta, 1)[0]
    return float(slope)


def weighted_birkhoff_rotation(theta_sections):
    """Super-convergent rotation number from unwrapped section angles.

    Weighted Birkhoff average of the angle increments with the bump weight
    exp(-1/(t(1-t))); converges faster than any polynomial rate for smooth
    circle maps with Diophantine rotation number.
    """
    d = np.diff(np.asarray(theta_sections, dtype=float)) / TWO_PI
    n = d.size
    t = (np.arange(1, n + 1)) / (n + 1.0)
    w = np.exp(-1.0 / (t * (1.0 - t)))
    return float(np.sum(w * d) / np.sum(w))
