"""Diffeomorphisms of the solid torus and pushforward of integrable systems.

A :class:`Diffeo` bundles the forward map, its inverse, the forward Jacobian
and (optionally) the forward Hessian tensor.  All maps preserve
phi-periodicity.  Composition and inversion propagate Jacobians and Hessians
by the chain rule, so systems disguised by stacked primitives keep analytic
derivatives end to end.

The primitives used for reproducible "disguises" are phi-dependent affine
maps of the cross-section (translation wobble, shear, rotation-by-phi) and a
radial stretch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonInvertibleJacobian
from .fields import (
    IntegrableSystem,
    Metric,
    OneForm,
    VectorField,
    VolumeForm,
    as_points,
    fd_gradient,
    fd_jacobian,
)


class TrigSeries:
    """Real trigonometric series for smooth 2pi-periodic data.

    Built from samples on a uniform phi grid by FFT; evaluates the series and
    its phi-derivatives at arbitrary angles.  ``values`` may be tensor-valued:
    samples of shape (n_grid, *shape) produce evaluations (n, *shape).
    Harmonics below ``trim`` (relative to the largest coefficient) are
    dropped, which keeps smooth low-harmonic data cheap to evaluate.
    """

    def __init__(self, samples, trim=1e-14):
        samples = np.asarray(samples, dtype=float)
        self.n = samples.shape[0]
        self.shape = samples.shape[1:]
        coef = np.fft.rfft(samples, axis=0) / self.n
        k_all = np.arange(coef.shape[0])
        weights = np.full(coef.shape[0], 2.0)
        weights[0] = 1.0
        if self.n % 2 == 0:
            weights[-1] = 1.0
        amp = np.abs(coef.reshape(coef.shape[0], -1)).max(axis=1)
        scale = amp.max() if amp.size else 0.0
        keep = amp > trim * max(scale, 1e-300)
        keep[0] = True
        self.k = k_all[keep]
        self.coef = coef[keep]
        self.weights = weights[keep]

    def eval(self, phi, order=0):
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        factor = (1j * self.k) ** order
        # f(phi) = c0 + 2 Re sum_{k>=1} c_k e^{i k phi}   (+ Nyquist handling)
        phase = np.exp(1j * np.outer(phi, self.k))  # (n, K)
        c = (self.coef.T * (factor * self.weights)).T  # (K, *shape)
        flat = c.reshape(c.shape[0], -1)
        out = np.real(phase @ flat)
        return out.reshape((phi.shape[0],) + self.shape)


@dataclass(frozen=True)
class Diffeo:
    """A diffeomorphism of the chart with inverse and derivatives.

    ``jacobian`` is d forward^i / d z^j, shape (n, 3, 3).  ``hessian`` is
    d^2 forward^i / d z^j d z^k, shape (n, 3, 3, 3), symmetric in (j, k);
    when absent, consumers fall back to finite differences.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "diffeo"

    def __call__(self, pts):
        return self.forward(as_points(pts))

    def jac(self, pts):
        return self.jacobian(as_points(pts))

    def hess(self, pts):
        pts = as_points(pts)
        if self.hessian is not None:
            return self.hessian(pts)
        return fd_jacobian(lambda q: self.jacobian(q).reshape(q.shape[0], 9),
                           pts, h=1e-4).reshape(pts.shape[0], 3, 3, 3)

    def inv_jac(self, pts):
        """Jacobian of the inverse map, evaluated at (new-chart) points."""
        w = self.inverse(as_points(pts))
        return np.linalg.inv(self.jacobian(w))

    def inverted(self):
        """The inverse diffeomorphism with derived Jacobian/Hessian."""
        fwd, inv, jac = self.forward, self.inverse, self.jacobian
        hess = self.hessian

        def jac_inv(pts):
            w = inv(as_points(pts))
            return np.linalg.inv(jac(w))

        hess_inv = None
        if hess is not None:
            def hess_inv(pts):  # noqa: F811
                pts = as_points(pts)
                w = inv(pts)
                Ji = np.linalg.inv(jac(w))
                H = hess(w)
                # D2(inv)^a_bc = -Ji^a_i H^i_jk Ji^j_b Ji^k_c
                return -np.einsum("nai,nijk,njb,nkc->nabc", Ji, H, Ji, Ji)

        return Diffeo(forward=inv, inverse=fwd, jacobian=jac_inv,
                      hessian=hess_inv, name=self.name + "^-1")


def identity_diffeo():
    return Diffeo(
        forward=lambda pts: as_points(pts).copy(),
        inverse=lambda pts: as_points(pts).copy(),
        jacobian=lambda pts: np.broadcast_to(
            np.eye(3), (as_points(pts).shape[0], 3, 3)).copy(),
        hessian=lambda pts: np.zeros((as_points(pts).shape[0], 3, 3, 3)),
        name="identity",
    )


def compose(outer: Diffeo, inner: Diffeo) -> Diffeo:
    """The composition z -> outer(inner(z))."""

    def fwd(pts):
        return outer.forward(inner.forward(as_points(pts)))

    def inv(pts):
        return inner.inverse(outer.inverse(as_points(pts)))

    def jac(pts):
        pts = as_points(pts)
        mid = inner.forward(pts)
        return np.einsum("nij,njk->nik", outer.jacobian(mid), inner.jacobian(pts))

    hess = None
    if outer.hessian is not None or inner.hessian is not None:
        def hess(pts):  # noqa: F811
            pts = as_points(pts)
            mid = inner.forward(pts)
            J1 = inner.jacobian(pts)
            H2 = outer.hess(mid)
            H1 = inner.hess(pts)
            J2 = outer.jacobian(mid)
            term1 = np.einsum("naij,nib,njc->nabc", H2, J1, J1)
            term2 = np.einsum("nai,nibc->nabc", J2, H1)
            return term1 + term2

    return Diffeo(forward=fwd, inverse=inv, jacobian=jac, hessian=hess,
                  name=f"{outer.name}*{inner.name}")


def compose_all(*maps: Diffeo) -> Diffeo:
    """Compose maps left to right in application order: last acts first."""
    out = maps[0]
    for m in maps[1:]:
        out = compose(out, m)
    return out


# ---------------------------------------------------------------------------
# phi-dependent affine primitives
# ---------------------------------------------------------------------------

class _PhiAffine:
    """Cross-section affine map (x, y) -> A(phi) (x, y) + t(phi), phi fixed.

    A, t and their first two phi-derivatives are supplied as callables taking
    a phi array and returning (n, 2, 2) / (n, 2).
    """

    def __init__(self, A, dA, d2A, t, dt, d2t):
        self.A, self.dA, self.d2A = A, dA, d2A
        self.t, self.dt, self.d2t = t, dt, d2t

    def forward(self, pts):
        pts = as_points(pts)
        phi = pts[:, 2]
        xy = np.einsum("nij,nj->ni", self.A(phi), pts[:, :2]) + self.t(phi)
        return np.column_stack([xy, phi])

    def inverse(self, pts):
        pts = as_points(pts)
        phi = pts[:, 2]
        Ainv = np.linalg.inv(self.A(phi))
        xy = np.einsum("nij,nj->ni", Ainv, pts[:, :2] - self.t(phi))
        return np.column_stack([xy, phi])

    def jacobian(self, pts):
        pts = as_points(pts)
        n = pts.shape[0]
        phi = pts[:, 2]
        J = np.zeros((n, 3, 3))
        J[:, :2, :2] = self.A(phi)
        J[:, :2, 2] = np.einsum("nij,nj->ni", self.dA(phi), pts[:, :2]) + self.dt(phi)
        J[:, 2, 2] = 1.0
        return J

    def hessian(self, pts):
        pts = as_points(pts)
        n = pts.shape[0]
        phi = pts[:, 2]
        H = np.zeros((n, 3, 3, 3))
        dA = self.dA(phi)
        H[:, :2, :2, 2] = dA
        H[:, :2, 2, :2] = dA
        H[:, :2, 2, 2] = np.einsum("nij,nj->ni", self.d2A(phi), pts[:, :2]) + self.d2t(phi)
        return H

    def as_diffeo(self, name):
        return Diffeo(forward=self.forward, inverse=self.inverse,
                      jacobian=self.jacobian, hessian=self.hessian, name=name)


def _const2(v):
    v = np.asarray(v, dtype=float)

    def f(phi):
        return np.broadcast_to(v, (np.shape(phi)[0],) + v.shape).copy()

    return f


def wobble(a):
    """Axis wobble (x + a cos phi, y + a sin phi, phi); volume preserving."""
    aff = _PhiAffine(
        A=_const2(np.eye(2)), dA=_const2(np.zeros((2, 2))), d2A=_const2(np.zeros((2, 2))),
        t=lambda phi: a * np.column_stack([np.cos(phi), np.sin(phi)]),
        dt=lambda phi: a * np.column_stack([-np.sin(phi), np.cos(phi)]),
        d2t=lambda phi: a * np.column_stack([-np.cos(phi), -np.sin(phi)]),
    )
    return aff.as_diffeo(f"wobble({a})")


def shear(s0):
    """phi-dependent shear (x, y + s0 sin(phi) x, phi); volume preserving."""

    def mk(scale_fun):
        def f(phi):
            out = np.zeros((np.shape(phi)[0], 2, 2))
            out[:, 0, 0] = 1.0 if scale_fun is None else 0.0
            out[:, 1, 1] = 1.0 if scale_fun is None else 0.0
            out[:, 1, 0] = s0 * (np.sin(phi) if scale_fun is None else scale_fun(phi))
            return out

        return f

    aff = _PhiAffine(
        A=mk(None), dA=mk(np.cos), d2A=mk(lambda phi: -np.sin(phi)),
        t=_const2(np.zeros(2)), dt=_const2(np.zeros(2)), d2t=_const2(np.zeros(2)),
    )
    return aff.as_diffeo(f"shear({s0})")


def rotate_by_phi(c):
    """Rotation of the cross-section by angle c*phi.

    2pi-periodic (hence a valid chart map) only for integer c; half-integer c
    is used internally on the 4pi cover for reflection-hyperbolic systems.
    """

    def rot(phi, order=0):
        ang = c * phi + order * np.pi / 2.0
        f = c ** order
        out = np.zeros((np.shape(phi)[0], 2, 2))
        out[:, 0, 0] = f * np.cos(ang)
        out[:, 0, 1] = -f * np.sin(ang)
        out[:, 1, 0] = f * np.sin(ang)
        out[:, 1, 1] = f * np.cos(ang)
        return out

    aff = _PhiAffine(
        A=lambda phi: rot(phi, 0), dA=lambda phi: rot(phi, 1),
        d2A=lambda phi: rot(phi, 2),
        t=_const2(np.zeros(2)), dt=_const2(np.zeros(2)), d2t=_const2(np.zeros(2)),
    )
    return aff.as_diffeo(f"rotate_by_phi({c})")


def phi_affine_from_series(A_samples, t_samples, name="phi_affine"):
    """Affine map with A(phi), t(phi) given by samples on a uniform phi grid."""
    SA = TrigSeries(A_samples)
    St = TrigSeries(t_samples)
    aff = _PhiAffine(
        A=lambda phi: SA.eval(phi, 0), dA=lambda phi: SA.eval(phi, 1),
        d2A=lambda phi: SA.eval(phi, 2),
        t=lambda phi: St.eval(phi, 0), dt=lambda phi: St.eval(phi, 1),
        d2t=lambda phi: St.eval(phi, 2),
    )
    return aff.as_diffeo(name)


def radial_stretch(c):
    """Radial map r -> r (1 + c r^2) about the chart axis; not volume preserving.

    The inverse radius solves the depressed cubic c s^3 + s - r = 0 (unique
    real root for c >= 0 and for small negative c on the chart).
    """

    def s_of_r(r):
        # Newton from s = r; the map is monotone on the working chart.
        s = r.copy()
        for _ in range(60):
            f = c * s ** 3 + s - r
            fp = 3 * c * s ** 2 + 1.0
            step = f / fp
            s -= step
            if np.all(np.abs(step) <= 1e-15 * (1.0 + np.abs(s))):
                break
        return s

    def fwd(pts):
        pts = as_points(pts)
        r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        f = 1.0 + c * r2
        return np.column_stack([pts[:, 0] * f, pts[:, 1] * f, pts[:, 2]])

    def inv(pts):
        pts = as_points(pts)
        r = np.hypot(pts[:, 0], pts[:, 1])
        s = s_of_r(r)
        scale = np.where(r > 0, s / np.where(r > 0, r, 1.0), 1.0)
        return np.column_stack([pts[:, 0] * scale, pts[:, 1] * scale, pts[:, 2]])

    def jac(pts):
        pts = as_points(pts)
        n = pts.shape[0]
        x, y = pts[:, 0], pts[:, 1]
        f = 1.0 + c * (x ** 2 + y ** 2)
        J = np.zeros((n, 3, 3))
        J[:, 0, 0] = f + 2 * c * x * x
        J[:, 0, 1] = 2 * c * x * y
        J[:, 1, 0] = 2 * c * x * y
        J[:, 1, 1] = f + 2 * c * y * y
        J[:, 2, 2] = 1.0
        return J

    def hess(pts):
        pts = as_points(pts)
        n = pts.shape[0]
        x, y = pts[:, 0], pts[:, 1]
        H = np.zeros((n, 3, 3, 3))
        H[:, 0, 0, 0] = 6 * c * x
        H[:, 0, 0, 1] = H[:, 0, 1, 0] = 2 * c * y
        H[:, 0, 1, 1] = 2 * c * x
        H[:, 1, 1, 1] = 6 * c * y
        H[:, 1, 0, 1] = H[:, 1, 1, 0] = 2 * c * x
        H[:, 1, 0, 0] = 2 * c * y
        return H

    return Diffeo(forward=fwd, inverse=inv, jacobian=jac, hessian=hess,
                  name=f"radial_stretch({c})")


# ---------------------------------------------------------------------------
# pushforward of a full system
# ---------------------------------------------------------------------------

def pushforward_vector(V: VectorField, phi_map: Diffeo) -> VectorField:
    """Vector field in the image chart: DPhi V composed with the inverse."""

    def ev(pts):
        w = phi_map.inverse(as_points(pts))
        return np.einsum("nij,nj->ni", phi_map.jacobian(w), V(w))

    jac = None
    if V.jacobian is not None and phi_map.hessian is not None:
        def jac(pts):  # noqa: F811
            pts = as_points(pts)
            w = phi_map.inverse(pts)
            J = phi_map.jacobian(w)
            H = phi_map.hessian(w)
            v = V(w)
            DV = V.jac(w)
            M = np.einsum("najk,nk->naj", H, v) + np.einsum("nai,nij->naj", J, DV)
            return np.einsum("naj,njc->nac", M, np.linalg.inv(J))

    return VectorField(eval=ev, jacobian=jac)


def pullback_one_form_by_inverse(a: OneForm, phi_map: Diffeo) -> OneForm:
    """One-form in the image chart: components DPhi^{-T} a at the preimage."""

    def ev(pts):
        pts = as_points(pts)
        w = phi_map.inverse(pts)
        Ji = np.linalg.inv(phi_map.jacobian(w))
        return np.einsum("nj,nji->ni", a(w), Ji)

    return OneForm(eval=ev)


def pushforward_system(sys: IntegrableSystem, phi_map: Diffeo,
                       check_points=None, det_floor=1e-12) -> IntegrableSystem:
    """Transport a full integrable system along a diffeomorphism.

    Fields push forward by the Jacobian, scalars and forms pull back by the
    inverse, and the volume density picks up the inverse Jacobian determinant.
    Raises NonInvertibleJacobian if |det DPhi| drops below ``det_floor`` at
    any of the optional ``check_points``.
    """
    if check_points is not None:
        d = np.linalg.det(phi_map.jac(check_points))
        if np.any(np.abs(d) < det_floor):
            raise NonInvertibleJacobian(
                "map Jacobian singular at sampled points",
                min_abs_det=float(np.min(np.abs(d))))
        if np.any(d < 0):
            raise NonInvertibleJacobian("orientation-reversing map rejected")

    B_new = pushforward_vector(sys.B, phi_map)
    J_new = pushforward_vector(sys.J, phi_map)

    def p_new(pts):
        return sys.pressure(phi_map.inverse(as_points(pts)))

    def rho_new(pts):
        w = phi_map.inverse(as_points(pts))
        return sys.omega(w) / np.linalg.det(phi_map.jacobian(w))

    omega_new = VolumeForm(rho=rho_new, rho_floor=sys.omega.rho_floor)

    dp_new = None
    if sys.dp is not None:
        def dp_new(pts):  # noqa: F811
            pts = as_points(pts)
            w = phi_map.inverse(pts)
            Ji = np.linalg.inv(phi_map.jacobian(w))
            return np.einsum("nj,nji->ni", sys.dp(w), Ji)

    hess_p_new = None
    if sys.hess_p is not None and sys.dp is not None and phi_map.hessian is not None:
        inv_map = phi_map.inverted()

        def hess_p_new(pts):  # noqa: F811
            pts = as_points(pts)
            w = inv_map.forward(pts)
            Ji = inv_map.jacobian(pts)
            Hi = inv_map.hess(pts)
            Hp = sys.hess_p(w)
            term1 = np.einsum("nij,nib,njc->nbc", Hp, Ji, Ji)
            term2 = np.einsum("ni,nibc->nbc", sys.dp(w), Hi)
            return term1 + term2

    alpha_new = None
    if sys.alpha is not None:
        alpha_new = pullback_one_form_by_inverse(sys.alpha, phi_map)
    kappa_new = None
    if sys.kappa is not None:
        kappa_new = pullback_one_form_by_inverse(sys.kappa, phi_map)

    metric_new = None
    if sys.metric is not None:
        g_old = sys.metric

        def g_new(pts):
            pts = as_points(pts)
            w = phi_map.inverse(pts)
            Ji = np.linalg.inv(phi_map.jacobian(w))
            return np.einsum("nia,nij,njb->nab", Ji, g_old(w), Ji)

        metric_new = Metric(g=g_new)

    return IntegrableSystem(
        B=B_new, J=J_new, p=p_new, omega=omega_new, alpha=alpha_new,
        kappa=kappa_new, metric=metric_new, dp=dp_new, hess_p=hess_p_new,
        name=f"{phi_map.name}[{sys.name}]",
        meta=dict(sys.meta, pushforward_of=sys.name),
    )
