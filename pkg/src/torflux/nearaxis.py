"""Near-axis normal forms: Morse-Bott chart, flux rescaling, Moser flow, and
the near-axis Hamada / Boozer constructions.

Pipeline for an elliptic axis:

1.  ``morse_bott_normalize``: move the axis to the origin, apply a smooth
    phi-periodic linear frame making the transverse quadratic part of p
    exactly (c/2)(X^2 + eps Y^2) with constant c, and scale so the
    cross-section coefficient of the flux form equals one on the axis.
2.  ``flux_coordinates``: relabel radially so that psi = (x^2+y^2)/2 is
    exactly the toroidal flux of the level sets of p; the invariant tori
    become round circles in every cross-section.
3.  ``solve_sigma`` / ``moser_normalize``: interpolate between the flux form
    and its normal form dx^dy - Psi_P'(psi) dpsi^dphi, solve the gauge
    potential sigma per torus spectrally (the solve inverts d on each torus,
    so no small divisors appear), build the generator by the
    kernel-complement linear solve and push along the time-one flow.  The
    generator is tangent to the flux tori, so psi is preserved exactly.
4.  ``near_axis_hamada``: the same homotopy for the current form with a
    generator parallel to B (which leaves p and the flux form untouched),
    driven by the action integrals K, L of the current potential and the
    interpolation weight r_lambda.
5.  ``near_axis_boozer``: the full pipeline on the |B|^2-reweighted system.

Hyperbolic axes stop after stage 1 plus invariant verification; the
direct/reflection cases are separated by continuing the Hessian eigenframe
on the 2pi or 4pi cover.

Implementation note: fields of intermediate systems are evaluated through
sparse per-torus Fourier series splined in radius (class
``RadialFourierField``).  After each flow stage the pushed-forward system is
sampled once on a master grid through a combined backward/variational
integration and re-wrapped in these series, so later stages never integrate
ODEs inside inner loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .diffeo import Diffeo, TrigSeries, compose, pushforward_system
from .errors import (
    DegenerateAxis,
    EigenframeDiscontinuity,
    FlowEscape,
    HyperbolicUnsupported,
    NonMonotoneFlux,
    NonvanishingPeriods,
    RankLoss,
    RLambdaNonpositive,
    SingularSystem,
)
from .fieldline import AxisKind, AxisReport, ClosedOrbit
from .fields import (
    TWO_PI,
    IntegrableSystem,
    OneForm,
    VectorField,
    VolumeForm,
    as_points,
    homotopy_potential,
    interior_product,
    kernel_field,
)
from .flux import Loop, circle_loop, loop_integral
from .surfaces import Fourier2D, SurfaceChart, boozer_weighted_system, verify_chart

DEFAULT_FLOW_TOL = 1e-11


def origin_orbit(n=8) -> ClosedOrbit:
    """The axis curve at the chart origin (used after normalizing maps)."""
    return ClosedOrbit(x0=np.zeros(2), curve=TrigSeries(np.zeros((n, 2))),
                       residual=0.0)


# ---------------------------------------------------------------------------
# b-hat linear solve (kernel-complement inverse of the flux form)
# ---------------------------------------------------------------------------

def _bhat_matrix(b, kern):
    """Matrix of X -> i_X beta + g(X, K) K_flat for component arrays."""
    n = b.shape[0]
    A = np.zeros((n, 3, 3))
    A[:, 0, 1] = -b[:, 0]
    A[:, 0, 2] = -b[:, 1]
    A[:, 1, 0] = b[:, 0]
    A[:, 1, 2] = -b[:, 2]
    A[:, 2, 0] = b[:, 1]
    A[:, 2, 1] = b[:, 2]
    return A + np.einsum("ni,nj->nij", kern, kern)


def bhat_solve_components(b, kern, rhs):
    """Batched solve of i_X beta = rhs with g(X, kern) = 0 (Euclidean g).

    ``b`` are two-form triples, ``kern`` the kernel field values, ``rhs``
    one-form triples with i_kern rhs = 0.  Returns X components.
    """
    M = _bhat_matrix(b, kern)
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("b-hat system singular") from exc


def bhat_solve(beta, B, alpha, point, pre_tol=1e-8):
    """Unique X with i_X beta = alpha and g(X, B) = 0 at the given points.

    Requires i_B alpha = 0 within ``pre_tol`` (the solvability criterion for
    one-forms in the image of the flux form).
    """
    pts = as_points(point)
    b = beta(pts)
    Bv = B(pts)
    a = alpha(pts) if not isinstance(alpha, np.ndarray) else alpha
    obstruction = np.einsum("ni,ni->n", a, Bv)
    if np.max(np.abs(obstruction)) > pre_tol:
        raise ValueError(
            f"i_B alpha = {np.max(np.abs(obstruction)):.3e} exceeds "
            f"precondition tolerance {pre_tol}")
    return bhat_solve_components(b, Bv, a)


# ---------------------------------------------------------------------------
# sparse per-torus Fourier representation splined in radius
# ---------------------------------------------------------------------------

class RadialFourierField:
    """Scalar chart field as a sparse Fourier series on nested round tori.

    Coefficients c_{kl}(r) of smooth chart functions obey the polar parity
    c_{kl}(-r) = (-1)^k c_{kl}(r); splines use parity-extended knots so
    evaluation is smooth through the axis.  Modes whose amplitude never
    exceeds ``trim`` times the field scale are dropped.
    """

    def __init__(self, r_grid, grids, trim=1e-13):
        g = np.asarray(grids, dtype=float)
        nr, nt, nz = g.shape
        coef = np.fft.fft2(g, axes=(1, 2)) / (nt * nz)
        kt = np.fft.fftfreq(nt, 1.0 / nt)
        kz = np.fft.fftfreq(nz, 1.0 / nz)
        amp = np.abs(coef).max(axis=0)
        scale = float(amp.max()) if amp.size else 0.0
        keep = amp > trim * max(scale, 1e-300)
        keep[0, 0] = True
        KT, KZ = np.meshgrid(kt, kz, indexing="ij")
        self.kt = KT[keep]
        self.kz = KZ[keep]
        C = coef[:, keep]  # (nr, M)
        parity = np.where(np.abs(self.kt) % 2 == 0, 1.0, -1.0)
        r = np.asarray(r_grid, dtype=float)
        r_ext = np.concatenate([-r[::-1], r])
        C_ext = np.concatenate([C[::-1] * parity[None, :], C], axis=0)
        self._spl = CubicSpline(r_ext, C_ext, axis=0, bc_type="not-a-knot")
        self._dspl = self._spl.derivative()
        self.r_max = float(r[-1])

    @property
    def n_modes(self):
        return self.kt.size

    def _phases(self, theta, phi):
        return np.exp(1j * (np.outer(theta, self.kt) + np.outer(phi, self.kz)))

    def value_polar(self, r, theta, phi):
        C = self._spl(r)
        return np.real(np.einsum("nm,nm->n", self._phases(theta, phi), C))

    def gradient_polar(self, r, theta, phi):
        """(d/dr, d/dtheta, d/dphi) at scattered polar points."""
        E = self._phases(theta, phi)
        C = self._spl(r)
        dC = self._dspl(r)
        fr = np.real(np.einsum("nm,nm->n", E, dC))
        ft = np.real(np.einsum("nm,nm->n", E, C * (1j * self.kt)[None, :]))
        fz = np.real(np.einsum("nm,nm->n", E, C * (1j * self.kz)[None, :]))
        return fr, ft, fz

    def value(self, pts):
        pts = as_points(pts)
        r = np.hypot(pts[:, 0], pts[:, 1])
        theta = np.arctan2(pts[:, 1], pts[:, 0])
        return self.value_polar(r, theta, pts[:, 2])

    def one_form_d(self, pts):
        """Cartesian components of the differential at chart points."""
        pts = as_points(pts)
        x, y, phi = pts[:, 0], pts[:, 1], pts[:, 2]
        r = np.hypot(x, y)
        theta = np.arctan2(y, x)
        fr, ft, fz = self.gradient_polar(r, theta, phi)
        r_safe = np.where(r > 1e-14, r, 1.0)
        ct, st = x / r_safe, y / r_safe
        ax = fr * ct - ft * st / r_safe
        ay = fr * st + ft * ct / r_safe
        small = r <= 1e-14
        if np.any(small):
            ax = np.where(small, 0.0, ax)
            ay = np.where(small, 0.0, ay)
        return np.stack([ax, ay, fz], axis=-1)


class EvenRadialSpline:
    """Spline of a flux function against radius, even through the axis."""

    def __init__(self, r_grid, values, value_at_zero=None):
        r = np.asarray(r_grid, dtype=float)
        v = np.asarray(values, dtype=float)
        if value_at_zero is not None:
            r = np.concatenate([[0.0], r])
            v = np.concatenate([[value_at_zero], v])
            r_ext = np.concatenate([-r[:0:-1], r])
            v_ext = np.concatenate([v[:0:-1], v])
        else:
            r_ext = np.concatenate([-r[::-1], r])
            v_ext = np.concatenate([v[::-1], v])
        self._spl = CubicSpline(r_ext, v_ext, bc_type="not-a-knot")
        self._d = self._spl.derivative()

    def of_psi(self, psi):
        return self._spl(np.sqrt(2.0 * np.maximum(psi, 0.0)))

    def d_psi(self, psi):
        """Derivative with respect to psi = r^2/2."""
        r = np.sqrt(2.0 * np.maximum(psi, 0.0))
        r_safe = np.where(r > 1e-9, r, 1e-9)
        return self._d(r_safe) / r_safe

    def of_r(self, r):
        return self._spl(r)


def _polar_grid(r_levels, n_theta, n_phi):
    theta = np.linspace(0.0, TWO_PI, n_theta, endpoint=False)
    phi = np.linspace(0.0, TWO_PI, n_phi, endpoint=False)
    R, T, P = np.meshgrid(r_levels, theta, phi, indexing="ij")
    pts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel(),
                           P.ravel()])
    return pts, (len(r_levels), n_theta, n_phi)


@dataclass(frozen=True)
class CachedSystem:
    """Sparse spectral surrogates for the fields of a chart system.

    ``B``/``J`` are (3,)-tuples of RadialFourierField, likewise the one-form
    caches.  Provides the same evaluation surface the pipeline needs, at
    spline cost, plus conversion back to an IntegrableSystem.
    """

    r_levels: np.ndarray
    B: tuple
    J: tuple
    rho: RadialFourierField
    p: RadialFourierField
    alpha: Optional[tuple]
    kappa: Optional[tuple]

    def _vec(self, fields, pts):
        pts = as_points(pts)
        r = np.hypot(pts[:, 0], pts[:, 1])
        th = np.arctan2(pts[:, 1], pts[:, 0])
        return np.stack([f.value_polar(r, th, pts[:, 2]) for f in fields],
                        axis=-1)

    def B_eval(self, pts):
        return self._vec(self.B, pts)

    def J_eval(self, pts):
        return self._vec(self.J, pts)

    def rho_eval(self, pts):
        return self.rho.value(pts)

    def p_eval(self, pts):
        return self.p.value(pts)

    def alpha_eval(self, pts):
        return self._vec(self.alpha, pts)

    def kappa_eval(self, pts):
        return self._vec(self.kappa, pts)

    def beta_eval(self, pts):
        v = self.B_eval(pts)
        r = self.rho_eval(pts)
        return np.stack([r * v[:, 2], -r * v[:, 1], r * v[:, 0]], axis=-1)

    def j_form_eval(self, pts):
        v = self.J_eval(pts)
        r = self.rho_eval(pts)
        return np.stack([r * v[:, 2], -r * v[:, 1], r * v[:, 0]], axis=-1)

    def as_integrable_system(self, metric=None, name="cached"):
        return IntegrableSystem(
            B=VectorField(eval=self.B_eval),
            J=VectorField(eval=self.J_eval),
            p=self.p_eval,
            omega=VolumeForm(rho=self.rho_eval),
            alpha=OneForm(eval=self.alpha_eval) if self.alpha else None,
            kappa=OneForm(eval=self.kappa_eval) if self.kappa else None,
            dp=lambda pts: self.p.one_form_d(pts),
            metric=metric, name=name,
        )


def cache_system_on_grid(sys_like, r_levels, n_theta=24, n_phi=32,
                         with_potentials=True, trim=1e-13) -> CachedSystem:
    """Sample a system once on the master polar grid and wrap in surrogates.

    ``sys_like`` needs vectorized B, J, omega, p (IntegrableSystem works).
    """
    pts, shape = _polar_grid(r_levels, n_theta, n_phi)
    Bv = sys_like.B(pts).reshape(*shape, 3)
    Jv = sys_like.J(pts).reshape(*shape, 3)
    rho = sys_like.omega(pts).reshape(shape)
    pv = sys_like.pressure(pts).reshape(shape)

    def rff(arr):
        return RadialFourierField(r_levels, arr, trim=trim)

    alpha = kappa = None
    if with_potentials and sys_like.alpha is not None:
        av = sys_like.alpha(pts).reshape(*shape, 3)
        alpha = tuple(rff(av[..., i]) for i in range(3))
    if with_potentials and sys_like.kappa is not None:
        kv = sys_like.kappa(pts).reshape(*shape, 3)
        kappa = tuple(rff(kv[..., i]) for i in range(3))
    return CachedSystem(
        r_levels=np.asarray(r_levels),
        B=tuple(rff(Bv[..., i]) for i in range(3)),
        J=tuple(rff(Jv[..., i]) for i in range(3)),
        rho=rff(rho), p=rff(pv), alpha=alpha, kappa=kappa,
    )


def cache_pushforward_through_flow(cached: CachedSystem, xi, r_levels,
                                   n_theta=24, n_phi=32, tol=DEFAULT_FLOW_TOL,
                                   trim=1e-13) -> CachedSystem:
    """Surrogates of the pushforward of a cached system along a flow.

    One combined backward + variational integration per master grid: the
    state carries the preimage w(lambda) and M(lambda) = D(flow back), so at
    lambda = 0 we hold w = Phi^{-1}(z) and M = DPhi^{-1}(z).  Fields then
    follow from the algebraic pushforward formulas.
    """
    pts, shape = _polar_grid(r_levels, n_theta, n_phi)
    n = pts.shape[0]

    def xi_jac(z, lam, h=1e-6):
        J = np.empty((z.shape[0], 3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            J[:, :, j] = (xi(z + e, lam) - xi(z - e, lam)) / (2 * h)
        return J

    y0 = np.concatenate([pts.ravel(),
                         np.broadcast_to(np.eye(3), (n, 3, 3)).ravel()])

    def rhs(lam, y):
        z = y[: 3 * n].reshape(n, 3)
        M = y[3 * n:].reshape(n, 3, 3)
        v = xi(z, lam)
        DM = np.einsum("nij,njk->nik", xi_jac(z, lam), M)
        return np.concatenate([v.ravel(), DM.ravel()])

    sol = solve_ivp(rhs, (1.0, 0.0), y0, method="DOP853", rtol=tol, atol=tol)
    if not sol.success:
        raise FlowEscape("backward variational flow failed: " + sol.message)
    w = sol.y[: 3 * n, -1].reshape(n, 3)
    Minv = sol.y[3 * n:, -1].reshape(n, 3, 3)  # DPhi^{-1}(z)
    DPhi = np.linalg.inv(Minv)
    det_inv = np.linalg.det(Minv)

    def push_vec(vals):
        return np.einsum("nij,nj->ni", DPhi, vals)

    def pull_form(vals):
        return np.einsum("nj,nji->ni", vals, Minv)

    Bv = push_vec(cached.B_eval(w)).reshape(*shape, 3)
    Jv = push_vec(cached.J_eval(w)).reshape(*shape, 3)
    rho = (cached.rho_eval(w) * det_inv).reshape(shape)
    pv = cached.p_eval(w).reshape(shape)

    def rff(arr):
        return RadialFourierField(r_levels, arr, trim=trim)

    alpha = kappa = None
    if cached.alpha is not None:
        av = pull_form(cached.alpha_eval(w)).reshape(*shape, 3)
        alpha = tuple(rff(av[..., i]) for i in range(3))
    if cached.kappa is not None:
        kv = pull_form(cached.kappa_eval(w)).reshape(*shape, 3)
        kappa = tuple(rff(kv[..., i]) for i in range(3))
    return CachedSystem(
        r_levels=np.asarray(r_levels),
        B=tuple(rff(Bv[..., i]) for i in range(3)),
        J=tuple(rff(Jv[..., i]) for i in range(3)),
        rho=rff(rho), p=rff(pv), alpha=alpha, kappa=kappa,
    )


# ---------------------------------------------------------------------------
# Morse-Bott normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MBChart:
    map: Diffeo
    c: float
    eps: int
    deck_period: float  # 2pi, or 4pi on the orientation double cover
    residuals: dict = field(default_factory=dict)


def _smooth_sym_sqrt(H):
    """Symmetric positive square roots of a batch of SPD 2x2 matrices."""
    w, V = np.linalg.eigh(H)
    s = np.sqrt(w)
    return np.einsum("nik,nk,njk->nij", V, s, V)


def morse_bott_normalize(sys: IntegrableSystem, report: AxisReport,
                         n_phi=128, refine=1, r_check=0.05) -> MBChart:
    """Chart in which p is an exact constant-coefficient quadratic form to
    second order and the cross-section coefficient of the flux form is one on
    the axis.

    Steps: per-phi translation to the axis, a smooth phi-periodic linear
    frame normalizing the transverse Hessian (symmetric square root in the
    elliptic case; continued eigenframes with 2pi/4pi holonomy handling in
    the hyperbolic cases), a per-phi scale making the Hessian coefficient
    constant, and a global scale normalizing the flux-form coefficient.
    ``refine`` extra passes re-measure the Hessian in the new chart and
    absorb the remaining quadratic defect.
    """
    if report.kind is AxisKind.DEGENERATE:
        raise DegenerateAxis("cannot normalize a degenerate axis")
    elliptic = report.kind is AxisKind.ELLIPTIC
    reflection = report.kind is AxisKind.REFLECTION_HYPERBOLIC
    deck = 2.0 * TWO_PI if reflection else TWO_PI

    current = sys
    total_map = None
    axis_curve = report.orbit.curve
    for it in range(refine + 1):
        mb_map, c_val, eps = _mb_single_pass(current, axis_curve, n_phi,
                                             elliptic, reflection, deck)
        total_map = mb_map if total_map is None else compose(mb_map, total_map)
        current = pushforward_system(sys, total_map)
        axis_curve = TrigSeries(np.zeros((8, 2)))

    resid = _mb_residuals(current, c_val, eps, r_check=r_check, n_phi=64,
                          deck=deck)
    return MBChart(map=total_map, c=c_val, eps=eps, deck_period=deck,
                   residuals=resid)


def _mb_single_pass(sys, axis_curve, n_phi, elliptic, reflection, deck):
    n_cover = n_phi * (2 if reflection else 1)
    phi = np.linspace(0.0, deck, n_cover, endpoint=False)
    phi_mod = np.mod(phi, TWO_PI)
    ax = axis_curve.eval(phi_mod)
    pts = np.column_stack([ax, phi_mod])
    H = sys.hessian_p(pts)[:, :2, :2]

    if elliptic:
        dets = np.linalg.det(H)
        if np.any(dets <= 0):
            raise DegenerateAxis("transverse Hessian not definite on axis")
        sign = 1.0 if H[0, 0, 0] > 0 else -1.0
        c_raw = np.sqrt(dets)
        A0 = _smooth_sym_sqrt(sign * H / c_raw[:, None, None])
        eps = 1
    else:
        w, V = np.linalg.eigh(H)
        lam_m, lam_p = w[:, 0], w[:, 1]
        if np.any(lam_m >= 0) or np.any(lam_p <= 0):
            raise DegenerateAxis("transverse Hessian not indefinite on axis")
        e = V[:, :, 1].copy()  # unstable direction, continued smoothly
        prev = e[0]
        for i in range(n_cover):
            if np.dot(e[i], prev) < 0:
                e[i] = -e[i]
            if i > 0 and abs(np.dot(e[i], prev)) < 0.2:
                raise EigenframeDiscontinuity(
                    "eigenframe continuation lost track", index=i)
            prev = e[i]
        closes = np.linalg.norm(e[-1] - e[0]) < np.linalg.norm(e[-1] + e[0])
        if not closes:
            raise EigenframeDiscontinuity(
                "eigenframe holonomy not resolvable on the declared cover",
                deck=deck)
        c_raw = np.sqrt(-lam_p * lam_m)
        R = np.stack([e, np.stack([-e[:, 1], e[:, 0]], axis=-1)], axis=-1)
        D = np.zeros((n_cover, 2, 2))
        D[:, 0, 0] = np.sqrt(lam_p / c_raw)
        D[:, 1, 1] = np.sqrt(-lam_m / c_raw)
        A0 = np.einsum("nij,nkj->nik", D, np.transpose(R, (0, 2, 1)))
        sign = 1.0
        eps = -1

    # per-phi uniform scale making the Hessian coefficient constant
    c_bar = float(np.exp(np.mean(np.log(c_raw))))
    scale = np.sqrt(c_raw / c_bar)
    A = A0 * scale[:, None, None]

    # global scale so the flux-form cross-section coefficient is one
    beta = sys.beta(pts)
    f_axis = beta[:, 0] / np.linalg.det(A)
    f_mean = float(np.mean(f_axis))
    if f_mean < 0:
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        A = np.einsum("ij,njk->nik", swap, A)
        f_mean = -f_mean
    lam = np.sqrt(f_mean)
    A = A * lam
    c_final = sign * c_bar / f_mean

    t_samples = -np.einsum("nij,nj->ni", A, ax)
    mb_map = _phi_affine_cover(A, t_samples, deck, name="morse_bott")
    return mb_map, float(c_final), eps


def _phi_affine_cover(A_samples, t_samples, period, name):
    """Per-phi affine diffeo with data sampled on [0, period)."""
    from .diffeo import _PhiAffine

    scale = TWO_PI / period
    SA = TrigSeries(A_samples)
    St = TrigSeries(t_samples)
    aff = _PhiAffine(
        A=lambda phi: SA.eval(phi * scale, 0),
        dA=lambda phi: SA.eval(phi * scale, 1) * scale,
        d2A=lambda phi: SA.eval(phi * scale, 2) * scale ** 2,
        t=lambda phi: St.eval(phi * scale, 0),
        dt=lambda phi: St.eval(phi * scale, 1) * scale,
        d2t=lambda phi: St.eval(phi * scale, 2) * scale ** 2,
    )
    return aff.as_diffeo(name)


def _mb_residuals(sys_mb, c, eps, r_check, n_phi, deck=TWO_PI):
    """Quadratic-fit residual of p and the on-axis flux-form coefficient."""
    phi = np.linspace(0.0, deck, n_phi, endpoint=False)
    theta = np.linspace(0.0, TWO_PI, 32, endpoint=False)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    out = {}
    p0 = float(np.mean(sys_mb.pressure(
        np.column_stack([np.zeros(n_phi), np.zeros(n_phi), phi]))))
    for r in (0.5 * r_check, r_check):
        pts = np.column_stack([r * np.cos(T).ravel(), r * np.sin(T).ravel(),
                               P.ravel()])
        quad = 0.5 * c * (pts[:, 0] ** 2 + eps * pts[:, 1] ** 2)
        resid = sys_mb.pressure(pts) - p0 - quad
        out[f"p_quad_residual_r{r:g}"] = float(np.max(np.abs(resid)))
    axis_pts = np.column_stack([np.zeros(n_phi), np.zeros(n_phi), phi])
    f = sys_mb.beta(axis_pts)[:, 0]
    out["beta_axis_deviation"] = float(np.max(np.abs(f - 1.0)))
    out["p_axis_variation"] = float(np.max(np.abs(
        sys_mb.pressure(axis_pts) - p0)))
    return out


# ---------------------------------------------------------------------------
# flux coordinates (exact radial flux label)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FluxChart:
    """Composite chart in which psi = (x^2 + y^2)/2 is the toroidal flux."""

    map: Diffeo
    P: Callable          # spline psi -> p
    P_prime: Callable
    PsiT_of_p: Callable  # spline p-level -> toroidal flux
    c: float
    residuals: dict = field(default_factory=dict)

    def psi_field(self, sys_original):
        """The flux label as a scalar field on the original chart."""

        def ev(pts):
            return self.PsiT_of_p(sys_original.pressure(pts))

        return ev


def flux_coordinates(sys: IntegrableSystem, mb: MBChart, r_work=0.4,
                     n_levels=24, r_max=1.0) -> FluxChart:
    """Radial relabeling making psi = (x^2+y^2)/2 the exact toroidal flux.

    The scale factor s = sqrt(2 Psi_T(p)/r^2) is smooth through the axis
    because the Morse-Bott chart gives Psi_T(p) = r^2/2 + O(r^3).
    """
    if mb.eps != 1:
        raise HyperbolicUnsupported(
            "flux coordinates are defined for elliptic axes only")
    sys_mb = pushforward_system(sys, mb.map)
    axis = origin_orbit()
    from .flux import toroidal_flux

    r_grid = np.linspace(r_work / n_levels, 1.25 * r_work, n_levels + 6)
    probe = np.column_stack([r_grid, np.zeros_like(r_grid),
                             np.zeros_like(r_grid)])
    lev = sys_mb.pressure(probe)
    p0 = float(sys_mb.pressure(np.zeros((1, 3)))[0])
    if not (np.all(np.diff(lev) > 0) or np.all(np.diff(lev) < 0)):
        raise NonMonotoneFlux("pressure not monotone along the probe ray")
    psi_vals = np.array([toroidal_flux(sys_mb, lv, axis=axis, r_max=r_max)
                         for lv in lev])
    lev_k = np.concatenate([[p0], lev])
    psi_k = np.concatenate([[0.0], psi_vals])
    order = np.argsort(lev_k)
    d = np.diff(psi_k[order])
    if not (np.all(d > 0) or np.all(d < 0)):
        raise NonMonotoneFlux("toroidal flux not monotone in the level")
    PsiT = CubicSpline(lev_k[order], psi_k[order], bc_type="not-a-knot")
    P_spl = CubicSpline(np.sort(psi_k), lev_k[np.argsort(psi_k)],
                        bc_type="not-a-knot")
    dPsiT = PsiT.derivative()

    def scale_field(pts):
        pts = as_points(pts)
        r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        T = PsiT(sys_mb.pressure(pts))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.sqrt(np.where(r2 > 1e-24,
                                 2.0 * np.maximum(T, 0.0) /
                                 np.where(r2 > 0, r2, 1.0), 1.0))
        return np.where(r2 > 1e-24, s, 1.0)

    def fwd(pts):
        pts = as_points(pts)
        s = scale_field(pts)
        return np.column_stack([pts[:, 0] * s, pts[:, 1] * s, pts[:, 2]])

    def inv(pts):
        pts = as_points(pts)
        out = pts.copy()
        r_t = np.hypot(pts[:, 0], pts[:, 1])
        mask = r_t > 1e-14
        if not np.any(mask):
            return out
        sub = pts[mask]
        rt = r_t[mask]
        u = sub[:, :2] / rt[:, None]
        r = rt.copy()
        for _ in range(30):
            q = np.column_stack([r * u[:, 0], r * u[:, 1], sub[:, 2]])
            pv = sys_mb.pressure(q)
            T = np.maximum(PsiT(pv), 0.0)
            g = np.sqrt(2.0 * T) - rt
            gp = sys_mb.grad_p(q)
            dT = dPsiT(pv) * (gp[:, 0] * u[:, 0] + gp[:, 1] * u[:, 1])
            denom = dT / np.sqrt(np.maximum(2.0 * T, 1e-30))
            step = g / np.where(np.abs(denom) > 1e-14, denom, 1.0)
            r_new = np.clip(r - step, 0.2 * rt, 5.0 * rt + 1e-12)
            done = np.max(np.abs(r_new - r)) < 1e-14 * (1.0 + np.max(rt))
            r = r_new
            if done:
                break
        out[mask, 0] = r * u[:, 0]
        out[mask, 1] = r * u[:, 1]
        return out

    def jac(pts):
        pts = as_points(pts)
        n = pts.shape[0]
        s = scale_field(pts)
        r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        pv = sys_mb.pressure(pts)
        gp = sys_mb.grad_p(pts)
        dT = dPsiT(pv)[:, None] * gp
        J = np.zeros((n, 3, 3))
        r2_safe = np.where(r2 > 1e-24, r2, 1.0)
        ds = dT / (s * r2_safe)[:, None]
        ds[:, 0] -= s * pts[:, 0] / r2_safe
        ds[:, 1] -= s * pts[:, 1] / r2_safe
        ds[r2 <= 1e-24] = 0.0
        J[:, 0, :] = ds * pts[:, 0][:, None]
        J[:, 1, :] = ds * pts[:, 1][:, None]
        J[:, 0, 0] += s
        J[:, 1, 1] += s
        J[:, 2, 2] = 1.0
        return J

    rescale = Diffeo(forward=fwd, inverse=inv, jacobian=jac, hessian=None,
                     name="flux_rescale")
    total = compose(rescale, mb.map)

    sys_c = pushforward_system(sys, total)
    resid = _flux_chart_residuals(sys_c, PsiT, r_work)
    return FluxChart(map=total, P=P_spl, P_prime=P_spl.derivative(),
                     PsiT_of_p=PsiT, c=mb.c, residuals=resid)


def _flux_chart_residuals(sys_c, PsiT, r_work):
    phi = np.linspace(0.0, TWO_PI, 32, endpoint=False)
    axis_pts = np.column_stack([np.zeros(32), np.zeros(32), phi])
    f = sys_c.beta(axis_pts)[:, 0]
    out = {"beta_axis_deviation": float(np.max(np.abs(f - 1.0)))}
    rng = np.random.default_rng(5)
    r = rng.uniform(0.05 * r_work, r_work, 200)
    th = rng.uniform(0, TWO_PI, 200)
    ph = rng.uniform(0, TWO_PI, 200)
    pts = np.column_stack([r * np.cos(th), r * np.sin(th), ph])
    out["psi_identity"] = float(np.max(np.abs(
        PsiT(sys_c.pressure(pts)) - 0.5 * r ** 2)))
    return out


# ---------------------------------------------------------------------------
# per-torus gauge solve
# ---------------------------------------------------------------------------

def _tangential_components(w, pts):
    """(i_dtheta w, i_dphi w) for one-form values on chart points."""
    x, y = pts[:, 0], pts[:, 1]
    return -y * w[:, 0] + x * w[:, 1], w[:, 2]


def solve_sigma_grids(w_grids_theta, w_grids_phi, r_levels, period_tol=1e-8,
                      scale=1.0):
    """Potential grids for closed tangential one-forms on nested tori.

    Input: per-torus grids of the theta / phi covariant components.  The
    periods over both cycles must vanish within ``period_tol`` (the paper's
    flux-matching condition); violations raise NonvanishingPeriods.  Returns
    (sigma grids, worst period, worst closedness defect).
    """
    nr, nt, nz = w_grids_theta.shape
    kt = np.fft.fftfreq(nt, 1.0 / nt)
    kz = np.fft.fftfreq(nz, 1.0 / nz)
    KT, KZ = np.meshgrid(kt, kz, indexing="ij")
    sig = np.zeros((nr, nt, nz))
    worst_period = 0.0
    worst_defect = 0.0
    for i in range(nr):
        wt, wp = w_grids_theta[i], w_grids_phi[i]
        per_t = np.max(np.abs(wt.mean(axis=0)))
        per_p = np.max(np.abs(wp.mean(axis=1)))
        worst_period = max(worst_period, per_t, per_p)
        if worst_period > period_tol * max(scale, 1e-30):
            raise NonvanishingPeriods(
                "pullback periods do not vanish (flux mismatch upstream)",
                period=worst_period, r=float(r_levels[i]))
        ct = np.fft.fft2(wt) / wt.size
        cp = np.fft.fft2(wp) / wp.size
        worst_defect = max(worst_defect, float(np.max(np.abs(
            1j * KZ * ct - 1j * KT * cp))))
        s = np.zeros_like(ct)
        mt = KT != 0
        s[mt] = ct[mt] / (1j * KT[mt])
        mz = (KT == 0) & (KZ != 0)
        s[mz] = cp[mz] / (1j * KZ[mz])
        s[0, 0] = 0.0
        sig[i] = np.real(np.fft.ifft2(s)) * s.size
    return sig, worst_period, worst_defect


def solve_sigma(one_form_diff: Callable, r_levels, n_theta=24, n_phi=32,
                period_tol=1e-8) -> RadialFourierField:
    """Primitive of a closed tangential one-form difference on nested tori.

    ``one_form_diff`` maps chart points to the components of the one-form
    (target minus current potential).  The zero mode is set to zero on every
    torus; per-torus solutions are joined by a parity-respecting radial
    spline.  The returned field carries ``worst_period`` and
    ``closedness_defect`` attributes.
    """
    pts, shape = _polar_grid(np.asarray(r_levels), n_theta, n_phi)
    w = one_form_diff(pts)
    wt, wp = _tangential_components(w, pts)
    scale = max(float(np.max(np.abs(w))), 1e-30)
    sig, per, defect = solve_sigma_grids(
        wt.reshape(shape), wp.reshape(shape), r_levels,
        period_tol=period_tol, scale=scale)
    out = RadialFourierField(np.asarray(r_levels), sig)
    out.worst_period = per
    out.closedness_defect = defect
    return out


# ---------------------------------------------------------------------------
# flows of lambda-dependent generators
# ---------------------------------------------------------------------------

def flow_diffeo(xi, name="flow", tol=DEFAULT_FLOW_TOL, jac_step=1e-6):
    """Diffeomorphism given by the time-one flow of a lambda-dependent field.

    ``xi(pts, lam)`` returns the generator components.  The Jacobian is
    integrated from the variational equations with a finite-difference
    generator Jacobian.
    """

    def integrate(pts, a, b):
        pts = as_points(pts)
        n = pts.shape[0]

        def rhs(lam, y):
            return xi(y.reshape(n, 3), lam).ravel()

        sol = solve_ivp(rhs, (a, b), pts.ravel(), method="DOP853",
                        rtol=tol, atol=tol)
        if not sol.success:
            raise FlowEscape("generator flow failed: " + sol.message)
        return sol.y[:, -1].reshape(n, 3)

    def fwd(pts):
        return integrate(pts, 0.0, 1.0)

    def inv(pts):
        return integrate(pts, 1.0, 0.0)

    def xi_jac(z, lam):
        J = np.empty((z.shape[0], 3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = jac_step
            J[:, :, j] = (xi(z + e, lam) - xi(z - e, lam)) / (2 * jac_step)
        return J

    def jac(pts):
        pts = as_points(pts)
        n = pts.shape[0]
        y0 = np.concatenate([pts.ravel(),
                             np.broadcast_to(np.eye(3), (n, 3, 3)).ravel()])

        def rhs(lam, y):
            z = y[: 3 * n].reshape(n, 3)
            M = y[3 * n:].reshape(n, 3, 3)
            v = xi(z, lam)
            DM = np.einsum("nij,njk->nik", xi_jac(z, lam), M)
            return np.concatenate([v.ravel(), DM.ravel()])

        sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=tol,
                        atol=tol)
        if not sol.success:
            raise FlowEscape("variational flow failed: " + sol.message)
        return sol.y[3 * n:, -1].reshape(n, 3, 3)

    return Diffeo(forward=fwd, inverse=inv, jacobian=jac, hessian=None,
                  name=name)


# ---------------------------------------------------------------------------
# Moser normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalFormChart:
    map: Diffeo
    P: Callable
    P_prime: Callable
    PsiP: EvenRadialSpline
    working_radius: float
    cached_nf: CachedSystem = field(repr=False, default=None)
    residuals: dict = field(default_factory=dict)

    def PsiP_prime(self, psi):
        return self.PsiP.d_psi(psi)


def _star_forms(PsiP: EvenRadialSpline):
    """The normal-form potential and flux form built from Psi_P."""

    def alpha_star(pts):
        pts = as_points(pts)
        psi = 0.5 * (pts[:, 0] ** 2 + pts[:, 1] ** 2)
        return np.stack([-0.5 * pts[:, 1], 0.5 * pts[:, 0],
                         -PsiP.of_psi(psi)], axis=-1)

    def beta_star(pts):
        pts = as_points(pts)
        psi = 0.5 * (pts[:, 0] ** 2 + pts[:, 1] ** 2)
        iota = PsiP.d_psi(psi)
        return np.stack([np.ones(pts.shape[0]), -iota * pts[:, 0],
                         -iota * pts[:, 1]], axis=-1)

    return alpha_star, beta_star


def _toroidal_circle(r):
    def point(t):
        t = np.atleast_1d(t)
        return np.column_stack([np.full_like(t, r), np.zeros_like(t),
                                np.mod(t, TWO_PI)])

    def velocity(t):
        t = np.atleast_1d(t)
        out = np.zeros((t.size, 3))
        out[:, 2] = 1.0
        return out

    return Loop(point=point, velocity=velocity, homology="toroidal")


def moser_normalize(sys: IntegrableSystem, chart: FluxChart, sigma=None,
                    r_work=0.35, n_levels=48, n_theta=24, n_phi=32,
                    rank_floor=1e-6, flow_tol=DEFAULT_FLOW_TOL,
                    shrink_floor=1e-3, verify_grid=(16, 16, 32),
                    verify_radius=None) -> NormalFormChart:
    """Moser interpolation flow taking the flux form to its normal form.

    Interpolates beta_lambda between the chart flux form and
    dx^dy - Psi_P'(psi) dpsi^dphi, solves the gauge sigma per torus, builds
    the generator through the kernel-complement solve and pushes the system
    along the time-one flow.  Shrinks the working radius and retries on rank
    loss of the interpolated form.
    """
    attempt_radius = r_work
    last_exc = None
    while attempt_radius >= shrink_floor:
        try:
            return _moser_attempt(sys, chart, sigma, attempt_radius, n_levels,
                                  n_theta, n_phi, rank_floor, flow_tol,
                                  verify_grid, verify_radius)
        except RankLoss as exc:
            last_exc = exc
            attempt_radius *= 0.5
    raise last_exc if last_exc is not None else RankLoss("radius floor hit")


def _moser_attempt(sys, chart, sigma_in, r_work, n_levels, n_theta, n_phi,
                   rank_floor, flow_tol, verify_grid, verify_radius):
    sys_c = pushforward_system(sys, chart.map)
    if sys_c.alpha is None:
        sys_c = sys_c.with_(alpha=homotopy_potential(sys_c.beta))
    r_levels = np.linspace(r_work / n_levels, 1.12 * r_work, n_levels + 6)

    # cache the chart system spectrally (algebraic chains, sampled once)
    cached_c = cache_system_on_grid(sys_c, r_levels, n_theta, n_phi)

    PsiP_vals = np.array([
        -loop_integral(sys_c.alpha, _toroidal_circle(r), n_quad=64)
        for r in r_levels])
    PsiP = EvenRadialSpline(r_levels, PsiP_vals, value_at_zero=0.0)
    alpha_star, beta_star = _star_forms(PsiP)

    # sigma and the radial component of (alpha* - alpha) on the master grid
    pts, shape = _polar_grid(r_levels, n_theta, n_phi)
    w = alpha_star(pts) - cached_c.alpha_eval(pts)
    if sigma_in is None:
        wt, wp = _tangential_components(w, pts)
        scale = max(float(np.max(np.abs(cached_c.alpha_eval(pts)))), 1e-30)
        sig_grids, per, defect = solve_sigma_grids(
            wt.reshape(shape), wp.reshape(shape), r_levels, scale=scale)
        sigma = RadialFourierField(r_levels, sig_grids)
        sigma.worst_period = per
        sigma.closedness_defect = defect
    else:
        sigma = sigma_in
    r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
    w_psi = ((w[:, 0] * pts[:, 0] + w[:, 1] * pts[:, 1])
             / np.where(r2 > 0, r2, 1.0)).reshape(shape)
    w_psi_f = RadialFourierField(r_levels, w_psi)

    bx, bxp, byp = (RadialFourierField(r_levels, a.reshape(shape)) for a in
                    cache_beta_components(cached_c, pts))

    def beta_lambda_polar(r, th, ph, pts_, lam):
        bc = np.stack([bx.value_polar(r, th, ph), bxp.value_polar(r, th, ph),
                       byp.value_polar(r, th, ph)], axis=-1)
        return (1.0 - lam) * bc + lam * beta_star(pts_)

    # rank check over the working region and the lambda interval
    rng = np.random.default_rng(11)
    rr = rng.uniform(0.02 * r_work, r_work, 400)
    th = rng.uniform(0, TWO_PI, 400)
    ph = rng.uniform(0, TWO_PI, 400)
    test_pts = np.column_stack([rr * np.cos(th), rr * np.sin(th), ph])
    for lam in np.linspace(0.0, 1.0, 5):
        bl = beta_lambda_polar(rr, th, ph, test_pts, lam)
        if np.min(np.linalg.norm(bl, axis=1)) < rank_floor:
            raise RankLoss("interpolated flux form loses rank",
                           radius=r_work, lam=float(lam))

    def xi(q, lam):
        q = as_points(q)
        r = np.hypot(q[:, 0], q[:, 1])
        th = np.arctan2(q[:, 1], q[:, 0])
        ph = q[:, 2]
        # rhs = d sigma + alpha - alpha* ; tangential parts cancel by the
        # per-torus solve, leaving (sigma_psi - w_psi) dpsi
        sr, _, _ = sigma.gradient_polar(r, th, ph)
        r_safe = np.where(r > 1e-14, r, 1.0)
        h = sr / r_safe - w_psi_f.value_polar(r, th, ph)
        h = np.where(r > 1e-14, h, 0.0)
        rhs = np.stack([h * q[:, 0], h * q[:, 1], np.zeros(q.shape[0])],
                       axis=-1)
        bl = beta_lambda_polar(r, th, ph, q, lam)
        return bhat_solve_components(bl, kernel_field(bl), rhs)

    flow = flow_diffeo(xi, name="moser_flow", tol=flow_tol)
    nf_map = compose(flow, chart.map)

    # pushforward of the cached chart system along the flow, re-cached
    cached_nf = cache_pushforward_through_flow(cached_c, xi, r_levels,
                                               n_theta, n_phi, tol=flow_tol)

    v_rad = verify_radius if verify_radius is not None else 0.45 * r_work
    resid = _normal_form_residuals(cached_nf, PsiP, verify_grid, v_rad)
    resid["sigma_period"] = float(getattr(sigma, "worst_period", 0.0))
    resid["sigma_closedness"] = float(getattr(sigma, "closedness_defect", 0.0))
    resid.update(_flow_checks(xi, v_rad, flow_tol))
    resid["working_radius"] = r_work
    return NormalFormChart(map=nf_map, P=chart.P, P_prime=chart.P_prime,
                           PsiP=PsiP, working_radius=r_work,
                           cached_nf=cached_nf, residuals=resid)


def cache_beta_components(cached: CachedSystem, pts):
    b = cached.beta_eval(pts)
    return b[:, 0], b[:, 1], b[:, 2]


def _verification_points(grid, r_max_eval):
    nr, nt, nz = grid
    r = np.linspace(r_max_eval / nr, r_max_eval, nr)
    th = np.linspace(0.0, TWO_PI, nt, endpoint=False)
    ph = np.linspace(0.0, TWO_PI, nz, endpoint=False)
    R, T, P = np.meshgrid(r, th, ph, indexing="ij")
    pts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel(),
                           P.ravel()])
    return pts, (nr, nt, nz)


def _normal_form_residuals(cached_nf: CachedSystem, PsiP, grid, r_max_eval):
    pts, (nr, nt, nz) = _verification_points(grid, r_max_eval)
    _, beta_star = _star_forms(PsiP)
    db = cached_nf.beta_eval(pts) - beta_star(pts)
    p_grid = cached_nf.p_eval(pts).reshape(nr, nt, nz)
    p_std = float(np.max(np.std(p_grid.reshape(nr, -1), axis=1)))
    return {
        "normal_form_max": float(np.max(np.abs(db))),
        "p_angular_std": p_std,
    }


def _flow_checks(xi, r_max_eval, flow_tol):
    """psi preservation and tangency along integrated trajectories."""
    pts, _ = _verification_points((6, 8, 8), r_max_eval)
    n = pts.shape[0]
    lam_out = np.linspace(0.0, 1.0, 9)

    def rhs(lam, y):
        return xi(y.reshape(n, 3), lam).ravel()

    sol = solve_ivp(rhs, (0.0, 1.0), pts.ravel(), method="DOP853",
                    rtol=flow_tol, atol=flow_tol, t_eval=lam_out)
    traj = sol.y.T.reshape(-1, n, 3)
    psi0 = 0.5 * (pts[:, 0] ** 2 + pts[:, 1] ** 2)
    drift = 0.0
    tangency = 0.0
    for lam, z in zip(lam_out, traj):
        psi = 0.5 * (z[:, 0] ** 2 + z[:, 1] ** 2)
        drift = max(drift, float(np.max(np.abs(psi - psi0))))
        v = xi(z, lam)
        tangency = max(tangency, float(np.max(np.abs(
            v[:, 0] * z[:, 0] + v[:, 1] * z[:, 1]))))
    return {"psi_drift": drift, "tangency": tangency}


# ---------------------------------------------------------------------------
# near-axis Hamada
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NAHChart:
    map: Diffeo
    P: Callable
    P_prime: Callable
    PsiP: EvenRadialSpline
    K: EvenRadialSpline      # spline of K/psi
    L: EvenRadialSpline
    working_radius: float
    cached_out: CachedSystem = field(repr=False, default=None)
    residuals: dict = field(default_factory=dict)

    def K_of_psi(self, psi):
        return psi * self.K.of_psi(psi)

    def K_prime(self, psi):
        return self.K.of_psi(psi) + psi * self.K.d_psi(psi)

    def L_of_psi(self, psi):
        return self.L.of_psi(psi)

    def L_prime(self, psi):
        return self.L.d_psi(psi)


def r_lambda_values(nah: NAHChart, rho_vals, psi, lam):
    """Interpolation weight r_lambda = (1-lam) + lam (L'-G'K')/(rho P')."""
    num = nah.L_prime(psi) - nah.PsiP.d_psi(psi) * nah.K_prime(psi)
    return (1.0 - lam) + lam * num / (rho_vals * nah.P_prime(psi))


def near_axis_hamada(sys: IntegrableSystem, nf: NormalFormChart,
                     r_work=None, flow_tol=DEFAULT_FLOW_TOL,
                     shrink_floor=1e-3, verify_grid=(16, 16, 32),
                     verify_radius=None) -> NAHChart:
    """Straighten the current form while preserving p and the flux form.

    The generator is b_lambda B with b_lambda = -h/(r_lambda P'(psi)); being
    parallel to B it cannot disturb the flux-form normal form, and the
    positivity bound on r_lambda guarantees the flow exists.  Shrinks the
    working radius if r_lambda loses positivity.
    """
    radius = r_work if r_work is not None else 0.9 * nf.working_radius
    last = None
    while radius >= shrink_floor:
        try:
            return _nah_attempt(sys, nf, radius, flow_tol, verify_grid,
                                verify_radius)
        except RLambdaNonpositive as exc:
            last = exc
            radius *= 0.5
    raise last if last is not None else RLambdaNonpositive("radius floor hit")


def _nah_attempt(sys, nf, r_work, flow_tol, verify_grid, verify_radius):
    cached_nf = nf.cached_nf
    r_levels = cached_nf.r_levels
    if cached_nf.kappa is None:
        kappa_form = homotopy_potential(
            TwoFormFromCached(cached_nf.j_form_eval))
        kap_eval = kappa_form.eval
    else:
        kap_eval = cached_nf.kappa_eval

    K_vals = np.array([
        _loop_int_eval(kap_eval, circle_loop((0, 0), r, clockwise=False))
        for r in r_levels])
    L_vals = np.array([
        -_loop_int_eval(kap_eval, _toroidal_circle(r)) for r in r_levels])
    psi_levels = 0.5 * np.asarray(r_levels) ** 2
    K_ratio = EvenRadialSpline(r_levels, K_vals / psi_levels)
    L_spl = EvenRadialSpline(r_levels, L_vals)

    nah = NAHChart(map=None, P=nf.P, P_prime=nf.P_prime, PsiP=nf.PsiP,
                   K=K_ratio, L=L_spl, working_radius=r_work)

    def kappa_star(pts):
        pts = as_points(pts)
        psi = 0.5 * (pts[:, 0] ** 2 + pts[:, 1] ** 2)
        ratio = nah.K.of_psi(psi)
        return np.stack([-0.5 * ratio * pts[:, 1], 0.5 * ratio * pts[:, 0],
                         -nah.L.of_psi(psi)], axis=-1)

    n_theta = 24
    n_phi = 32
    pts, shape = _polar_grid(r_levels, n_theta, n_phi)
    w = kappa_star(pts) - kap_eval(pts)
    wt, wp = _tangential_components(w, pts)
    scale = max(float(np.max(np.abs(kap_eval(pts)))), 1e-30)
    S_grids, per, defect = solve_sigma_grids(
        wt.reshape(shape), wp.reshape(shape), r_levels, scale=scale)
    S = RadialFourierField(r_levels, S_grids)
    r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
    h_grid = ((w[:, 0] * pts[:, 0] + w[:, 1] * pts[:, 1])
              / np.where(r2 > 0, r2, 1.0)).reshape(shape)
    w_psi_f = RadialFourierField(r_levels, h_grid)

    # positivity of r_lambda (linear in lambda: endpoints suffice)
    rng = np.random.default_rng(13)
    rr = rng.uniform(0.02 * r_work, r_work, 500)
    th = rng.uniform(0, TWO_PI, 500)
    ph = rng.uniform(0, TWO_PI, 500)
    test_pts = np.column_stack([rr * np.cos(th), rr * np.sin(th), ph])
    r1 = r_lambda_values(nah, cached_nf.rho_eval(test_pts),
                         0.5 * rr ** 2, 1.0)
    if np.min(r1) <= 0.0:
        raise RLambdaNonpositive("interpolation weight loses positivity",
                                 min_r=float(np.min(r1)), radius=r_work)

    def b_scalar(q, lam):
        q = as_points(q)
        r = np.hypot(q[:, 0], q[:, 1])
        th = np.arctan2(q[:, 1], q[:, 0])
        psi = 0.5 * r ** 2
        sr, _, _ = S.gradient_polar(r, th, q[:, 2])
        r_safe = np.where(r > 1e-14, r, 1.0)
        h = w_psi_f.value_polar(r, th, q[:, 2]) - sr / r_safe
        h = np.where(r > 1e-14, h, 0.0)
        rl = r_lambda_values(nah, cached_nf.rho_eval(q), psi, lam)
        return -h / (rl * nah.P_prime(psi))

    def xi(q, lam):
        return cached_nf.B_eval(q) * b_scalar(q, lam)[:, None]

    flow = flow_diffeo(xi, name="nah_flow", tol=flow_tol)
    total = compose(flow, nf.map)
    cached_out = cache_pushforward_through_flow(cached_nf, xi, r_levels,
                                                n_theta, n_phi, tol=flow_tol)

    v_rad = verify_radius if verify_radius is not None else 0.45 * r_work
    resid = _nah_residuals(cached_out, nah, verify_grid, v_rad)
    resid["S_period"] = float(per)
    resid["S_closedness"] = float(defect)
    resid["working_radius"] = r_work
    resid.update(_normal_form_residuals(cached_out, nf.PsiP, verify_grid,
                                        v_rad))
    return replace(nah, map=total, cached_out=cached_out, residuals=resid)


class TwoFormFromCached:
    def __init__(self, eval_fn):
        self.eval = eval_fn

    def __call__(self, pts):
        return self.eval(as_points(pts))


def _loop_int_eval(form_eval, loop, n_quad=128):
    t = np.linspace(0.0, TWO_PI, n_quad, endpoint=False)
    a = form_eval(loop.point(t))
    v = loop.velocity(t)
    return float(np.sum(np.einsum("ni,ni->n", a, v)) / n_quad)


def _nah_residuals(cached_out: CachedSystem, nah, grid, r_max_eval):
    """Residuals of the straightened current form plus commuting checks."""
    pts, (nr, nt, nz) = _verification_points(grid, r_max_eval)
    psi = 0.5 * (pts[:, 0] ** 2 + pts[:, 1] ** 2)
    j = cached_out.j_form_eval(pts)
    j_star = np.stack([
        nah.K_prime(psi),
        -nah.L_prime(psi) * pts[:, 0],
        -nah.L_prime(psi) * pts[:, 1],
    ], axis=-1)
    out = {"current_form_max": float(np.max(np.abs(j - j_star)))}

    rho = cached_out.rho_eval(pts).reshape(nr, nt, nz)
    out["jacobian_angular_std"] = float(np.max(
        np.std(rho.reshape(nr, -1), axis=1) / np.abs(
            np.mean(rho.reshape(nr, -1), axis=1))))
    kz = np.fft.fftfreq(nz, 1.0 / nz)
    for namev, ev in (("B", cached_out.B_eval), ("J", cached_out.J_eval)):
        comp = ev(pts).reshape(nr, nt, nz, 3)
        dphi = np.real(np.fft.ifft(
            1j * kz[None, None, :, None] * np.fft.fft(comp, axis=2), axis=2))
        scale = max(float(np.max(np.abs(comp))), 1e-30)
        out[f"commutator_dphi_{namev}"] = float(np.max(np.abs(dphi)) / scale)
    return out


# ---------------------------------------------------------------------------
# near-axis Boozer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NABChart:
    nah: NAHChart
    weighted_name: str
    residuals: dict

    @property
    def map(self):
        return self.nah.map


def near_axis_boozer(sys: IntegrableSystem, report: AxisReport,
                     mhs_tol=1e-6, r_work=0.35, flow_tol=DEFAULT_FLOW_TOL,
                     verify_grid=(16, 16, 32), verify_radius=None,
                     off_axis_levels=None, rng_seed=20240811) -> NABChart:
    """Near-axis Boozer chart: the Hamada pipeline on the reweighted system.

    Requires MHS integrability within ``mhs_tol``.  When ``off_axis_levels``
    (toroidal-flux values) is given, the residuals additionally include the
    straight-field-line verification of the induced angular chart on those
    surfaces against the original field and metric.
    """
    from .fields import sample_points
    from .fields import mhs_residual as _mhs
    from .errors import NotMHS

    rng = np.random.default_rng(rng_seed)
    pts = sample_points(rng, 200, r_max=min(0.8 * r_work + 0.1, 0.5))
    resid0 = _mhs(sys, pts)
    if resid0 > mhs_tol:
        raise NotMHS("system is not MHS within tolerance",
                     mhs_residual=float(resid0), tol=mhs_tol)
    weighted = boozer_weighted_system(sys)
    mb = morse_bott_normalize(weighted, report)
    fc = flux_coordinates(weighted, mb, r_work=min(1.2 * r_work, 0.5))
    nf = moser_normalize(weighted, fc, r_work=r_work, flow_tol=flow_tol,
                         verify_grid=verify_grid, verify_radius=verify_radius)
    nah = near_axis_hamada(weighted, nf, flow_tol=flow_tol,
                           verify_grid=verify_grid,
                           verify_radius=verify_radius)
    residuals = dict(nah.residuals)
    residuals["mhs_residual"] = float(resid0)

    if off_axis_levels is not None:
        charts = [induced_surface_chart(nah.map, psi, float(nf.P(psi)),
                                        1.0 / float(nf.P_prime(psi)))
                  for psi in off_axis_levels]
        chart_res = verify_chart(sys, charts, kind="boozer",
                                 metric=sys.metric)
        residuals["off_axis"] = chart_res.as_dict()
    return NABChart(nah=nah, weighted_name=weighted.name, residuals=residuals)


def induced_surface_chart(chart_map: Diffeo, psi, level, dpsi_dp,
                          resolution=(32, 32)) -> SurfaceChart:
    """Angular chart of the flux surface psi induced by a near-axis map.

    The pipeline chart maps the surface to the round torus of radius
    sqrt(2 psi); pulling the circle grid back through the inverse map gives
    the surface embedding in the original coordinates.
    """
    nt, nz = resolution
    theta = np.linspace(0.0, TWO_PI, nt, endpoint=False)
    zeta = np.linspace(0.0, TWO_PI, nz, endpoint=False)
    T, Z = np.meshgrid(theta, zeta, indexing="ij")
    r = np.sqrt(2.0 * psi)
    round_pts = np.column_stack([r * np.cos(T).ravel(), r * np.sin(T).ravel(),
                                 Z.ravel()])
    pts = chart_map.inverse(round_pts).reshape(nt, nz, 3)
    phi_periodic = pts[:, :, 2] - Z.reshape(1, nz)
    phi_periodic = np.mod(phi_periodic + np.pi, TWO_PI) - np.pi
    fphi = Fourier2D(phi_periodic) if np.max(np.abs(phi_periodic)) > 1e-13 \
        else None
    return SurfaceChart(
        level=float(level), psi=float(psi), iota=float("nan"),
        dpsi_dp=float(dpsi_dp),
        theta=theta, zeta=zeta,
        fx=Fourier2D(pts[:, :, 0]), fy=Fourier2D(pts[:, :, 1]),
        fphi=fphi, phi_winding=(0.0, 1.0),
        residuals={"induced": True},
    )
