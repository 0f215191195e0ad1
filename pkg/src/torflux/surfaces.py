"""Flux-surface charts and straight-field-line (Hamada / Boozer) coordinates.

Surfaces are built by field-line tracing: a single trajectory on an
irrational surface equidistributes, and in the straight label
u = theta0 + iota*phi the embedding is a smooth function on the 2-torus that
is recovered by Fourier least squares section by section.  Surfaces with
rotation number within the resonance guard of a nonzero rational are
rejected; an integer rotation number (closed field lines) falls back to a
contour-seeded construction.

The Hamada reparametrization is solved per surface in closed form.  Writing
mu for the leafwise area density induced by the volume form and the pressure
label, the one-forms i_B mu and i_J mu are closed on the surface because both
fields preserve mu; Hamada angles are exactly the angles in which both forms
are purely harmonic.  Removing the exact parts chi_B, chi_J (a spectral
solve, no small divisors) and solving the constant 2x2 system

    [[-F', G'], [-K', L']] (a, b) = (chi_B, chi_J)

yields the angle shift (a, b).  The harmonic coefficients themselves are the
flux-function derivatives, which is how the flux matrix is assembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .errors import (
    MissingCurrentPotential,
    NotMHS,
    NotUnimodular,
    ResonantSurface,
    SurfaceFitResidualTooLarge,
)
from .fieldline import ClosedOrbit, find_axis, weighted_birkhoff_rotation
from .fields import (
    TWO_PI,
    IntegrableSystem,
    OneForm,
    VectorField,
    VolumeForm,
    as_points,
    homotopy_potential,
    metric_cross,
    mhs_residual,
)
from .flux import (
    loop_integral,
    poloidal_flux,
    poloidal_level_loop,
    toroidal_flux,
    toroidal_level_loop,
    _radial_level_solve,
)

RESONANCE_GUARD = 1e-3
GUARD_MODES = 32
FIT_RESIDUAL_TOL = 1e-6


class Fourier2D:
    """Real 2D Fourier series on the (theta, zeta) torus.

    Construct from grid values (n_theta, n_zeta); evaluates the series and
    its angle derivatives at scattered points or on the native grid.
    """

    def __init__(self, grid_values=None, coef=None):
        if coef is not None:
            self.c = coef
        else:
            g = np.asarray(grid_values, dtype=float)
            self.c = np.fft.fft2(g) / g.size
        self.kt = np.fft.fftfreq(self.c.shape[0], 1.0 / self.c.shape[0])
        self.kz = np.fft.fftfreq(self.c.shape[1], 1.0 / self.c.shape[1])

    def eval(self, theta, zeta, dtheta=0, dzeta=0):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
        Et = np.exp(1j * np.outer(theta, self.kt))
        Ez = np.exp(1j * np.outer(zeta, self.kz))
        c = self.c
        if dtheta:
            c = c * (1j * self.kt[:, None]) ** dtheta
        if dzeta:
            c = c * (1j * self.kz[None, :]) ** dzeta
        return np.real(np.einsum("nk,kl,nl->n", Et, c, Ez))

    def grid(self, dtheta=0, dzeta=0):
        c = self.c
        if dtheta:
            c = c * (1j * self.kt[:, None]) ** dtheta
        if dzeta:
            c = c * (1j * self.kz[None, :]) ** dzeta
        return np.real(np.fft.ifft2(c)) * c.size


@dataclass(frozen=True)
class SurfaceChart:
    """Torus embedding with uniform angle grids.

    The embedding is (x, y, phi) with x, y periodic Fourier series and
    phi = w_theta*theta + w_zeta*zeta + phi0 + periodic part.
    """

    level: float
    psi: float
    iota: float
    dpsi_dp: float
    theta: np.ndarray
    zeta: np.ndarray
    fx: Fourier2D
    fy: Fourier2D
    fphi: Optional[Fourier2D]
    phi_winding: tuple
    phi_offset: float = 0.0
    residuals: dict = field(default_factory=dict)

    @property
    def n_theta(self):
        return self.theta.size

    @property
    def n_zeta(self):
        return self.zeta.size

    def embed(self, theta, zeta):
        theta = np.atleast_1d(theta)
        zeta = np.atleast_1d(zeta)
        x = self.fx.eval(theta, zeta)
        y = self.fy.eval(theta, zeta)
        phi = self.phi_winding[0] * theta + self.phi_winding[1] * zeta \
            + self.phi_offset
        if self.fphi is not None:
            phi = phi + self.fphi.eval(theta, zeta)
        return np.column_stack([x, y, phi])

    def grid_points(self):
        T, Z = np.meshgrid(self.theta, self.zeta, indexing="ij")
        return self.embed(T.ravel(), Z.ravel()).reshape(self.n_theta,
                                                        self.n_zeta, 3)

    def tangents(self):
        """E_theta, E_zeta on the grid, each (n_theta, n_zeta, 3)."""
        nt, nz = self.n_theta, self.n_zeta

        def comp(f2d, wt, wz):
            dt = f2d.grid(dtheta=1) if f2d is not None else 0.0
            dz = f2d.grid(dzeta=1) if f2d is not None else 0.0
            return dt + wt, dz + wz

        ext = np.zeros((nt, nz, 3))
        ezt = np.zeros((nt, nz, 3))
        ext[:, :, 0], ezt[:, :, 0] = self.fx.grid(dtheta=1), self.fx.grid(dzeta=1)
        ext[:, :, 1], ezt[:, :, 1] = self.fy.grid(dtheta=1), self.fy.grid(dzeta=1)
        pt, pz = comp(self.fphi, self.phi_winding[0], self.phi_winding[1])
        ext[:, :, 2] = pt
        ezt[:, :, 2] = pz
        return ext, ezt


def _tangent_decompose(W, Et, Ez):
    """Split grid vectors W into tangential components and a normal residual.

    Returns (W_theta, W_zeta, normal_magnitude); all arrays share the grid
    shape.  The normal direction is the Euclidean cross product of the
    tangents (used only as a solve basis, not as geometry).
    """
    n = np.cross(Et, Ez)
    M = np.stack([Et, Ez, n], axis=-1)
    sol = np.linalg.solve(M, W[..., None])[..., 0]
    return sol[..., 0], sol[..., 1], np.abs(sol[..., 2]) * np.linalg.norm(
        n, axis=-1)


def _surface_area_density(sys, pts_flat, Et, Ez, shape):
    """Leafwise area density m = Omega(Y, E_theta, E_zeta), Y = grad p/|grad p|^2."""
    g = sys.grad_p(pts_flat)
    Y = g / np.einsum("ni,ni->n", g, g)[:, None]
    rho = sys.omega(pts_flat)
    det = np.einsum(
        "ni,ni->n",
        Y,
        np.cross(Et.reshape(-1, 3), Ez.reshape(-1, 3)),
    )
    return (rho * det).reshape(shape)


def resonance_guard(iota, guard=RESONANCE_GUARD, max_mode=GUARD_MODES):
    """Smallest |m*iota - n| over 1 <= m <= max_mode, |n| <= max_mode+1."""
    best = np.inf
    hit = None
    for m in range(1, max_mode + 1):
        n = round(m * iota)
        if abs(n) > max_mode + 1:
            continue
        d = abs(m * iota - n)
        if d < best:
            best, hit = d, (m, n)
    return best, hit


def _trace_samples(B: VectorField, seeds, n_transits, n_per, tol=1e-11):
    """Batched field-line trace; samples at phi = 2pi(m + j/n_per).

    Returns an array (n_seeds, n_transits*n_per, 2).
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    ns = seeds.shape[0]

    def rhs(phi, state):
        xy = state.reshape(ns, 2)
        pts = np.column_stack([xy, np.full(ns, phi % TWO_PI)])
        v = B(pts)
        return (v[:, :2] / v[:, 2][:, None]).ravel()

    t_eval = np.arange(n_transits * n_per + 1) * (TWO_PI / n_per)
    sol = solve_ivp(rhs, (0.0, t_eval[-1]), seeds.ravel(), method="DOP853",
                    rtol=tol, atol=tol, t_eval=t_eval)
    if not sol.success:
        raise SurfaceFitResidualTooLarge("surface trace failed: " + sol.message)
    out = sol.y.T.reshape(-1, ns, 2).transpose(1, 0, 2)
    return out, t_eval


def build_surface_family(sys: IntegrableSystem, levels, resolution=(32, 32),
                         axis: Optional[ClosedOrbit] = None, n_transits=128,
                         fit_modes=None, r_max=1.0, guard=RESONANCE_GUARD,
                         guard_modes=GUARD_MODES, trace_tol=1e-11,
                         fit_tol=FIT_RESIDUAL_TOL):
    """Field-line-traced charts for a family of levels (one batched trace).

    The rotation number per surface is measured by a weighted Birkhoff
    average of the section map (super-convergent on Diophantine surfaces).
    Rational rotation numbers inside the guard raise ResonantSurface, except
    for integer values, where every field line closes after one transit and
    the chart is seeded from the section contour instead.
    """
    nt, nz = resolution
    levels = np.atleast_1d(np.asarray(levels, dtype=float))
    if axis is None:
        axis = find_axis(sys.B, (0.01, 0.005), r_max=r_max)
    ax0 = axis.curve.eval(np.array([0.0]))[0]
    r0 = np.array([
        _radial_level_solve(sys, ax0, lv, np.array([0.0]), 0.0,
                            r_max=r_max)[0] for lv in levels])
    seeds = np.column_stack([ax0[0] + r0, np.full(levels.size, ax0[1])])

    xy_all, t_eval = _trace_samples(sys.B, seeds, n_transits, nz,
                                    tol=trace_tol)
    ax_all = axis.curve.eval(np.mod(t_eval, TWO_PI))
    charts = []
    for idx, level in enumerate(levels):
        xy = xy_all[idx]
        rel = xy - ax_all
        theta_cont = np.unwrap(np.arctan2(rel[:, 1], rel[:, 0]))
        iota = weighted_birkhoff_rotation(theta_cont[::nz])

        dist, hit = resonance_guard(iota, guard=guard, max_mode=guard_modes)
        if dist < guard:
            if abs(iota - round(iota)) < guard:
                charts.append(_build_surface_contour(
                    sys, level, resolution, axis, iota, r_max=r_max,
                    trace_tol=trace_tol))
                continue
            raise ResonantSurface(
                "rotation number within guard of a rational",
                iota=float(iota), resonance=hit, distance=float(dist))

        K = fit_modes or max(8, nt // 2 - 1)
        K = min(K, (n_transits - 2) // 2)
        theta0 = theta_cont[0]
        modes = np.arange(-K, K + 1)

        # Per-section 1D Fourier fit in the straight label
        # u = theta0 + iota*phi, then FFT across sections for the 2D series.
        coef_x = np.zeros((2 * K + 1, nz), dtype=complex)
        coef_y = np.zeros((2 * K + 1, nz), dtype=complex)
        fit_resid = 0.0
        for j in range(nz):
            phi_j = t_eval[j::nz][:n_transits]
            u = theta0 + iota * phi_j
            E = np.exp(1j * np.outer(u, modes))
            A = np.column_stack([E.real, E.imag])
            rhs = xy[j::nz][:n_transits]
            sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            fit_resid = max(fit_resid, float(np.max(np.abs(A @ sol - rhs))))
            # E.real*a + E.imag*b = Re[(a - i b) e^{iku}]
            coef_x[:, j] = sol[: 2 * K + 1, 0] - 1j * sol[2 * K + 1:, 0]
            coef_y[:, j] = sol[: 2 * K + 1, 1] - 1j * sol[2 * K + 1:, 1]
        if fit_resid > fit_tol:
            raise SurfaceFitResidualTooLarge(
                "field-line Fourier fit residual too large",
                residual=fit_resid, modes=K, n_transits=n_transits)

        theta = np.linspace(0.0, TWO_PI, nt, endpoint=False)
        zeta = np.linspace(0.0, TWO_PI, nz, endpoint=False)
        Et = np.exp(1j * np.outer(modes, theta))
        gx = np.real(np.einsum("kj,kt->tj", coef_x, Et))
        gy = np.real(np.einsum("kj,kt->tj", coef_y, Et))

        chart = SurfaceChart(
            level=float(level),
            psi=float(toroidal_flux(sys, level, axis=axis, r_max=r_max)),
            iota=float(iota), dpsi_dp=1.0,
            theta=theta, zeta=zeta,
            fx=Fourier2D(gx), fy=Fourier2D(gy), fphi=None,
            phi_winding=(0.0, 1.0),
            residuals={"fit_max_abs": fit_resid, "iota": float(iota)},
        )
        p_grid = sys.pressure(chart.grid_points().reshape(-1, 3))
        chart.residuals["p_variation"] = float(
            np.max(np.abs(p_grid - np.mean(p_grid))))
        charts.append(chart)
    return charts


def build_surface(sys: IntegrableSystem, level, resolution=(32, 32),
                  axis: Optional[ClosedOrbit] = None, n_transits=128,
                  fit_modes=None, r_max=1.0, guard=RESONANCE_GUARD,
                  guard_modes=GUARD_MODES, trace_tol=1e-11,
                  fit_tol=FIT_RESIDUAL_TOL) -> SurfaceChart:
    """Field-line-traced chart of the single invariant torus {p = level}."""
    return build_surface_family(
        sys, [level], resolution=resolution, axis=axis, n_transits=n_transits,
        fit_modes=fit_modes, r_max=r_max, guard=guard,
        guard_modes=guard_modes, trace_tol=trace_tol, fit_tol=fit_tol)[0]


def analytic_circle_chart(level, psi, iota, resolution=(32, 32),
                          dpsi_dp=1.0) -> SurfaceChart:
    """Chart of the round torus x = sqrt(2 psi) cos(theta), y = .. sin(theta).

    For model systems whose surfaces are exact circles this provides the
    native-angle chart without tracing (useful on rational surfaces, where
    the field-line construction is refused by design).
    """
    nt, nz = resolution
    theta = np.linspace(0.0, TWO_PI, nt, endpoint=False)
    zeta = np.linspace(0.0, TWO_PI, nz, endpoint=False)
    r = np.sqrt(2.0 * psi)
    gx = np.broadcast_to(r * np.cos(theta)[:, None], (nt, nz)).copy()
    gy = np.broadcast_to(r * np.sin(theta)[:, None], (nt, nz)).copy()
    return SurfaceChart(
        level=float(level), psi=float(psi), iota=float(iota),
        dpsi_dp=float(dpsi_dp), theta=theta, zeta=zeta,
        fx=Fourier2D(gx), fy=Fourier2D(gy), fphi=None,
        phi_winding=(0.0, 1.0), residuals={"analytic": True},
    )


def _build_surface_contour(sys, level, resolution, axis, iota, r_max=1.0,
                           trace_tol=1e-11):
    """Contour-seeded chart for surfaces with closed field lines (integer
    rotation number): each section-contour point is traced one transit."""
    nt, nz = resolution
    theta = np.linspace(0.0, TWO_PI, nt, endpoint=False)
    zeta = np.linspace(0.0, TWO_PI, nz, endpoint=False)
    ax0 = axis.curve.eval(np.array([0.0]))[0]
    r = _radial_level_solve(sys, ax0, level, theta, 0.0, r_max=r_max)
    seeds = np.column_stack([ax0[0] + r * np.cos(theta),
                             ax0[1] + r * np.sin(theta)])
    xy, t_eval = _trace_samples(sys.B, seeds, 1, nz, tol=trace_tol)
    gx = xy[:, :nz, 0]
    gy = xy[:, :nz, 1]
    chart = SurfaceChart(
        level=float(level),
        psi=float(toroidal_flux(sys, level, axis=axis, r_max=r_max)),
        iota=float(iota), dpsi_dp=1.0,
        theta=theta, zeta=zeta,
        fx=Fourier2D(gx), fy=Fourier2D(gy), fphi=None,
        phi_winding=(0.0, 1.0),
        residuals={"fit_max_abs": 0.0, "iota": float(iota),
                   "contour_mode": True},
    )
    p_grid = sys.pressure(chart.grid_points().reshape(-1, 3))
    chart.residuals["p_variation"] = float(np.max(np.abs(p_grid - np.mean(p_grid))))
    return chart


# ---------------------------------------------------------------------------
# Hamada reparametrization
# ---------------------------------------------------------------------------

def _closed_form_solve(w_u, w_v):
    """Potential chi with d chi = (w_u, w_v) minus harmonic part, spectrally.

    Returns (chi grid, harmonic pair (mean_u, mean_v), closedness defect)."""
    nt, nz = w_u.shape
    cu = np.fft.fft2(w_u) / w_u.size
    cv = np.fft.fft2(w_v) / w_v.size
    kt = np.fft.fftfreq(nt, 1.0 / nt)
    kz = np.fft.fftfreq(nz, 1.0 / nz)
    KT, KZ = np.meshgrid(kt, kz, indexing="ij")
    defect = np.max(np.abs(1j * KZ * cu - 1j * KT * cv))
    chi = np.zeros_like(cu)
    mask_t = KT != 0
    chi[mask_t] = cu[mask_t] / (1j * KT[mask_t])
    mask_z = (KT == 0) & (KZ != 0)
    chi[mask_z] = cv[mask_z] / (1j * KZ[mask_z])
    chi[0, 0] = 0.0
    grid = np.real(np.fft.ifft2(chi)) * chi.size
    return grid, (float(np.real(cu[0, 0])), float(np.real(cv[0, 0]))), float(defect)


@dataclass(frozen=True)
class SurfaceHamadaData:
    chart: SurfaceChart
    Fp: float   # dF/dp on this surface (p the pressure label)
    Gp: float
    Kp: float
    Lp: float
    angle_shift: tuple  # max |a|, max |b| applied
    solve_defect: float


def _surface_fields(sys, chart):
    """Grid quantities used by both the Hamada solve and verification."""
    pts = chart.grid_points()
    flat = pts.reshape(-1, 3)
    Et, Ez = chart.tangents()
    m = _surface_area_density(sys, flat, Et, Ez, pts.shape[:2])
    Bv = sys.B(flat).reshape(pts.shape)
    Jv = sys.J(flat).reshape(pts.shape)
    Bt, Bz, Bn = _tangent_decompose(Bv, Et, Ez)
    Jt, Jz, Jn = _tangent_decompose(Jv, Et, Ez)
    return {
        "pts": pts, "Et": Et, "Ez": Ez, "m": m,
        "Bt": Bt, "Bz": Bz, "Bn": Bn, "Jt": Jt, "Jz": Jz, "Jn": Jn,
    }


def hamada_reparametrize(sys, chart: SurfaceChart):
    """One surface of the Hamada construction.

    Computes the closed one-forms i_B mu, i_J mu in the current angles,
    removes their exact parts through the constant 2x2 solve and re-grids the
    chart on the new angles.  Returns SurfaceHamadaData with the flux-matrix
    entries (pressure-label derivatives).
    """
    f = _surface_fields(sys, chart)
    m = f["m"]
    # i_W mu = (-m W^zeta) du + (m W^theta) dv
    wu_B, wv_B = -m * f["Bz"], m * f["Bt"]
    wu_J, wv_J = -m * f["Jz"], m * f["Jt"]
    chi_B, (hu_B, hv_B), d1 = _closed_form_solve(wu_B, wv_B)
    chi_J, (hu_J, hv_J), d2 = _closed_form_solve(wu_J, wv_J)
    Fp, Gp = -hu_B, hv_B
    Kp, Lp = -hu_J, hv_J
    M = np.array([[-Fp, Gp], [-Kp, Lp]])
    det = np.linalg.det(M)
    if abs(det) < 1e-12:
        raise SurfaceFitResidualTooLarge(
            "flux matrix singular on surface (B, J dependent?)", det=det)
    Minv = np.linalg.inv(M)
    a = Minv[0, 0] * chi_B + Minv[0, 1] * chi_J
    b = Minv[1, 0] * chi_B + Minv[1, 1] * chi_J

    new_chart = _regrid_with_shift(chart, a, b)
    return SurfaceHamadaData(
        chart=new_chart, Fp=Fp, Gp=Gp, Kp=Kp, Lp=Lp,
        angle_shift=(float(np.max(np.abs(a))), float(np.max(np.abs(b)))),
        solve_defect=float(max(d1, d2)),
    )


def _regrid_with_shift(chart: SurfaceChart, a, b, newton_tol=1e-12,
                       max_iter=30):
    """Re-grid a chart on the shifted angles Theta = u + a, Z = v + b."""
    fa, fb = Fourier2D(a), Fourier2D(b)
    nt, nz = chart.n_theta, chart.n_zeta
    T, Z = np.meshgrid(chart.theta, chart.zeta, indexing="ij")
    Tt, Zt = T.ravel(), Z.ravel()
    u = Tt.copy()
    v = Zt.copy()
    for _ in range(max_iter):
        ru = u + fa.eval(u, v) - Tt
        rv = v + fb.eval(u, v) - Zt
        au, av = fa.eval(u, v, dtheta=1), fa.eval(u, v, dzeta=1)
        bu, bv = fb.eval(u, v, dtheta=1), fb.eval(u, v, dzeta=1)
        det = (1 + au) * (1 + bv) - av * bu
        du = ((1 + bv) * ru - av * rv) / det
        dv = (-bu * ru + (1 + au) * rv) / det
        u -= du
        v -= dv
        if max(np.max(np.abs(du)), np.max(np.abs(dv))) < newton_tol:
            break
    x = chart.fx.eval(u, v)
    y = chart.fy.eval(u, v)
    phi = chart.phi_winding[0] * u + chart.phi_winding[1] * v + chart.phi_offset
    if chart.fphi is not None:
        phi = phi + chart.fphi.eval(u, v)
    # new winding: phi as function of (Theta, Z); shifts by single-valued a, b
    # keep the winding numbers, the periodic rest is re-fit on the new grid.
    wt, wz = chart.phi_winding
    phi_periodic = (phi - wt * Tt - wz * Zt - chart.phi_offset).reshape(nt, nz)
    fphi = None
    if np.max(np.abs(phi_periodic)) > 1e-13:
        fphi = Fourier2D(phi_periodic)
    return replace(
        chart,
        fx=Fourier2D(x.reshape(nt, nz)),
        fy=Fourier2D(y.reshape(nt, nz)),
        fphi=fphi,
        residuals=dict(chart.residuals),
    )


@dataclass(frozen=True)
class ChartResiduals:
    """Per-surface verification residuals; maxima over the chart."""

    per_surface: list
    max_bpsi: float
    max_ang_std_Btheta: float
    max_ang_std_Bzeta: float
    max_ang_std_Jtheta: float
    max_ang_std_Jzeta: float
    max_ang_std_jacobian: float
    max_ang_std_Bcov_theta: Optional[float] = None
    max_ang_std_Bcov_zeta: Optional[float] = None

    def as_dict(self):
        d = {
            "max_bpsi": self.max_bpsi,
            "max_ang_std_Btheta": self.max_ang_std_Btheta,
            "max_ang_std_Bzeta": self.max_ang_std_Bzeta,
            "max_ang_std_Jtheta": self.max_ang_std_Jtheta,
            "max_ang_std_Jzeta": self.max_ang_std_Jzeta,
            "max_ang_std_jacobian": self.max_ang_std_jacobian,
        }
        if self.max_ang_std_Bcov_theta is not None:
            d["max_ang_std_Bcov_theta"] = self.max_ang_std_Bcov_theta
            d["max_ang_std_Bcov_zeta"] = self.max_ang_std_Bcov_zeta
        return d


def _rel_std(v, scale=None):
    if scale is None:
        scale = abs(np.mean(v))
    return float(np.std(v) / max(scale, 1e-30))


def verify_chart(sys: IntegrableSystem, charts, kind="hamada",
                 metric=None) -> ChartResiduals:
    """Residuals of the straight-field-line normal form on each surface.

    Hamada: max |B^psi| plus relative angular standard deviations of the
    contravariant angle components of B and J and of the leafwise Jacobian.
    Boozer: additionally the angular deviations of the covariant angular
    components of B.
    """
    if isinstance(charts, HamadaChart):
        charts = charts.surfaces
    if isinstance(charts, SurfaceChart):
        charts = [charts]
    rows = []
    for item in charts:
        chart = item.chart if isinstance(item, SurfaceHamadaData) else item
        f = _surface_fields(sys, chart)
        flat = f["pts"].reshape(-1, 3)
        bpsi = np.einsum("ni,ni->n", sys.B(flat), sys.grad_p(flat)) \
            * chart.dpsi_dp
        # components of one field share a scale so a vanishing component
        # (e.g. J^zeta when J is purely poloidal) is judged against |field|
        b_scale = float(np.sqrt(np.mean(f["Bt"] ** 2 + f["Bz"] ** 2)))
        j_scale = float(np.sqrt(np.mean(f["Jt"] ** 2 + f["Jz"] ** 2)))
        row = {
            "level": chart.level,
            "psi": chart.psi,
            "bpsi": float(np.max(np.abs(bpsi))),
            "ang_std_Btheta": _rel_std(f["Bt"], b_scale),
            "ang_std_Bzeta": _rel_std(f["Bz"], b_scale),
            "ang_std_Jtheta": _rel_std(f["Jt"], j_scale),
            "ang_std_Jzeta": _rel_std(f["Jz"], j_scale),
            "ang_std_jacobian": _rel_std(f["m"]),
        }
        if kind == "boozer":
            g = metric if metric is not None else sys.metric
            if g is None:
                raise NotMHS("boozer verification requires a metric")
            Bv = sys.B(flat)
            gm = g(flat)
            Bcov = np.einsum("nij,nj->ni", gm, Bv)
            Et, Ez = f["Et"], f["Ez"]
            bt = np.einsum("ni,ni->n", Bcov, Et.reshape(-1, 3))
            bz = np.einsum("ni,ni->n", Bcov, Ez.reshape(-1, 3))
            cov_scale = float(np.sqrt(np.mean(bt ** 2 + bz ** 2)))
            row["ang_std_Bcov_theta"] = _rel_std(bt, cov_scale)
            row["ang_std_Bcov_zeta"] = _rel_std(bz, cov_scale)
        rows.append(row)
    out = ChartResiduals(
        per_surface=rows,
        max_bpsi=max(r["bpsi"] for r in rows),
        max_ang_std_Btheta=max(r["ang_std_Btheta"] for r in rows),
        max_ang_std_Bzeta=max(r["ang_std_Bzeta"] for r in rows),
        max_ang_std_Jtheta=max(r["ang_std_Jtheta"] for r in rows),
        max_ang_std_Jzeta=max(r["ang_std_Jzeta"] for r in rows),
        max_ang_std_jacobian=max(r["ang_std_jacobian"] for r in rows),
        max_ang_std_Bcov_theta=(max(r["ang_std_Bcov_theta"] for r in rows)
                                if kind == "boozer" else None),
        max_ang_std_Bcov_zeta=(max(r["ang_std_Bcov_zeta"] for r in rows)
                               if kind == "boozer" else None),
    )
    return out


@dataclass(frozen=True)
class HamadaChart:
    """Family of Hamada surfaces over a flux interval.

    ``psi`` is the toroidal-flux label.  F, G, K, L are sampled flux
    functions; the flux matrix rows are (F', -G') and (K', -L') with
    derivatives taken with respect to psi.
    """

    surfaces: list
    levels: np.ndarray
    psi: np.ndarray
    iota: np.ndarray
    F: np.ndarray
    G: np.ndarray
    K: np.ndarray
    L: np.ndarray
    Fp: np.ndarray
    Gp: np.ndarray
    Kp: np.ndarray
    Lp: np.ndarray
    residuals: ChartResiduals
    kind: str = "hamada"

    def flux_matrix(self, i):
        """2x2 flux matrix at surface index i."""
        return np.array([[self.Fp[i], -self.Gp[i]],
                         [self.Kp[i], -self.Lp[i]]])


def _current_actions(sys, level, axis, kappa, r_max=1.0):
    """K and L action integrals of the current potential on a level surface."""
    loop_p = poloidal_level_loop(sys, axis, level, r_max=r_max)
    K = -loop_integral(kappa, loop_p)
    loop_t = toroidal_level_loop(sys, axis, level, r_max=r_max)
    L = -loop_integral(kappa, loop_t, n_quad=64)
    return K, L


def to_hamada(sys: IntegrableSystem, levels, resolution=(32, 32),
              axis: Optional[ClosedOrbit] = None, r_max=1.0,
              allow_kappa_fallback=True, n_transits=128,
              trace_tol=1e-11) -> HamadaChart:
    """Hamada chart family on an interval of regular surfaces.

    ``levels`` are pressure values of the surfaces (strictly monotone in the
    toroidal flux).  F and G values come from the action integrals of alpha,
    K and L from loop integrals of kappa (built by the radial homotopy
    operator from i_J Omega when kappa is absent and the fallback is
    enabled).  The flux-matrix derivatives come from the per-surface harmonic
    coefficients, converted to the toroidal-flux label.
    """
    levels = np.asarray(levels, dtype=float)
    if axis is None:
        axis = find_axis(sys.B, (0.01, 0.005), r_max=r_max)
    kappa = sys.kappa
    if kappa is None:
        if not allow_kappa_fallback:
            raise MissingCurrentPotential(
                "sys.kappa absent and fallback disabled")
        kappa = homotopy_potential(sys.j_form)

    base_charts = build_surface_family(sys, levels, resolution=resolution,
                                       axis=axis, n_transits=n_transits,
                                       r_max=r_max, trace_tol=trace_tol)
    data = []
    psis, iotas = [], []
    F_vals, G_vals, K_vals, L_vals = [], [], [], []
    for lv, chart in zip(levels, base_charts):
        h = hamada_reparametrize(sys, chart)
        data.append(h)
        psis.append(chart.psi)
        iotas.append(chart.iota)
        F_vals.append(chart.psi)
        G_vals.append(poloidal_flux(sys, lv, axis=axis, r_max=r_max)
                      if sys.alpha is not None else np.nan)
        Kv, Lv = _current_actions(sys, lv, axis, kappa, r_max=r_max)
        K_vals.append(Kv)
        L_vals.append(Lv)

    psis = np.asarray(psis)
    # pressure-label derivatives -> psi-label: dp/dpsi = 1/(dPsi_T/dp) = 1/Fp
    Fp = np.array([h.Fp for h in data])
    conv = 1.0 / Fp
    Fp_psi = Fp * conv
    Gp_psi = np.array([h.Gp for h in data]) * conv
    Kp_psi = np.array([h.Kp for h in data]) * conv
    Lp_psi = np.array([h.Lp for h in data]) * conv
    surfaces = [replace(h.chart, dpsi_dp=float(c)) for h, c in zip(data, Fp)]
    # G fallback when alpha is absent: integrate iota dPsi_T from the axis
    G_vals = np.asarray(G_vals)
    if np.any(np.isnan(G_vals)):
        order = np.argsort(psis)
        spl = CubicSpline(psis[order], Gp_psi[order], bc_type="not-a-knot")
        G_vals = np.array([spl.integrate(0.0, s) for s in psis])

    chart = HamadaChart(
        surfaces=surfaces,
        levels=levels, psi=psis, iota=np.asarray(iotas),
        F=np.asarray(F_vals), G=np.asarray(G_vals),
        K=np.asarray(K_vals), L=np.asarray(L_vals),
        Fp=Fp_psi, Gp=Gp_psi, Kp=Kp_psi, Lp=Lp_psi,
        residuals=None, kind="hamada",
    )
    res = verify_chart(sys, surfaces, kind="hamada")
    return replace(chart, residuals=res)


def boozer_weighted_system(sys: IntegrableSystem) -> IntegrableSystem:
    """The |B|^2-reweighted system (B', J', p, Omega').

    B' = B/|B|^2 and J' = B x grad p/|B|^2 are divergence free for
    Omega' = |B|^2 Omega, commute, and form a Hamiltonian pair with p, so the
    Hamada machinery applies verbatim.  The flux form is unchanged, hence
    alpha carries over; kappa' is rebuilt by the homotopy operator.
    """
    if sys.metric is None:
        raise NotMHS("Boozer weighting requires a metric")
    g = sys.metric
    B, omega = sys.B, sys.omega
    norm2 = g.norm2(B)

    def Bp_eval(pts):
        pts = as_points(pts)
        return B(pts) / norm2(pts)[:, None]

    grad_p_vec = VectorField(eval=lambda pts: _raise_index(g, pts, sys.grad_p(pts)))
    BxGp = metric_cross(B, grad_p_vec, g, omega)

    def Jp_eval(pts):
        pts = as_points(pts)
        return BxGp(pts) / norm2(pts)[:, None]

    def rho_p(pts):
        pts = as_points(pts)
        return omega(pts) * norm2(pts)

    omega_p = VolumeForm(rho=rho_p)
    sys_p = IntegrableSystem(
        B=VectorField(eval=Bp_eval), J=VectorField(eval=Jp_eval),
        p=sys.p, omega=omega_p, alpha=sys.alpha, kappa=None,
        metric=sys.metric, dp=sys.dp, hess_p=sys.hess_p,
        name=sys.name + "-boozer-weighted",
        meta=dict(sys.meta, boozer_weighted=True),
    )
    return sys_p.with_(kappa=homotopy_potential(sys_p.j_form))


def _raise_index(metric, pts, covec):
    gi = np.linalg.inv(metric(as_points(pts)))
    return np.einsum("nij,nj->ni", gi, covec)


def to_boozer(sys: IntegrableSystem, levels, resolution=(32, 32),
              axis: Optional[ClosedOrbit] = None, r_max=1.0,
              mhs_tol=1e-6, n_transits=128, trace_tol=1e-11,
              rng_seed=20240811) -> HamadaChart:
    """Boozer chart: Hamada chart of the |B|^2-reweighted system.

    Refuses systems that are not magnetohydrostatic within ``mhs_tol``.
    The returned chart is additionally verified against the covariant
    flux-function property of the original field.
    """
    if sys.metric is None:
        raise NotMHS("to_boozer requires sys.metric")
    rng = np.random.default_rng(rng_seed)
    from .fields import sample_points
    pts = sample_points(rng, 200, r_max=0.8 * r_max)
    resid = mhs_residual(sys, pts)
    if resid > mhs_tol:
        raise NotMHS("system is not MHS within tolerance",
                     mhs_residual=float(resid), tol=mhs_tol)
    sys_p = boozer_weighted_system(sys)
    chart = to_hamada(sys_p, levels, resolution=resolution, axis=axis,
                      r_max=r_max, n_transits=n_transits, trace_tol=trace_tol)
    res = verify_chart(sys, chart.surfaces, kind="boozer", metric=sys.metric)
    return replace(chart, residuals=res, kind="boozer")


# ---------------------------------------------------------------------------
# unimodular angle transforms
# ---------------------------------------------------------------------------

def sl2z_transform(chart: HamadaChart, A, nu=None) -> HamadaChart:
    """Apply the affine unimodular angle change (theta, zeta) -> A(theta,zeta)+nu.

    A must be an integer matrix with determinant +1; nu, when given, is a
    pair of flux functions (callables of psi, or constants).  The flux
    matrices of the result satisfy Psi_new = Psi_old A^{-1}.
    """
    A = np.asarray(A)
    if A.shape != (2, 2) or not np.all(A == np.round(A)):
        raise NotUnimodular("A must be an integer 2x2 matrix")
    A = A.astype(int)
    if int(round(np.linalg.det(A))) != 1:
        raise NotUnimodular("det A must be +1", det=float(np.linalg.det(A)))
    Ainv = np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]], dtype=float)

    def nu_at(psi):
        if nu is None:
            return np.zeros(2)
        out = []
        for comp in nu:
            out.append(comp(psi) if callable(comp) else float(comp))
        return np.asarray(out)

    new_surfaces = []
    for s in chart.surfaces:
        off = nu_at(s.psi)
        nt, nz = s.n_theta, s.n_zeta
        T2, Z2 = np.meshgrid(s.theta, s.zeta, indexing="ij")
        old = np.einsum("ij,jnm->inm", Ainv,
                        np.stack([T2 - off[0], Z2 - off[1]]))
        u, v = old[0].ravel(), old[1].ravel()
        x = s.fx.eval(u, v)
        y = s.fy.eval(u, v)
        phi = s.phi_winding[0] * u + s.phi_winding[1] * v + s.phi_offset
        if s.fphi is not None:
            phi = phi + s.fphi.eval(u, v)
        w_new = (s.phi_winding[0] * Ainv[0, 0] + s.phi_winding[1] * Ainv[1, 0],
                 s.phi_winding[0] * Ainv[0, 1] + s.phi_winding[1] * Ainv[1, 1])
        off_phi = s.phi_offset - (s.phi_winding[0] * (Ainv @ off)[0]
                                  + s.phi_winding[1] * (Ainv @ off)[1])
        periodic = (phi - w_new[0] * T2.ravel() - w_new[1] * Z2.ravel()
                    - off_phi).reshape(nt, nz)
        fphi = Fourier2D(periodic) if np.max(np.abs(periodic)) > 1e-13 else None
        new_surfaces.append(replace(
            s, fx=Fourier2D(x.reshape(nt, nz)), fy=Fourier2D(y.reshape(nt, nz)),
            fphi=fphi, phi_winding=w_new, phi_offset=float(off_phi)))

    FM_new = [chart.flux_matrix(i) @ Ainv for i in range(len(chart.surfaces))]
    Fp = np.array([m[0, 0] for m in FM_new])
    Gp = np.array([-m[0, 1] for m in FM_new])
    Kp = np.array([m[1, 0] for m in FM_new])
    Lp = np.array([-m[1, 1] for m in FM_new])
    # the sampled values transform with the same matrix identity
    F_new, G_new, K_new, L_new = [], [], [], []
    for i in range(len(chart.surfaces)):
        V = np.array([[chart.F[i], -chart.G[i]], [chart.K[i], -chart.L[i]]])
        Vn = V @ Ainv
        F_new.append(Vn[0, 0]); G_new.append(-Vn[0, 1])
        K_new.append(Vn[1, 0]); L_new.append(-Vn[1, 1])

    return replace(
        chart, surfaces=new_surfaces,
        F=np.asarray(F_new), G=np.asarray(G_new),
        K=np.asarray(K_new), L=np.asarray(L_new),
        Fp=Fp, Gp=Gp, Kp=Kp, Lp=Lp,
    )


def recompute_flux_matrix(sys: IntegrableSystem, chart: HamadaChart):
    """Re-derive the flux matrices from the stored surfaces (verification).

    Uses the per-surface harmonic coefficients of i_B mu, i_J mu in the
    chart's current angles, converted with the stored psi-label scale.
    """
    out = []
    for s in chart.surfaces:
        f = _surface_fields(sys, s)
        m = f["m"]
        Fp = float(np.mean(m * f["Bz"]))
        Gp = float(np.mean(m * f["Bt"]))
        Kp = float(np.mean(m * f["Jz"]))
        Lp = float(np.mean(m * f["Jt"]))
        conv = 1.0 / s.dpsi_dp
        out.append(np.array([[Fp, -Gp], [Kp, -Lp]]) * conv)
    return out
