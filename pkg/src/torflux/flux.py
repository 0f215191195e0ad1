"""Action integrals: toroidal and poloidal fluxes, and transform profiles.

Loop conventions (fixed package-wide): poloidal loops are parametrized
clockwise in the cross-section, c_P(t) = axis + r (cos t, -sin t), and
toroidal loops run in +phi.  With the package's dx^dy two-form orientation
the toroidal flux is the section-disk integral of the flux form, which equals
minus the clockwise loop integral of the potential; both paths are provided
and must agree.

All fluxes are attached to invariant level sets of p.  Loops are constructed
on the level set itself (section contour for poloidal loops, constant-ray
curve for toroidal loops), which makes the integrals independent of the loop
choice within its homology class and hence diffeomorphism invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    LevelOutOfRange,
    MissingPotentialAndFallbackDisabled,
    NonClosedLoop,
)
from .fieldline import ClosedOrbit, find_axis
from .fields import TWO_PI, IntegrableSystem, OneForm, as_points

QUAD_REL_TOL = 1e-10
QUAD_MAX_N = 2 ** 14


@dataclass(frozen=True)
class Loop:
    """Closed parametrized curve t in [0, 2pi) -> chart point."""

    point: Callable[[np.ndarray], np.ndarray]
    velocity: Callable[[np.ndarray], np.ndarray]
    homology: str  # "poloidal" | "toroidal"

    def closure_defect(self):
        a = self.point(np.array([0.0]))[0]
        b = self.point(np.array([TWO_PI]))[0]
        d = a - b
        d[2] = (d[2] + np.pi) % TWO_PI - np.pi
        return float(np.linalg.norm(d))


def loop_integral(alpha: OneForm, loop: Loop, n_quad=64, rel_tol=QUAD_REL_TOL,
                  n_max=QUAD_MAX_N, full_output=False):
    """(1/2pi) times the circulation of alpha around the loop.

    Periodic trapezoidal quadrature, spectrally accurate for smooth loops;
    the node count doubles until the relative change drops below ``rel_tol``
    or ``n_max`` is reached.
    """
    if n_quad < 16:
        raise ValueError("n_quad must be at least 16")
    if loop.closure_defect() > 1e-9:
        raise NonClosedLoop("loop endpoints do not match",
                            defect=loop.closure_defect())

    def value(n):
        t = np.linspace(0.0, TWO_PI, n, endpoint=False)
        a = alpha(loop.point(t))
        v = loop.velocity(t)
        return float(np.sum(np.einsum("ni,ni->n", a, v)) / n)

    n = int(n_quad)
    prev = value(n)
    converged = False
    while n < n_max:
        n *= 2
        cur = value(n)
        if abs(cur - prev) <= rel_tol * max(1.0, abs(cur)):
            converged = True
            prev = cur
            break
        prev = cur
    if full_output:
        return prev, {"converged": converged, "n_quad": n}
    return prev


def circle_loop(center, radius, phi0=0.0, clockwise=True, homology="poloidal"):
    """Cross-section circle at fixed phi; clockwise by package convention."""
    s = -1.0 if clockwise else 1.0
    cx, cy = center

    def point(t):
        t = np.atleast_1d(t)
        return np.column_stack([cx + radius * np.cos(t),
                                cy + s * radius * np.sin(t),
                                np.full_like(t, phi0)])

    def velocity(t):
        t = np.atleast_1d(t)
        return np.column_stack([-radius * np.sin(t),
                                s * radius * np.cos(t),
                                np.zeros_like(t)])

    return Loop(point=point, velocity=velocity, homology=homology)


def _radial_level_solve(sys: IntegrableSystem, axis_xy, level, angles, phi,
                        r_max=1.0, r_init=None, tol=1e-13, max_iter=60):
    """Solve p(axis + r e(theta), phi) = level for r > 0 along each ray.

    Vectorized safeguarded Newton; raises LevelOutOfRange when the level is
    not reached along some ray inside the chart.  ``axis_xy`` may be a single
    section point (2,) or per-ray points (n, 2) for moving-axis loops.
    """
    angles = np.atleast_1d(angles)
    e = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    n = angles.size
    phi_arr = np.full(n, phi) if np.isscalar(phi) else np.asarray(phi)
    ax = np.broadcast_to(np.asarray(axis_xy, dtype=float).reshape(-1, 2),
                         (n, 2))

    def p_of(r):
        pts = np.column_stack([ax[:, 0] + r * e[:, 0],
                               ax[:, 1] + r * e[:, 1], phi_arr])
        return sys.pressure(pts), pts

    p_axis = sys.pressure(np.column_stack([ax, phi_arr]))[0]
    p_edge, _ = p_of(np.full(n, 0.9 * r_max))
    inside = (level - p_axis) * (p_edge - level) >= 0
    if not np.all(inside):
        raise LevelOutOfRange("level not bracketed along some rays",
                              level=float(level), p_axis=float(p_axis))

    r = np.full(n, 0.45 * r_max) if r_init is None else np.full(n, r_init)
    lo = np.full(n, 0.0)
    hi = np.full(n, 0.9 * r_max)
    for _ in range(max_iter):
        pv, pts = p_of(r)
        f = pv - level
        above = f * (p_edge - p_axis) > 0
        hi = np.where(above, np.minimum(hi, r), hi)
        lo = np.where(~above, np.maximum(lo, r), lo)
        g = sys.grad_p(pts)
        fp = g[:, 0] * e[:, 0] + g[:, 1] * e[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(np.abs(fp) > 1e-14, f / fp, np.nan)
        r_new = r - step
        bad = ~np.isfinite(r_new) | (r_new <= lo) | (r_new >= hi)
        r_new = np.where(bad, 0.5 * (lo + hi), r_new)
        if np.all(np.abs(r_new - r) <= tol * (1.0 + r)):
            r = r_new
            break
        r = r_new
    return r


def section_contour(sys: IntegrableSystem, axis: ClosedOrbit, level, phi=0.0,
                    n_theta=None, angles=None, r_max=1.0):
    """Radii of the p-level contour about the axis in a phi-section."""
    if angles is None:
        angles = np.linspace(0.0, TWO_PI, n_theta, endpoint=False)
    ax = axis.curve.eval(np.atleast_1d(phi))[0]
    r = _radial_level_solve(sys, ax, level, angles, phi, r_max=r_max)
    return angles, r, ax


def poloidal_level_loop(sys: IntegrableSystem, axis: ClosedOrbit, level,
                        phi0=0.0, r_max=1.0):
    """Clockwise poloidal loop lying on the p-level set in the phi0 section."""
    ax = axis.curve.eval(np.atleast_1d(phi0))[0]

    def point(t):
        t = np.atleast_1d(t)
        ang = -t  # clockwise parametrization
        r = _radial_level_solve(sys, ax, level, ang, phi0, r_max=r_max)
        return np.column_stack([ax[0] + r * np.cos(ang),
                                ax[1] + r * np.sin(ang),
                                np.full_like(t, phi0)])

    def velocity(t):
        # spectral derivative of the sampled curve is wasteful here; use a
        # high-order symmetric difference in the loop parameter instead
        h = 1e-6
        return (8 * (point(t + h) - point(t - h))
                - (point(t + 2 * h) - point(t - 2 * h))) / (12 * h)

    return Loop(point=point, velocity=velocity, homology="poloidal")


def toroidal_level_loop(sys: IntegrableSystem, axis: ClosedOrbit, level,
                        theta_ref=0.0, r_max=1.0):
    """Toroidal loop on the level set: fixed poloidal ray from the axis."""

    def point(t):
        t = np.atleast_1d(t)
        phi = np.mod(t, TWO_PI)
        ax = axis.curve.eval(phi)
        e = np.array([np.cos(theta_ref), np.sin(theta_ref)])
        r = _radial_level_solve(sys, ax, level, np.full_like(t, theta_ref),
                                phi, r_max=r_max)
        return np.column_stack([ax[:, 0] + r * e[0], ax[:, 1] + r * e[1],
                                phi])

    def velocity(t):
        h = 1e-6
        pp, pm = point(t + h), point(t - h)
        pp2, pm2 = point(t + 2 * h), point(t - 2 * h)
        v = (8 * (pp - pm) - (pp2 - pm2)) / (12 * h)
        v[:, 2] = 1.0  # phi runs with the parameter; avoid mod-2pi jumps
        return v

    return Loop(point=point, velocity=velocity, homology="toroidal")


def toroidal_flux(sys: IntegrableSystem, level, axis: Optional[ClosedOrbit] = None,
                  method="line", phi0=0.0, r_max=1.0, n_quad=64,
                  allow_fallback=True, n_r=48):
    """Toroidal flux of the p-level surface.

    ``method='line'`` integrates the potential around the poloidal contour
    (requires sys.alpha); ``method='stokes'`` integrates the flux form over
    the section disk bounded by the contour; ``method='both'`` returns the
    line value after checking agreement.
    """
    if axis is None:
        axis = find_axis(sys.B, (0.01, 0.005), r_max=r_max)
    p_axis = float(sys.pressure(axis.points(np.array([phi0])))[0])
    if np.isclose(level, p_axis, rtol=0.0, atol=1e-15):
        return 0.0

    def line_value():
        if sys.alpha is None:
            raise MissingPotentialAndFallbackDisabled(
                "sys.alpha absent; enable the Stokes fallback")
        loop = poloidal_level_loop(sys, axis, level, phi0=phi0, r_max=r_max)
        return -loop_integral(sys.alpha, loop, n_quad=n_quad)

    def stokes_value():
        # polar quadrature about the axis: trapezoid in angle (periodic),
        # Gauss-Legendre radially, integrand rho * B^phi * r.
        n_theta = 256
        angles, rad, ax = section_contour(sys, axis, level, phi=phi0,
                                          n_theta=n_theta, r_max=r_max)
        nodes, weights = np.polynomial.legendre.leggauss(n_r)
        s = 0.5 * (nodes + 1.0)
        w = 0.5 * weights
        total = 0.0
        for sk, wk in zip(s, w):
            r = rad * sk
            pts = np.column_stack([ax[0] + r * np.cos(angles),
                                   ax[1] + r * np.sin(angles),
                                   np.full_like(angles, phi0)])
            beta_xy = sys.omega(pts) * sys.B(pts)[:, 2]
            total += wk * np.sum(beta_xy * r * rad) * (TWO_PI / n_theta)
        return total / TWO_PI

    if method == "line":
        if sys.alpha is None and allow_fallback:
            return stokes_value()
        return line_value()
    if method == "stokes":
        return stokes_value()
    if method == "both":
        lv, sv = line_value(), stokes_value()
        return lv, sv
    raise ValueError(f"unknown method {method!r}")


def poloidal_flux(sys: IntegrableSystem, level, axis: Optional[ClosedOrbit] = None,
                  r_max=1.0, n_quad=64, allow_fallback=True, profile=None):
    """Poloidal flux -(1/2pi) of the potential around a toroidal loop on the
    level surface.  Without a potential, falls back to integrating
    iota dPsi_T over the profile (requires ``profile`` levels)."""
    if axis is None:
        axis = find_axis(sys.B, (0.01, 0.005), r_max=r_max)
    p_axis = float(sys.pressure(axis.points(np.array([0.0])))[0])
    if np.isclose(level, p_axis, rtol=0.0, atol=1e-15):
        return 0.0
    if sys.alpha is None:
        if not allow_fallback:
            raise MissingPotentialAndFallbackDisabled("sys.alpha absent")
        raise MissingPotentialAndFallbackDisabled(
            "poloidal flux fallback requires a flux profile; "
            "use flux_profile(..) which integrates iota dPsi_T")
    loop = toroidal_level_loop(sys, axis, level, r_max=r_max)
    return -loop_integral(sys.alpha, loop, n_quad=n_quad)


@dataclass(frozen=True)
class FluxProfile:
    levels: np.ndarray
    psi_T: np.ndarray
    psi_P: np.ndarray
    iota: np.ndarray
    derivative_method: str = "cubic-spline(Psi_P vs Psi_T), not-a-knot"

    def iota_of_psi(self):
        return CubicSpline(self.psi_T, self.iota, bc_type="not-a-knot")


def flux_profile(sys: IntegrableSystem, levels, axis: Optional[ClosedOrbit] = None,
                 r_max=1.0, flux_method="line") -> FluxProfile:
    """Fluxes and rotational transform on a family of level surfaces.

    iota is the derivative of poloidal against toroidal action, evaluated by
    a cubic spline through the (Psi_T, Psi_P) pairs.
    """
    levels = np.asarray(levels, dtype=float)
    if levels.size < 4 or np.any(np.diff(levels) <= 0):
        raise ValueError("need at least 4 strictly increasing levels")
    if axis is None:
        axis = find_axis(sys.B, (0.01, 0.005), r_max=r_max)
    psi_T = np.array([toroidal_flux(sys, lv, axis=axis, method=flux_method,
                                    r_max=r_max) for lv in levels])
    psi_P = np.array([poloidal_flux(sys, lv, axis=axis, r_max=r_max)
                      for lv in levels])
    d = np.diff(psi_T)
    if not (np.all(d > 0) or np.all(d < 0)):
        raise LevelOutOfRange("toroidal flux not strictly monotone over levels")
    order = np.argsort(psi_T)
    spl = CubicSpline(psi_T[order], psi_P[order], bc_type="not-a-knot")
    iota = spl.derivative()(psi_T)
    return FluxProfile(levels=levels, psi_T=psi_T, psi_P=psi_P, iota=iota)
