"""Closed-form integrable systems used as oracles throughout the package.

All models live on the unit-radius chart, carry analytic Jacobians, analytic
pressure derivatives and closed-form potentials alpha (d alpha = i_B Omega)
and kappa (d kappa = i_J Omega).

* Model A      -- elliptic axis at the origin, rotational transform
                  iota(psi) = iota0 + iota2 psi, pressure p = psi.
                  Optional volume density rho(phi) = 1 + rho_cos*cos(phi)
                  (the field is divided by rho so it stays divergence free,
                  leaving field lines, fluxes and the flux form unchanged).
* Model A-MHS  -- constant-transform variant that is magnetohydrostatic for
                  the flat chart metric: J = 2 iota0 d_phi and
                  p = p0 - 2 iota0^2 psi.
* Model B      -- direct hyperbolic: B = d_phi + k x d_x - k y d_y, p = k x y.
* Model C      -- Model B conjugated by the cross-section rotation by phi/2;
                  reflection hyperbolic (negative real Floquet multipliers),
                  with double-cover semantics handled downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .diffeo import pushforward_system, rotate_by_phi
from .errors import InvalidParameter
from .fields import (
    IntegrableSystem,
    Metric,
    OneForm,
    VectorField,
    VolumeForm,
    euclidean_metric,
    unit_volume,
)

PARABOLIC_EPS = 1e-9


@dataclass(frozen=True)
class ModelA:
    iota0: float
    iota2: float = 0.0
    a0: float = 0.0
    rho_cos: float = 0.0


@dataclass(frozen=True)
class ModelAMHS:
    iota0: float
    p0: float = 0.0


@dataclass(frozen=True)
class ModelB:
    k: float


@dataclass(frozen=True)
class ModelC:
    k: float


ModelSpec = Union[ModelA, ModelAMHS, ModelB, ModelC]


def _check_not_parabolic(iota0):
    if abs(2.0 * iota0 - round(2.0 * iota0)) < PARABOLIC_EPS:
        raise InvalidParameter(
            "on-axis transform must not be a half-integer (parabolic axis)",
            iota0=iota0)


def _psi(pts):
    return 0.5 * (pts[:, 0] ** 2 + pts[:, 1] ** 2)


def make_model(spec: ModelSpec) -> IntegrableSystem:
    """Instantiate one of the analytic model systems after validating
    parameters (half-integer on-axis transform and k = 0 are rejected as
    parabolic; the density profile must stay positive)."""
    if isinstance(spec, ModelA):
        return _make_model_a(spec)
    if isinstance(spec, ModelAMHS):
        return _make_model_a_mhs(spec)
    if isinstance(spec, ModelB):
        return _make_model_b(spec)
    if isinstance(spec, ModelC):
        return _make_model_c(spec)
    raise InvalidParameter(f"unknown model spec {spec!r}")


def _make_model_a(spec: ModelA) -> IntegrableSystem:
    iota0, iota2, a0, amp = spec.iota0, spec.iota2, spec.a0, spec.rho_cos
    _check_not_parabolic(iota0)
    if abs(iota0) > 5 or abs(iota2) > 10 or abs(a0) > 5:
        raise InvalidParameter("Model A parameters out of validated range")
    if abs(amp) >= 0.9:
        raise InvalidParameter("density profile must stay positive",
                               rho_cos=amp)
    if amp != 0.0 and a0 != 0.0:
        raise InvalidParameter(
            "a0 must vanish with a phi-dependent density (divergence)")

    def iota(psi):
        return iota0 + iota2 * psi

    def rho(phi):
        return 1.0 + amp * np.cos(phi)

    def drho(phi):
        return -amp * np.sin(phi)

    def B_eval(pts):
        x, y, phi = pts[:, 0], pts[:, 1], pts[:, 2]
        io = iota(_psi(pts))
        r = rho(phi)
        return np.stack([-io * y / r, io * x / r, 1.0 / r], axis=-1)

    def B_jac(pts):
        n = pts.shape[0]
        x, y, phi = pts[:, 0], pts[:, 1], pts[:, 2]
        io = iota(_psi(pts))
        r = rho(phi)
        dr = drho(phi)
        J = np.zeros((n, 3, 3))
        J[:, 0, 0] = -iota2 * x * y / r
        J[:, 0, 1] = (-io - iota2 * y * y) / r
        J[:, 0, 2] = io * y * dr / r ** 2
        J[:, 1, 0] = (io + iota2 * x * x) / r
        J[:, 1, 1] = iota2 * x * y / r
        J[:, 1, 2] = -io * x * dr / r ** 2
        J[:, 2, 2] = -dr / r ** 2
        return J

    def J_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        f = 1.0 + iota(_psi(pts)) * a0
        out = np.stack([-f * y, f * x, np.full_like(x, a0)], axis=-1)
        return out

    def J_jac(pts):
        n = pts.shape[0]
        x, y = pts[:, 0], pts[:, 1]
        f = 1.0 + iota(_psi(pts)) * a0
        J = np.zeros((n, 3, 3))
        J[:, 0, 0] = -a0 * iota2 * x * y
        J[:, 0, 1] = -f - a0 * iota2 * y * y
        J[:, 1, 0] = f + a0 * iota2 * x * x
        J[:, 1, 1] = a0 * iota2 * x * y
        return J

    def psi_p(psi):
        return iota0 * psi + 0.5 * iota2 * psi ** 2

    def alpha_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([-0.5 * y, 0.5 * x, -psi_p(_psi(pts))], axis=-1)

    def kappa_eval(pts):
        x, y, phi = pts[:, 0], pts[:, 1], pts[:, 2]
        psi = _psi(pts)
        r = rho(phi)
        ax = 0.5 * a0 * np.stack([-y, x, np.zeros_like(x)], axis=-1)
        ax[:, 2] = -(psi * r + a0 * psi_p(psi))
        return ax

    omega = VolumeForm(
        rho=lambda pts: rho(pts[:, 2]),
        grad_rho=lambda pts: np.stack(
            [np.zeros(pts.shape[0]), np.zeros(pts.shape[0]), drho(pts[:, 2])],
            axis=-1),
    )

    return IntegrableSystem(
        B=VectorField(eval=B_eval, jacobian=B_jac),
        J=VectorField(eval=J_eval, jacobian=J_jac),
        p=_psi,
        omega=omega,
        alpha=OneForm(eval=alpha_eval),
        kappa=OneForm(eval=kappa_eval),
        dp=lambda pts: np.stack([pts[:, 0], pts[:, 1],
                                 np.zeros(pts.shape[0])], axis=-1),
        hess_p=lambda pts: np.broadcast_to(
            np.diag([1.0, 1.0, 0.0]), (pts.shape[0], 3, 3)).copy(),
        name="A",
        meta={"model": "A", "iota0": iota0, "iota2": iota2, "a0": a0,
              "rho_cos": amp},
    )


def _make_model_a_mhs(spec: ModelAMHS) -> IntegrableSystem:
    iota0, p0 = spec.iota0, spec.p0
    _check_not_parabolic(iota0)
    if iota0 == 0.0:
        raise InvalidParameter("iota0 = 0 gives a degenerate axis for A-MHS")

    def B_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([-iota0 * y, iota0 * x, np.ones_like(x)], axis=-1)

    def B_jac(pts):
        n = pts.shape[0]
        J = np.zeros((n, 3, 3))
        J[:, 0, 1] = -iota0
        J[:, 1, 0] = iota0
        return J

    def J_eval(pts):
        n = pts.shape[0]
        out = np.zeros((n, 3))
        out[:, 2] = 2.0 * iota0
        return out

    def p_eval(pts):
        return p0 - 2.0 * iota0 ** 2 * _psi(pts)

    def alpha_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([-0.5 * y, 0.5 * x, -iota0 * _psi(pts)], axis=-1)

    def kappa_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([-iota0 * y, iota0 * x, np.zeros_like(x)], axis=-1)

    return IntegrableSystem(
        B=VectorField(eval=B_eval, jacobian=B_jac),
        J=VectorField(eval=J_eval,
                      jacobian=lambda pts: np.zeros((pts.shape[0], 3, 3))),
        p=p_eval,
        omega=unit_volume(),
        alpha=OneForm(eval=alpha_eval),
        kappa=OneForm(eval=kappa_eval),
        metric=euclidean_metric(),
        dp=lambda pts: np.stack(
            [-2 * iota0 ** 2 * pts[:, 0], -2 * iota0 ** 2 * pts[:, 1],
             np.zeros(pts.shape[0])], axis=-1),
        hess_p=lambda pts: np.broadcast_to(
            np.diag([-2 * iota0 ** 2, -2 * iota0 ** 2, 0.0]),
            (pts.shape[0], 3, 3)).copy(),
        name="A-MHS",
        meta={"model": "A-MHS", "iota0": iota0, "p0": p0},
    )


def _make_model_b(spec: ModelB) -> IntegrableSystem:
    k = spec.k
    if k == 0.0:
        raise InvalidParameter("k = 0 gives a parabolic axis for Model B")
    if abs(k) > 2.0:
        raise InvalidParameter("|k| too large for the unit chart", k=k)

    def B_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([k * x, -k * y, np.ones_like(x)], axis=-1)

    def B_jac(pts):
        n = pts.shape[0]
        J = np.zeros((n, 3, 3))
        J[:, 0, 0] = k
        J[:, 1, 1] = -k
        return J

    def J_eval(pts):
        n = pts.shape[0]
        out = np.zeros((n, 3))
        out[:, 2] = 1.0
        return out

    def alpha_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([-0.5 * y, 0.5 * x, k * x * y], axis=-1)

    def kappa_eval(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([-0.5 * y, 0.5 * x, np.zeros_like(x)], axis=-1)

    return IntegrableSystem(
        B=VectorField(eval=B_eval, jacobian=B_jac),
        J=VectorField(eval=J_eval,
                      jacobian=lambda pts: np.zeros((pts.shape[0], 3, 3))),
        p=lambda pts: k * pts[:, 0] * pts[:, 1],
        omega=unit_volume(),
        alpha=OneForm(eval=alpha_eval),
        kappa=OneForm(eval=kappa_eval),
        dp=lambda pts: np.stack([k * pts[:, 1], k * pts[:, 0],
                                 np.zeros(pts.shape[0])], axis=-1),
        hess_p=lambda pts: np.broadcast_to(
            np.array([[0.0, k, 0.0], [k, 0.0, 0.0], [0.0, 0.0, 0.0]]),
            (pts.shape[0], 3, 3)).copy(),
        name="B",
        meta={"model": "B", "k": k},
    )


def _make_model_c(spec: ModelC) -> IntegrableSystem:
    """Model B conjugated by the phi/2 cross-section rotation.

    The half-angle rotation is only 4pi-periodic as a map, but Model B is
    invariant under the deck transformation (x, y) -> (-x, -y), so all pushed
    fields and potentials are honest 2pi-periodic objects on the single
    cover.  The monodromy over 2pi is -diag(e^{2 pi k}, e^{-2 pi k}).
    """
    base = _make_model_b(ModelB(spec.k))
    sys = pushforward_system(base, rotate_by_phi(0.5))
    return sys.with_(name="C", meta={"model": "C", "k": spec.k,
                                     "double_cover": True})
