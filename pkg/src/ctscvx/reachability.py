"""Approximate backward reachable sets of avoid sets under linearized
free drift, and the passive-safety linearization coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import NX, DynamicsModel, _check_finite
from .geometry import Polytope, signed_distance, signed_distance_gradient
from .uncertainty import tighten_halfspace


@dataclass
class FreeDriftSensitivity:
    """First-order sensitivities of the free drift from a fixed start time."""

    t_start: float
    tau: np.ndarray       # (M,)
    Phi: np.ndarray       # (M, 6, 6)
    Theta: np.ndarray     # (M, 6)
    x_drift: np.ndarray   # (M, 6) reference free-drift trajectory

    def index_of(self, tau_m: float) -> int:
        idx = np.flatnonzero(np.isclose(self.tau, tau_m, rtol=0, atol=1e-9))
        if len(idx) == 0:
            raise ValueError(f"tau={tau_m} is not on the safety grid")
        return int(idx[0])


def drift_sensitivities(model: DynamicsModel, t_start: float,
                        x_ref: np.ndarray, t_safe: float, m_tau: int,
                        steps_per_sample: int = 4) -> FreeDriftSensitivity:
    """Joint RK4 integration of the free drift and its sensitivities.

    The linearization is anchored at the reference drift trajectory from
    x_ref, so Phi(tau) z + Theta(tau) approximates the drift of states z
    near the reference.
    """
    if m_tau < 2:
        raise ValueError("need at least two safety-horizon samples")
    x = np.array(x_ref, dtype=float)
    tau = np.linspace(0.0, t_safe, m_tau)
    phi = np.eye(NX)
    theta = np.zeros(NX)

    Phi = np.empty((m_tau, NX, NX))
    Theta = np.empty((m_tau, NX))
    xs = np.empty((m_tau, NX))
    Phi[0], Theta[0], xs[0] = phi, theta, x

    def pack(xv, phiv, thetav):
        return np.concatenate([xv, phiv.ravel(), thetav])

    def unpack(y):
        return (y[:NX], y[NX:NX + NX * NX].reshape(NX, NX), y[-NX:])

    def deriv(t_abs, y):
        xv, phiv, thetav = unpack(y)
        a = model.jac_x(t_abs, xv)
        dx = model.drift(t_abs, xv)
        c_aff = dx - a @ xv
        return pack(dx, a @ phiv, a @ thetav + c_aff)

    y = pack(x, phi, theta)
    ctx = f"free-drift sensitivities from t={t_start}"
    for m in range(1, m_tau):
        h = (tau[m] - tau[m - 1]) / steps_per_sample
        for i in range(steps_per_sample):
            t_abs = t_start + tau[m - 1] + i * h
            k1 = deriv(t_abs, y)
            k2 = deriv(t_abs + 0.5 * h, y + 0.5 * h * k1)
            k3 = deriv(t_abs + 0.5 * h, y + 0.5 * h * k2)
            k4 = deriv(t_abs + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(y, ctx)
        xs[m], Phi[m], Theta[m] = unpack(y)

    return FreeDriftSensitivity(t_start=t_start, tau=tau, Phi=Phi,
                                Theta=Theta, x_drift=xs)


def approx_brs(avoid: Polytope, sens: FreeDriftSensitivity,
               tau_m: float) -> Polytope:
    """Half-space approximation of the backward reachable set at tau_m.

    Membership in the returned open polytope is equivalent to the
    linearized drift Phi(tau) z + Theta(tau) landing inside the avoid set.
    """
    i = sens.index_of(tau_m)
    h_new = avoid.H @ sens.Phi[i]
    rhs = avoid.h - avoid.H @ sens.Theta[i]
    return Polytope(h_new, rhs, open=True, check_interior=False)


def passive_safety_coeffs(brs: Polytope, x_ref_t: np.ndarray,
                          sigma_t: np.ndarray, beta_ps: float,
                          eps_d: float = 1e-9,
                          near_boundary_normal: bool = True):
    """Linearized tightened passive-safety constraint a'x + b >= c.

    Returns (a, b, c) with a the signed-distance gradient at the
    reference, b the affine offset, and c the chance-constraint backoff.
    """
    x_ref_t = np.asarray(x_ref_t, dtype=float)
    d = signed_distance(brs, x_ref_t)
    a = signed_distance_gradient(brs, x_ref_t, eps_d=eps_d,
                                 near_boundary_normal=near_boundary_normal)
    b = d - float(a @ x_ref_t)
    c = tighten_halfspace(a, sigma_t, beta_ps, NX)
    return a, b, c
