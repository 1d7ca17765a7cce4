"""First-order interval expansions of the propagation map.

For each interval the variational ODEs are integrated jointly with the
reference trajectory as one augmented RK4 system, yielding the endpoint
matrices (A_k, B_k, c_k) and dense sensitivity samples Phi, Psi, Theta at
the quadrature sub-times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    CONTROL_MAP,
    NU,
    NX,
    ControlParametrization,
    DynamicsModel,
    _check_finite,
    _interval_breakpoints,
    _segment_steps,
)


@dataclass
class IntervalLinearization:
    """Endpoint expansion A_k, B_k, c_k plus dense sub-time samples.

    For the impulsive parametrization Psi(t_k) equals the control map
    [0; I3] (the jump acts at the interval start) rather than zero.
    """

    t_k: float
    t_kp1: float
    A: np.ndarray           # (6, 6)
    B: np.ndarray           # (6, 3)
    c: np.ndarray           # (6,)
    sub_times: np.ndarray   # (Q,)
    Phi: np.ndarray         # (Q, 6, 6)
    Psi: np.ndarray         # (Q, 6, 3)
    Theta: np.ndarray       # (Q, 6)
    x_ref: np.ndarray       # (Q, 6) reference trajectory at sub-times
    x_ref_k: np.ndarray     # reference node state
    u_ref_k: np.ndarray     # reference node control

    def index_of(self, t_q: float) -> int:
        idx = np.flatnonzero(np.isclose(self.sub_times, t_q, rtol=0,
                                        atol=1e-9))
        if len(idx) == 0:
            raise ValueError(f"t={t_q} is not a stored sub-time of "
                             f"[{self.t_k}, {self.t_kp1}]")
        return int(idx[0])


def _sub_time_grid(parametrization: ControlParametrization, t_k: float,
                   t_kp1: float, q: int) -> np.ndarray:
    uniform = np.linspace(t_k, t_kp1, q)
    return _interval_breakpoints(parametrization, t_k, t_kp1, uniform)


def linearize_interval(model: DynamicsModel,
                       parametrization: ControlParametrization,
                       t_k: float, t_kp1: float, x_ref_k: np.ndarray,
                       u_ref_k: np.ndarray, q: int = 10,
                       steps: int = 32) -> IntervalLinearization:
    """Integrate the variational ODEs over one interval.

    Sub-times are q uniform points (endpoints included) plus the FBP burn
    boundary, which is also an RK4 step boundary so the jump in the
    control sensitivity never falls inside a step.
    """
    if q < 2:
        raise ValueError("need at least two sub-times")
    x_ref_k = np.asarray(x_ref_k, dtype=float)
    u_ref_k = np.asarray(u_ref_k, dtype=float)
    if not (np.all(np.isfinite(x_ref_k)) and np.all(np.isfinite(u_ref_k))):
        raise ValueError("reference point must be finite")

    sub_times = _sub_time_grid(parametrization, t_k, t_kp1, q)
    counts = _segment_steps(np.diff(sub_times), steps)

    impulse = parametrization.kind == "impulse"
    x = x_ref_k + (CONTROL_MAP @ u_ref_k if impulse else 0.0)
    phi = np.eye(NX)
    psi = CONTROL_MAP.copy() if impulse else np.zeros((NX, NU))
    theta = np.zeros(NX)

    nq = len(sub_times)
    Phi = np.empty((nq, NX, NX))
    Psi = np.empty((nq, NX, NU))
    Theta = np.empty((nq, NX))
    x_samples = np.empty((nq, NX))
    Phi[0], Psi[0], Theta[0], x_samples[0] = phi, psi, theta, x

    if parametrization.kind == "fbp":
        burn_end = t_k + parametrization.t_burn
    else:
        burn_end = None

    def pack(xv, phiv, psiv, thetav):
        return np.concatenate([xv, phiv.ravel(), psiv.ravel(), thetav])

    def unpack(y):
        xv = y[:NX]
        phiv = y[NX:NX + NX * NX].reshape(NX, NX)
        psiv = y[NX + NX * NX:NX + NX * NX + NX * NU].reshape(NX, NU)
        thetav = y[-NX:]
        return xv, phiv, psiv, thetav

    ctx = f"linearization of [{t_k}, {t_kp1}]"
    y = pack(x, phi, psi, theta)
    for seg, n_steps in enumerate(counts):
        ta, tb = sub_times[seg], sub_times[seg + 1]
        if impulse:
            u_seg = np.zeros(NU)
            dv_du = 0.0
        else:
            tm = 0.5 * (ta + tb)
            in_burn = burn_end is None or tm <= burn_end
            u_seg = u_ref_k if (parametrization.kind == "zoh" or in_burn) \
                else np.zeros(NU)
            dv_du = 1.0 if (parametrization.kind == "zoh" or in_burn) else 0.0

        def deriv(t, yv, u_c=u_seg, g=dv_du):
            xv, phiv, psiv, thetav = unpack(yv)
            a = model.jac_x(t, xv)
            dx = model.f(t, xv, u_c)
            c_aff = model.drift(t, xv) - a @ xv
            return pack(dx, a @ phiv, a @ psiv + g * CONTROL_MAP,
                        a @ thetav + c_aff)

        h = (tb - ta) / n_steps
        for i in range(n_steps):
            t = ta + i * h
            k1 = deriv(t, y)
            k2 = deriv(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = deriv(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = deriv(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(y, ctx)
        x, phi, psi, theta = unpack(y)
        x_samples[seg + 1] = x
        Phi[seg + 1], Psi[seg + 1], Theta[seg + 1] = phi, psi, theta

    return IntervalLinearization(
        t_k=t_k, t_kp1=t_kp1, A=Phi[-1].copy(), B=Psi[-1].copy(),
        c=Theta[-1].copy(), sub_times=sub_times, Phi=Phi, Psi=Psi,
        Theta=Theta, x_ref=x_samples, x_ref_k=x_ref_k, u_ref_k=u_ref_k)


def affine_predict(lin: IntervalLinearization, x: np.ndarray, u: np.ndarray,
                   t_q: float) -> np.ndarray:
    """Evaluate the affine interval model Phi(t_q) x + Psi(t_q) u + Theta(t_q)."""
    i = lin.index_of(t_q)
    return lin.Phi[i] @ np.asarray(x, float) + lin.Psi[i] @ np.asarray(u, float) \
        + lin.Theta[i]
