"""Integral (isoperimetric) reformulation of the continuous-time tightened
path constraints, and its linearization about the reference trajectory.

Per interval there are three residual rows: passive safety (integrated over
the safety horizon), and the two approach-cone constraint functions.  Each
row is the time integral of an exterior penalty |s|+^2 = max(s, 0)^2, so a
zero residual certifies satisfaction at every quadrature point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .discretize import IntervalLinearization
from .dynamics import NX, DynamicsModel
from .geometry import ConeSpec, Polytope, approach_cone_g
from .reachability import approx_brs, drift_sensitivities, passive_safety_coeffs
from .uncertainty import UncertaintyConfig, tighten_halfspace

N_ROWS = 3  # passive safety, cone g1, cone g2


def plus_penalty(s):
    """Differentiable exterior penalty |s|+^2 = max(s, 0)^2 (elementwise)."""
    return np.square(np.maximum(s, 0.0))


@dataclass
class IntervalConstraintData:
    """Tightened-constraint coefficients on an interval's quadrature grid.

    Passive-safety coefficients satisfy a'x + b ~ signed distance to the
    backward reachable set, so the constraint is a'x + b >= c and the
    penalty argument is -a'x - b + c.  Cone rows use a'x + b + c <= 0.
    """

    sub_times: np.ndarray   # (Q,)
    tau: np.ndarray         # (M,)
    ps_a: np.ndarray        # (Q, M, 6)
    ps_b: np.ndarray        # (Q, M)
    ps_c: np.ndarray        # (Q, M)
    cone_a: np.ndarray      # (Q, 2, 6)
    cone_b: np.ndarray      # (Q, 2)
    cone_c: np.ndarray      # (Q, 2)

    def __post_init__(self):
        q, m = len(self.sub_times), len(self.tau)
        if self.ps_a.shape != (q, m, NX) or self.cone_a.shape != (q, 2, NX):
            raise ValueError("constraint coefficient shapes inconsistent "
                             "with the quadrature grids")

    def penalty_args(self, states: np.ndarray):
        """Penalty arguments at each quadrature point for dense states (Q,6).

        Returns (ps (Q, M), cone (Q, 2)); positive values are violations.
        """
        states = np.asarray(states, dtype=float)
        ps = -np.einsum("qmi,qi->qm", self.ps_a, states) - self.ps_b + self.ps_c
        cone = np.einsum("qji,qi->qj", self.cone_a, states) + self.cone_b \
            + self.cone_c
        return ps, cone


def constraint_residual(data: IntervalConstraintData,
                        states: np.ndarray) -> np.ndarray:
    """Trapezoidal quadrature of the three penalty integrals (3-vector)."""
    ps, cone = data.penalty_args(states)
    inner = trapezoid(plus_penalty(ps), data.tau, axis=1)       # (Q,)
    r_ps = trapezoid(inner, data.sub_times)
    r_cone = trapezoid(plus_penalty(cone), data.sub_times, axis=0)
    return np.array([r_ps, r_cone[0], r_cone[1]])


def max_violation(data: IntervalConstraintData,
                  states: np.ndarray) -> np.ndarray:
    """Largest pointwise constraint violation per row over the grid."""
    ps, cone = data.penalty_args(states)
    return np.array([max(float(np.max(ps)), 0.0),
                     max(float(np.max(cone[:, 0])), 0.0),
                     max(float(np.max(cone[:, 1])), 0.0)])


@dataclass
class ConstraintLinearization:
    """Affine model of the residual: residual ~ Gx x_k + Gu u_k + h.

    The affine value at the reference node state/control reproduces the
    reference residual exactly (same quadrature).  row_scale holds the
    normalization 1/(1 + reference residual) applied by the subproblem so
    the three rows enter at comparable magnitudes.
    """

    Gx: np.ndarray            # (3, 6)
    Gu: np.ndarray            # (3, 3)
    h: np.ndarray             # (3,)
    residual_ref: np.ndarray  # (3,)
    row_scale: np.ndarray     # (3,)

    def __post_init__(self):
        for arr in (self.Gx, self.Gu, self.h, self.residual_ref):
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(
                    "non-finite constraint linearization")


def linearize_constraints(lin: IntervalLinearization,
                          data: IntervalConstraintData) -> ConstraintLinearization:
    """Linearize the penalty integrals about the reference trajectory.

    Pointwise, with p the stacked penalty rows and g their gradients in the
    dense state, the affine model is g(t) x(t) + [p(t) - g(t) xref(t)];
    substituting x(t) = Phi x_k + Psi u_k + Theta and integrating gives Gx,
    Gu and h (the Theta term is folded into h so the model is a function of
    the node variables alone).
    """
    if not np.allclose(lin.sub_times, data.sub_times, rtol=0, atol=1e-9):
        raise ValueError("linearization and constraint data use different "
                         "quadrature sub-times")
    ps, cone = data.penalty_args(lin.x_ref)
    q = len(data.sub_times)

    g_rows = np.empty((q, N_ROWS, NX))
    p_vals = np.empty((q, N_ROWS))
    # Passive safety: d/dx |−a'x−b+c|+^2 = −2|·|+ a', integrated over tau.
    act_ps = 2.0 * np.maximum(ps, 0.0)                          # (Q, M)
    g_rows[:, 0, :] = trapezoid(-act_ps[:, :, None] * data.ps_a,
                                data.tau, axis=1)
    p_vals[:, 0] = trapezoid(plus_penalty(ps), data.tau, axis=1)
    # Cone rows: d/dx |a'x+b+c|+^2 = 2|·|+ a'.
    act_cone = 2.0 * np.maximum(cone, 0.0)                      # (Q, 2)
    g_rows[:, 1:, :] = act_cone[:, :, None] * data.cone_a
    p_vals[:, 1:] = plus_penalty(cone)

    gx_t = np.einsum("qri,qij->qrj", g_rows, lin.Phi)
    gu_t = np.einsum("qri,qij->qrj", g_rows, lin.Psi)
    h_t = p_vals + np.einsum("qri,qi->qr", g_rows, lin.Theta - lin.x_ref)

    Gx = trapezoid(gx_t, data.sub_times, axis=0)
    Gu = trapezoid(gu_t, data.sub_times, axis=0)
    h = trapezoid(h_t, data.sub_times, axis=0)
    residual_ref = trapezoid(p_vals, data.sub_times, axis=0)
    row_scale = 1.0 / (1.0 + residual_ref)
    return ConstraintLinearization(Gx=Gx, Gu=Gu, h=h,
                                   residual_ref=residual_ref,
                                   row_scale=row_scale)


def build_interval_data(lin: IntervalLinearization, model: DynamicsModel,
                        avoid: Polytope, dense_covs: np.ndarray,
                        ucfg: UncertaintyConfig, t_safe: float, m_tau: int,
                        cone: Optional[ConeSpec] = None,
                        drift_steps_per_sample: int = 4,
                        cone_literal_indexing: bool = False) -> IntervalConstraintData:
    """Assemble tightened-constraint coefficients for one interval.

    For each quadrature sub-time: integrate free-drift sensitivities from
    the reference state, form the backward-reachable-set approximation at
    every safety-horizon sample, and take the signed-distance linearization
    with its chance-constraint backoff.  Cone rows are linearized about the
    reference position and tightened with the dense covariance; when no
    cone is supplied (non-terminal phases) the rows are identically zero.

    cone_literal_indexing reproduces a published indexing variant in which
    both cone rows share the first constraint's gradient and the second
    constraint's value; it exists for comparison only.
    """
    sub_times = lin.sub_times
    q = len(sub_times)
    tau = np.linspace(0.0, t_safe, m_tau)
    ps_a = np.empty((q, m_tau, NX))
    ps_b = np.empty((q, m_tau))
    ps_c = np.empty((q, m_tau))
    cone_a = np.zeros((q, 2, NX))
    cone_b = np.zeros((q, 2))
    cone_c = np.zeros((q, 2))

    for iq, t_q in enumerate(sub_times):
        x_ref_t = lin.x_ref[iq]
        sigma_t = dense_covs[iq]
        sens = drift_sensitivities(model, float(t_q), x_ref_t, t_safe, m_tau,
                                   steps_per_sample=drift_steps_per_sample)
        for im, tau_m in enumerate(tau):
            brs = approx_brs(avoid, sens, tau_m)
            try:
                a, b, c = passive_safety_coeffs(brs, x_ref_t, sigma_t,
                                                ucfg.beta_ps)
            except Exception as exc:
                raise RuntimeError(
                    "passive-safety linearization failed at "
                    f"t={float(t_q):.6g}, tau={tau_m:.6g}") from exc
            ps_a[iq, im], ps_b[iq, im], ps_c[iq, im] = a, b, c

        if cone is not None:
            g, jac = approach_cone_g(cone, x_ref_t)
            for j in range(2):
                a_j = jac[0] if cone_literal_indexing else jac[j]
                g_j = g[1] if cone_literal_indexing else g[j]
                cone_a[iq, j] = a_j
                cone_b[iq, j] = g_j - float(a_j @ x_ref_t)
                cone_c[iq, j] = tighten_halfspace(a_j, sigma_t,
                                                  ucfg.beta_ac, NX)

    return IntervalConstraintData(sub_times=np.asarray(sub_times, float),
                                  tau=tau, ps_a=ps_a, ps_b=ps_b, ps_c=ps_c,
                                  cone_a=cone_a, cone_b=cone_b, cone_c=cone_c)
