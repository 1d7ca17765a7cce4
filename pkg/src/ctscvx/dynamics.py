"""Relative-motion dynamics, control parametrizations, and RK4 propagation.

Internal units are fixed to hr / km / (km/hr) throughout. States are
6-vectors (r, v), controls are 3-vectors entering additively through
[0; I3] (mass-normalized acceleration for ZOH/FBP, velocity impulse for
the impulsive parametrization).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

NX = 6
NU = 3

# Control influence matrix [0; I3]: control enters additively in the
# velocity derivatives for every model.
CONTROL_MAP = np.vstack([np.zeros((3, 3)), np.eye(3)])


class DivergenceError(RuntimeError):
    """State became non-finite during numerical integration."""


@dataclass(frozen=True)
class ControlParametrization:
    """Per-interval control input shape: impulse, ZOH, or finite-burn pulse."""

    kind: str  # "impulse" | "zoh" | "fbp"
    t_burn: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("impulse", "zoh", "fbp"):
            raise ValueError(f"unknown control parametrization {self.kind!r}")
        if self.kind == "fbp":
            if self.t_burn is None or self.t_burn <= 0.0:
                raise ValueError("fbp requires t_burn > 0")
        elif self.t_burn is not None:
            raise ValueError("t_burn is only meaningful for fbp")

    def cost_coefficient(self, t_k: float, t_kp1: float) -> float:
        """Fuel-cost weight for this interval: dt for ZOH, 1 otherwise."""
        return (t_kp1 - t_k) if self.kind == "zoh" else 1.0


def eval_control(parametrization: ControlParametrization, t: float, t_k: float,
                 u_k: np.ndarray) -> np.ndarray:
    """Pointwise control value at time t in [t_k, t_{k+1}]."""
    u_k = np.asarray(u_k, dtype=float)
    if parametrization.kind == "impulse":
        raise ValueError("impulse has no pointwise value")
    if parametrization.kind == "zoh":
        return u_k.copy()
    # fbp
    if t <= t_k + parametrization.t_burn:
        return u_k.copy()
    return np.zeros(NU)


@dataclass(frozen=True)
class TimeGrid:
    """Node times with phase boundaries N2 < N3 and safety horizon t_safe.

    Node indices are 0-based internally: phase 1 covers intervals
    [0, n2-1), phase 2 [n2-1, n3-1), phase 3 [n3-1, N-1).
    """

    nodes: np.ndarray
    n2: int
    n3: int
    t_safe: float

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        if self.nodes.ndim != 1 or len(self.nodes) < 2:
            raise ValueError("need at least two grid nodes")
        if not np.all(np.diff(self.nodes) > 0):
            raise ValueError("grid nodes must be strictly increasing")
        if not (0 < self.n2 < self.n3 < len(self.nodes) - 1):
            raise ValueError("phase indices must satisfy 1 < N2 < N3 < N")
        if self.t_safe <= 0:
            raise ValueError("t_safe (safety horizon) must be positive")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_intervals(self) -> int:
        return len(self.nodes) - 1

    def phase_of_interval(self, k: int) -> int:
        """Mission phase (1, 2 or 3) of interval k (0-based)."""
        if k < self.n2:
            return 1
        if k < self.n3:
            return 2
        return 3

    def phase_of_time(self, t: float) -> int:
        """Mission phase of a drift start time t (avoid-set schedule)."""
        if t < self.nodes[self.n2]:
            return 1
        if t < self.nodes[self.n3]:
            return 2
        return 3


class DynamicsModel:
    """Abstract relative-motion vector field with analytic Jacobians.

    time_invariant marks autonomous fields, letting batch consumers group
    integrations that start at different epochs.
    """

    time_invariant = False

    def f(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.drift(t, x) + CONTROL_MAP @ u

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jac_x(self, t: float, x: np.ndarray) -> np.ndarray:
        """State Jacobian of f (independent of u: control is additive)."""
        raise NotImplementedError

    def jac_u(self) -> np.ndarray:
        return CONTROL_MAP

    def drift_many(self, t: float, X: np.ndarray) -> np.ndarray:
        """Vectorized drift for a (B, 6) batch of states."""
        return np.stack([self.drift(t, x) for x in X])


class CWModel(DynamicsModel):
    """Clohessy-Wiltshire relative motion with mean motion n (rad/hr).

    Axes: r1 radial, r2 along-track, r3 cross-track.
    """

    time_invariant = True

    def __init__(self, n: float):
        if n <= 0:
            raise ValueError("mean motion must be positive")
        self.n = float(n)
        k = np.diag([3 * n**2, 0.0, -(n**2)])
        c = np.array([[0.0, 2 * n, 0.0], [-2 * n, 0.0, 0.0], [0.0, 0.0, 0.0]])
        self._A = np.block([[np.zeros((3, 3)), np.eye(3)], [k, c]])

    def drift(self, t, x):
        return self._A @ x

    def jac_x(self, t, x):
        return self._A

    def drift_many(self, t, X):
        return X @ self._A.T


class StaticModel(DynamicsModel):
    """Zero drift field; useful for testing."""

    time_invariant = True

    def drift(self, t, x):
        return np.zeros(NX)

    def jac_x(self, t, x):
        return np.zeros((NX, NX))

    def drift_many(self, t, X):
        return np.zeros_like(X)


class DoubleIntegratorModel(DynamicsModel):
    """Pure double integrator: rdot = v, vdot = u."""

    time_invariant = True

    _A = np.block([[np.zeros((3, 3)), np.eye(3)], [np.zeros((3, 6))]])

    def drift(self, t, x):
        return self._A @ x

    def jac_x(self, t, x):
        return self._A

    def drift_many(self, t, X):
        return X @ self._A.T


@dataclass
class ReferenceOrbit:
    """Sampled reference orbit with cubic interpolation (physical units)."""

    times: np.ndarray
    states: np.ndarray  # (M, 6)
    _spline: CubicSpline = field(init=False, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape != (len(self.times), NX):
            raise ValueError("reference orbit states must be (M, 6)")
        self._spline = CubicSpline(self.times, self.states, axis=0)

    def __call__(self, t: float) -> np.ndarray:
        return self._spline(t)

    @classmethod
    def from_csv(cls, path) -> "ReferenceOrbit":
        data = np.genfromtxt(path, delimiter=",", names=True)
        cols = ["t", "r1", "r2", "r3", "v1", "v2", "v3"]
        missing = [c for c in cols if c not in (data.dtype.names or ())]
        if missing:
            raise ValueError(f"reference orbit CSV missing columns {missing}")
        times = data["t"]
        states = np.column_stack([data[c] for c in cols[1:]])
        return cls(times, states)


# Earth-Moon system defaults for the CR3BP surrogate.
EARTH_MOON_MU = 1.215058560962404e-2
EARTH_MOON_LU_KM = 384400.0
EARTH_MOON_TU_HR = 27.321661 * 24.0 / (2.0 * np.pi)


def cr3bp_field(mu: float, w: np.ndarray) -> np.ndarray:
    """Canonical CR3BP vector field in the rotating frame."""
    x, y, z, vx, vy, vz = w
    d1 = np.array([x + mu, y, z])
    d2 = np.array([x - 1.0 + mu, y, z])
    r1 = np.linalg.norm(d1)
    r2 = np.linalg.norm(d2)
    acc = -(1.0 - mu) * d1 / r1**3 - mu * d2 / r2**3
    acc[0] += x + 2.0 * vy
    acc[1] += y - 2.0 * vx
    return np.concatenate([w[3:], acc])


def cr3bp_jacobian(mu: float, w: np.ndarray) -> np.ndarray:
    """State Jacobian of the canonical CR3BP field."""
    d1 = np.array([w[0] + mu, w[1], w[2]])
    d2 = np.array([w[0] - 1.0 + mu, w[1], w[2]])
    r1 = np.linalg.norm(d1)
    r2 = np.linalg.norm(d2)
    uxx = np.diag([1.0, 1.0, 0.0])
    uxx = uxx - (1.0 - mu) * (np.eye(3) / r1**3 - 3.0 * np.outer(d1, d1) / r1**5)
    uxx = uxx - mu * (np.eye(3) / r2**3 - 3.0 * np.outer(d2, d2) / r2**5)
    cor = np.array([[0.0, 2.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return np.block([[np.zeros((3, 3)), np.eye(3)], [uxx, cor]])


class CR3BPRelativeModel(DynamicsModel):
    """Relative motion about a stored CR3BP reference orbit.

    The free drift is f(t, x) = fc(x + z(t)) - fc(z(t)) with fc the CR3BP
    field and z(t) the interpolated reference orbit, all expressed in
    km / hr at the interface.
    """

    def __init__(self, reference: ReferenceOrbit, mu: float = EARTH_MOON_MU,
                 length_unit_km: float = EARTH_MOON_LU_KM,
                 time_unit_hr: float = EARTH_MOON_TU_HR):
        self.reference = reference
        self.mu = float(mu)
        self.lu = float(length_unit_km)
        self.tu = float(time_unit_hr)
        self._scale = np.concatenate([np.full(3, self.lu),
                                      np.full(3, self.lu / self.tu)])

    def _to_canonical(self, x: np.ndarray) -> np.ndarray:
        return x / self._scale

    def drift(self, t, x):
        zc = self._to_canonical(self.reference(t))
        xc = self._to_canonical(np.asarray(x, dtype=float))
        fc = cr3bp_field(self.mu, xc + zc) - cr3bp_field(self.mu, zc)
        return self._scale * fc / self.tu

    def jac_x(self, t, x):
        zc = self._to_canonical(self.reference(t))
        xc = self._to_canonical(np.asarray(x, dtype=float))
        jc = cr3bp_jacobian(self.mu, xc + zc)
        return (self._scale[:, None] * jc / self._scale[None, :]) / self.tu


def _check_finite(x: np.ndarray, context: str):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"state diverged during {context}")


def _rk4_steps(deriv, t0: float, x0: np.ndarray, t1: float, steps: int,
               context: str) -> np.ndarray:
    """Fixed-step classical RK4 from t0 to t1."""
    x = np.array(x0, dtype=float)
    h = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * h
        k1 = deriv(t, x)
        k2 = deriv(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = deriv(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = deriv(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(x, context)
    return x


def _segment_steps(seg_lengths: np.ndarray, total_steps: int) -> list[int]:
    """Distribute a fixed step budget across segments, at least one each."""
    total = float(np.sum(seg_lengths))
    return [max(1, int(np.ceil(total_steps * seg / total)))
            for seg in seg_lengths]


def _interval_breakpoints(parametrization: ControlParametrization, t_k: float,
                          t_kp1: float, sub_times=None) -> np.ndarray:
    """Sorted breakpoints: endpoints, requested sub-times, burn boundary."""
    pts = {t_k, t_kp1}
    if sub_times is not None:
        pts.update(float(t) for t in sub_times)
    if parametrization.kind == "fbp":
        tb = t_k + parametrization.t_burn
        if tb > t_kp1 + 1e-12:
            raise ValueError("burn duration exceeds interval length")
        pts.add(min(tb, t_kp1))
    out = np.array(sorted(pts))
    if out[0] < t_k - 1e-12 or out[-1] > t_kp1 + 1e-12:
        raise ValueError("sub-times must lie within the interval")
    return out


def integrate_interval(model: DynamicsModel,
                       parametrization: ControlParametrization,
                       t_k: float, t_kp1: float, x_k: np.ndarray,
                       u_k: np.ndarray, steps: int = 32,
                       sub_times=None):
    """Propagate one interval under the parametrized control.

    Returns (x_{k+1}, samples) where samples maps each requested sub-time
    to the state there. Impulse controls are applied as a velocity jump at
    t_k before integrating the drift.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x_k, dtype=float)
    u = np.asarray(u_k, dtype=float)
    if parametrization.kind == "impulse":
        x = x + CONTROL_MAP @ u

    bps = _interval_breakpoints(parametrization, t_k, t_kp1, sub_times)
    counts = _segment_steps(np.diff(bps), steps)
    samples = {}
    if np.isclose(bps[0], t_k):
        samples[float(bps[0])] = x.copy()
    ctx = f"interval [{t_k}, {t_kp1}]"
    for (ta, tb), n in zip(zip(bps[:-1], bps[1:]), counts):
        if parametrization.kind == "impulse":
            deriv = model.drift
        else:
            # Control is constant on each segment (breakpoints include the
            # burn boundary), so evaluate it at the segment midpoint.
            u_seg = eval_control(parametrization, 0.5 * (ta + tb), t_k, u)
            deriv = lambda t, xx, us=u_seg: model.f(t, xx, us)
        x = _rk4_steps(deriv, ta, x, tb, n, ctx)
        samples[float(tb)] = x.copy()
    x_end = samples[float(bps[-1])]
    if sub_times is not None:
        samples = {float(t): samples[float(t)] for t in sub_times}
    return x_end, samples


def free_drift(model: DynamicsModel, t_start: float, x_start: np.ndarray,
               horizon: float, n_samples: int, steps_per_sample: int = 4):
    """Integrate the uncontrolled motion over [0, horizon].

    Returns (tau_grid, states) with states[i] the drift state at
    t_start + tau_grid[i]; tau_grid has n_samples uniform points.
    """
    if n_samples < 2:
        raise ValueError("need at least two safety-horizon samples")
    tau = np.linspace(0.0, horizon, n_samples)
    out = np.empty((n_samples, NX))
    x = np.array(x_start, dtype=float)
    out[0] = x
    ctx = f"free drift from t={t_start}"
    for i in range(1, n_samples):
        x = _rk4_steps(model.drift, t_start + tau[i - 1], x,
                       t_start + tau[i], steps_per_sample, ctx)
        out[i] = x
    return tau, out


def free_drift_batch(model: DynamicsModel, t_start: float,
                     X: np.ndarray, horizon: float, n_samples: int,
                     steps_per_sample: int = 4):
    """Vectorized free drift for a batch of start states sharing t_start.

    X is (B, 6). Yields (tau_m, states) pairs with states of shape (B, 6);
    intended for streaming safety checks without materializing the full
    (B, M, 6) history.
    """
    tau = np.linspace(0.0, horizon, n_samples)
    x = np.array(X, dtype=float)
    yield tau[0], x.copy()
    h_total = horizon / (n_samples - 1)
    h = h_total / steps_per_sample
    t_rel = 0.0
    for m in range(1, n_samples):
        for _ in range(steps_per_sample):
            t0 = float(t_start) + t_rel
            k1 = model.drift_many(t0, x)
            k2 = model.drift_many(t0 + 0.5 * h, x + 0.5 * h * k1)
            k3 = model.drift_many(t0 + 0.5 * h, x + 0.5 * h * k2)
            k4 = model.drift_many(t0 + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t_rel += h
        if not np.all(np.isfinite(x)):
            raise DivergenceError("batched free drift diverged")
        yield tau[m], x.copy()
