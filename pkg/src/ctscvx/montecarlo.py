"""Closed-loop dispersion analysis of a converged solution.

Each sample draws insertion, actuation, and measurement noise, simulates
the nonlinear closed loop with the fixed-time-of-arrival feedback from the
solution, and records fuel use and constraint flags.  Passive safety is
checked by free-drifting from every dense sub-time — including mid-burn
truncations, which model an underburn — and testing exclusion from the
phase's avoid set over the safety horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .discretize import _sub_time_grid
from .dynamics import NU, NX, free_drift_batch, integrate_interval
from .scp import ScenarioConfig, SolutionReport


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based per-sample generator: independent of execution order."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(index,)))


@dataclass
class SampleResult:
    """Outcome of one closed-loop sample."""

    index: int
    fuel: float
    ps_violation: bool
    cone_violation: bool
    input_violation: bool
    ps_worst_margin: float
    controls: np.ndarray          # (N-1, 3) commanded closed-loop inputs
    node_deviations: np.ndarray   # (N, 6) measured state minus nominal

    def __post_init__(self):
        if self.fuel < 0:
            raise ValueError("fuel must be nonnegative")


@dataclass
class DenseSample:
    """Dense closed-loop states per interval, for the safety check."""

    times: list     # per interval (Q,)
    states: list    # per interval (Q, 6)


def _draw_noise(cfg: ScenarioConfig, rng: np.random.Generator):
    """Fixed draw order: insertion, then per interval (measurement,
    actuation)."""
    grid = cfg.grid
    ni = grid.n_nodes - 1
    x1 = rng.multivariate_normal(cfg.x_init, cfg.uncertainty.sigma_i,
                                 method="svd")
    sigma_rr = cfg.uncertainty.sigma_rr_nodes(grid)
    zeta = np.empty((ni, NX))
    mu = np.empty((ni, NU))
    for k in range(ni):
        zeta[k] = rng.multivariate_normal(np.zeros(NX), sigma_rr[k],
                                          method="svd")
        mu[k] = rng.multivariate_normal(np.zeros(NU),
                                        cfg.uncertainty.sigma_act,
                                        method="svd")
    return x1, zeta, mu


def simulate_sample(solution: SolutionReport, cfg: ScenarioConfig,
                    master_seed: int, index: int = 0, q_dense: int = 10,
                    steps: int = 32, check_safety: bool = True,
                    m_tau: int = 48, drift_steps: int = 4):
    """Simulate one closed-loop sample; returns (SampleResult, DenseSample).

    The commanded input is the nominal plus actuation noise plus feedback
    on the measured node deviation.  Violations are recorded, never
    clipped, so the empirical rates measure the chance constraints as
    formulated.
    """
    if solution.gains.shape[0] != cfg.grid.n_nodes - 1:
        raise ValueError("solution gains do not match the scenario grid")
    rng = sample_rng(master_seed, index)
    x1, zeta, mu = _draw_noise(cfg, rng)
    grid = cfg.grid
    ni = grid.n_nodes - 1
    nominal = solution.trajectory
    alphas = cfg.alphas()
    cone = cfg.cone()
    ct2 = np.cos(cone.theta_ac) ** 2

    x_true = np.array(x1)
    fuel = 0.0
    controls = np.empty((ni, NU))
    node_dev = np.zeros((grid.n_nodes, NX))
    input_violation = False
    cone_violation = False
    dense_times, dense_states = [], []

    for k in range(ni):
        x_meas = x_true + zeta[k]
        node_dev[k] = x_meas - nominal.x[k]
        u_cl = nominal.u[k] + mu[k] + solution.gains[k] @ (x_meas
                                                          - nominal.x[k])
        controls[k] = u_cl
        if np.max(np.abs(u_cl)) > cfg.u_max:
            input_violation = True
        fuel += alphas[k] * float(np.linalg.norm(u_cl))

        param = cfg.param_for_interval(k)
        sub = _sub_time_grid(param, grid.nodes[k], grid.nodes[k + 1],
                             q_dense)
        x_true, samples = integrate_interval(
            cfg.model, param, grid.nodes[k], grid.nodes[k + 1], x_true,
            u_cl, steps=steps, sub_times=sub)
        states = np.array([samples[float(t)] for t in sub])
        dense_times.append(np.asarray(sub, float))
        dense_states.append(states)

        if grid.phase_of_interval(k) == 3:
            r = states[:, :3]
            er = r @ cone.e_ac
            g1 = ct2 * np.einsum("qi,qi->q", r, r) - er**2
            if np.any(g1 > 0.0) or np.any(-er > 0.0):
                cone_violation = True

    node_dev[ni] = x_true - nominal.x[ni]
    dense = DenseSample(times=dense_times, states=dense_states)
    if check_safety:
        ps_violation, worst = check_passive_safety(
            dense, cfg, m_tau=m_tau, steps_per_sample=drift_steps)
    else:
        ps_violation, worst = False, np.inf
    result = SampleResult(index=index, fuel=fuel,
                          ps_violation=ps_violation,
                          cone_violation=cone_violation,
                          input_violation=input_violation,
                          ps_worst_margin=worst, controls=controls,
                          node_deviations=node_dev)
    return result, dense


def check_passive_safety(dense: DenseSample, cfg: ScenarioConfig,
                         m_tau: int = 48, steps_per_sample: int = 4):
    """Underburn-robust free-drift check; returns (violated, worst margin).

    Every dense sub-time is a potential truncation point: the recorded
    state there already includes thrust up to that time, so drifting from
    it models the engine cutting out at exactly that instant.  The margin
    is the worst face clearance from the phase's avoid box over the
    safety horizon (> 0 means outside).
    """
    grid = cfg.grid
    worst = np.inf
    violated = False
    for k, (times, states) in enumerate(zip(dense.times, dense.states)):
        avoid = cfg.avoid_polytope(grid.phase_of_interval(k))
        H, h = avoid.H, avoid.h
        time_invariant = getattr(cfg.model, "time_invariant", False)
        if time_invariant:
            groups = [(float(times[0]), states)]
        else:
            groups = [(float(t), states[i:i + 1])
                      for i, t in enumerate(times)]
        for t_start, batch in groups:
            for _tau, drifted in free_drift_batch(
                    cfg.model, t_start, batch, grid.t_safe, m_tau,
                    steps_per_sample=steps_per_sample):
                margins = np.max(drifted @ H.T - h, axis=1)
                m = float(np.min(margins))
                if m < worst:
                    worst = m
                if m < 0.0:
                    violated = True
    return violated, worst


@dataclass
class MCReport:
    """Aggregate statistics in the style of a dispersion-study table."""

    n_samples: int
    seed: int
    fuel_mean: float
    fuel_min: float
    fuel_max: float
    ps_violation_pct: float
    cone_violation_pct: float
    input_violation_pct: float
    ps_worst_margin: float

    def __post_init__(self):
        for name in ("ps_violation_pct", "cone_violation_pct",
                     "input_violation_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage")
        if not (self.fuel_min <= self.fuel_mean <= self.fuel_max):
            raise ValueError("fuel statistics out of order")

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "n_samples", "seed", "fuel_mean", "fuel_min", "fuel_max",
            "ps_violation_pct", "cone_violation_pct",
            "input_violation_pct", "ps_worst_margin")}


def aggregate(samples: list, seed: int = 0) -> MCReport:
    if not samples:
        raise ValueError("cannot aggregate zero samples")
    fuel = np.array([s.fuel for s in samples])
    n = len(samples)
    pct = lambda flag: 100.0 * sum(
        1 for s in samples if getattr(s, flag)) / n
    return MCReport(
        n_samples=n, seed=seed,
        fuel_mean=float(fuel.mean()), fuel_min=float(fuel.min()),
        fuel_max=float(fuel.max()),
        ps_violation_pct=pct("ps_violation"),
        cone_violation_pct=pct("cone_violation"),
        input_violation_pct=pct("input_violation"),
        ps_worst_margin=float(min(s.ps_worst_margin for s in samples)))


def run_samples(solution: SolutionReport, cfg: ScenarioConfig,
                n_samples: int, master_seed: int, q_dense: int = 10,
                steps: int = 32, m_tau: int = 48, drift_steps: int = 4,
                callback: Optional[callable] = None):
    """Simulate n_samples closed-loop samples; returns (report, samples)."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    results = []
    for i in range(n_samples):
        res, _ = simulate_sample(solution, cfg, master_seed, index=i,
                                 q_dense=q_dense, steps=steps,
                                 m_tau=m_tau, drift_steps=drift_steps)
        results.append(res)
        if callback is not None:
            callback(i, res)
    return aggregate(results, seed=master_seed), results
