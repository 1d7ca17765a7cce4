"""Covariance propagation, FTA feedback gains, and chance-constraint
tightening via ellipsoidal confidence sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .discretize import IntervalLinearization
from .dynamics import NU, NX, TimeGrid
from .geometry import POSITION_SELECTOR


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def project_psd(m: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) PSD matrix: clip negative eigenvalues."""
    w, v = np.linalg.eigh(symmetrize(m))
    return (v * np.maximum(w, 0.0)) @ v.T


def _check_psd(m: np.ndarray, tol: float = 1e-10, what: str = "covariance"):
    w = np.linalg.eigvalsh(symmetrize(m))
    if w[0] < -tol * max(1.0, abs(w[-1])):
        raise FloatingPointError(
            f"{what} lost positive semidefiniteness (min eig {w[0]:.3e})")


@dataclass
class UncertaintyConfig:
    """Noise covariances and chance-constraint confidence levels.

    Measurement covariances are specified at the four decision points and
    interpolated entrywise-linearly in time between them (projected back
    to PSD for safety; exact for the diagonal matrices used in practice).
    """

    sigma_i: np.ndarray                    # (6, 6) insertion covariance
    sigma_act: np.ndarray                  # (3, 3) actuation covariance
    sigma_rr_decision: Sequence[np.ndarray]  # 4 x (6, 6) at D1..D4
    beta_ps: float = 0.8
    beta_ac: float = 0.8
    beta_act: float = 0.8

    def __post_init__(self):
        self.sigma_i = symmetrize(np.asarray(self.sigma_i, float))
        self.sigma_act = symmetrize(np.asarray(self.sigma_act, float))
        self.sigma_rr_decision = [symmetrize(np.asarray(s, float))
                                  for s in self.sigma_rr_decision]
        if len(self.sigma_rr_decision) != 4:
            raise ValueError("need measurement covariances at D1..D4")
        for name, b in (("beta_ps", self.beta_ps), ("beta_ac", self.beta_ac),
                        ("beta_act", self.beta_act)):
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        for s in [self.sigma_i, self.sigma_act, *self.sigma_rr_decision]:
            _check_psd(s)

    def sigma_rr_at(self, t: float, grid: TimeGrid) -> np.ndarray:
        """Measurement covariance at time t (entrywise linear in t)."""
        anchors = grid.nodes[[0, grid.n2, grid.n3, grid.n_nodes - 1]]
        t = float(np.clip(t, anchors[0], anchors[-1]))
        j = int(np.searchsorted(anchors, t, side="right")) - 1
        j = min(j, 2)
        w = (t - anchors[j]) / (anchors[j + 1] - anchors[j])
        s = (1 - w) * self.sigma_rr_decision[j] + w * self.sigma_rr_decision[j + 1]
        return project_psd(s)

    def sigma_rr_nodes(self, grid: TimeGrid) -> np.ndarray:
        return np.stack([self.sigma_rr_at(t, grid) for t in grid.nodes])


@dataclass
class CovarianceTrajectory:
    """Measured-state covariances at nodes and dense sub-times."""

    node_covs: np.ndarray                   # (N, 6, 6)
    gains: np.ndarray                       # (N-1, 3, 6)
    closed_loop_a: np.ndarray = None        # (N-1, 6, 6)
    noise_terms: np.ndarray = None          # (N-1, 6, 6)  Y_k Omega_k Y_k'
    dense: list = field(default_factory=list)  # per interval (Q, 6, 6)


def fta_gain(a_mat: np.ndarray, b_mat: np.ndarray,
             cond_limit: float = 1e12):
    """Fixed-time-of-arrival gain K = -(rE B)^-1 rE A.

    Returns (K, condition number of rE B). Drives the position components
    of the measured deviation to zero at the next node.
    """
    nxm = a_mat.shape[0]
    sel = POSITION_SELECTOR if nxm == NX else np.hstack(
        [np.eye(nxm // 2), np.zeros((nxm // 2, nxm - nxm // 2))])
    rb = sel @ b_mat
    cond = np.linalg.cond(rb)
    if not np.isfinite(cond) or cond > cond_limit:
        raise np.linalg.LinAlgError(
            "FTA gain undefined: input-to-position map singular "
            f"(cond {cond:.3e})")
    k = -np.linalg.solve(rb, sel @ a_mat)
    return k, cond


def noise_term(a_mat, b_mat, sigma_rr_k, sigma_rr_kp1, sigma_act):
    """Y_k Omega_k Y_k' with Y_k = [I  -A_k  B_k] and the noise stack
    (zeta_{k+1}, zeta_k, mu_k)."""
    return (sigma_rr_kp1 + a_mat @ sigma_rr_k @ a_mat.T
            + b_mat @ sigma_act @ b_mat.T)


def propagate_node_covariances(a_mats, b_mats, gains, sigma_i,
                               sigma_rr_nodes, sigma_act) -> CovarianceTrajectory:
    """Closed-loop recursion for the measured-state covariance."""
    n_int = len(a_mats)
    nx = np.asarray(a_mats[0]).shape[0]
    covs = np.empty((n_int + 1, nx, nx))
    acl = np.empty((n_int, nx, nx))
    noise = np.empty((n_int, nx, nx))
    covs[0] = symmetrize(np.asarray(sigma_i, float)
                         + np.asarray(sigma_rr_nodes[0], float))
    for k in range(n_int):
        a, b, kk = (np.asarray(a_mats[k], float),
                    np.asarray(b_mats[k], float),
                    np.asarray(gains[k], float))
        acl[k] = a + b @ kk
        noise[k] = noise_term(a, b, sigma_rr_nodes[k], sigma_rr_nodes[k + 1],
                              sigma_act)
        covs[k + 1] = symmetrize(acl[k] @ covs[k] @ acl[k].T + noise[k])
        _check_psd(covs[k + 1], what=f"node covariance {k + 1}")
    return CovarianceTrajectory(node_covs=covs, gains=np.asarray(gains, float),
                                closed_loop_a=acl, noise_terms=noise)


def dense_covariance(lin: IntervalLinearization, sigma_m_k: np.ndarray,
                     gain: np.ndarray, noise: np.ndarray,
                     cond_limit: float = 1e12) -> np.ndarray:
    """Continuous-time covariance samples aligned with the node recursion.

    The initial condition rewinds the node update through A_k (via linear
    solves); propagation along the interval uses the integrated state
    transition samples, which solve the same Lyapunov ODE.
    """
    a = lin.A
    if np.linalg.cond(a) > cond_limit:
        raise np.linalg.LinAlgError("interval A matrix numerically singular")
    m = np.eye(a.shape[0]) + np.linalg.solve(a, lin.B @ gain)
    # A^-1 (Y Omega Y') A^-T via two solves
    tmp = np.linalg.solve(a, np.asarray(noise, float))
    rewound = np.linalg.solve(a, tmp.T).T
    sigma0 = symmetrize(m @ np.asarray(sigma_m_k, float) @ m.T + rewound)
    out = np.einsum("qij,jk,qlk->qil", lin.Phi, sigma0, lin.Phi)
    out = 0.5 * (out + np.transpose(out, (0, 2, 1)))
    for q in range(out.shape[0]):
        _check_psd(out[q], what=f"dense covariance at t={lin.sub_times[q]}")
    return out


def chi2_quantile(n_dof: int, beta: float) -> float:
    """Quantile of the chi-squared distribution with n_dof degrees of freedom."""
    if not 1 <= n_dof <= 12:
        raise ValueError("degrees of freedom must lie in 1..12")
    if not 0.0 < beta < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    return float(chi2.ppf(beta, df=n_dof))


def tighten_halfspace(a: np.ndarray, sigma: np.ndarray, beta: float,
                      n_dof: int) -> float:
    """Backoff c = sqrt(Q_n(beta) a' Sigma a) for a'x <= b chance constraints."""
    a = np.asarray(a, float)
    quad = float(a @ symmetrize(np.asarray(sigma, float)) @ a)
    if quad < -1e-12:
        raise FloatingPointError(f"negative variance {quad:.3e} in tightening")
    return float(np.sqrt(chi2_quantile(n_dof, beta) * max(quad, 0.0)))


def input_tightening(gain: np.ndarray, sigma_m_k: np.ndarray,
                     sigma_act: np.ndarray, a_rows: np.ndarray,
                     b_vals: np.ndarray, beta_act: float) -> np.ndarray:
    """Tightened input bounds b_j - c_j for the closed-loop input.

    The closed-loop input distribution has covariance
    Sigma_act + K Sigma_m K'; each face is backed off with the
    chi-squared quantile for n_u = 3 degrees of freedom.
    """
    a_rows = np.atleast_2d(np.asarray(a_rows, float))
    b_vals = np.asarray(b_vals, float).ravel()
    sigma_cl = symmetrize(np.asarray(sigma_act, float)
                          + gain @ np.asarray(sigma_m_k, float) @ gain.T)
    q = chi2_quantile(NU if a_rows.shape[1] == NU else a_rows.shape[1],
                      beta_act)
    c = np.sqrt(q * np.maximum(np.einsum("ji,ik,jk->j", a_rows, sigma_cl,
                                         a_rows), 0.0))
    tightened = b_vals - c
    # Empty tightened set: no u can satisfy all rows. Cheap certificate:
    # opposite-face pairs whose tightened bounds cross.
    lo = _empty_after_tightening(a_rows, tightened)
    if lo:
        raise ValueError("infeasible tightening: backoff exceeds input set "
                         f"on face pairs {lo}")
    return tightened


def _empty_after_tightening(a_rows: np.ndarray, b: np.ndarray):
    bad = []
    m = a_rows.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            denom = np.linalg.norm(a_rows[i]) * np.linalg.norm(a_rows[j])
            cosang = float(a_rows[i] @ a_rows[j]) / denom
            if cosang < -1.0 + 1e-9:
                scale = np.linalg.norm(a_rows[j]) / np.linalg.norm(a_rows[i])
                if b[i] * scale + b[j] < 0.0:
                    bad.append((i, j))
    return bad
