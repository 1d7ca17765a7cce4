"""Independent closed-form / brute-force oracles shared across tests."""

import numpy as np


def cw_stm(n: float, t: float) -> np.ndarray:
    """Closed-form Clohessy-Wiltshire state-transition matrix.

    State ordering (r1, r2, r3, v1, v2, v3) with r1 radial, r2 along-track,
    r3 cross-track; written directly from the textbook solution of Hill's
    equations, independent of any numerical integrator.
    """
    s, c = np.sin(n * t), np.cos(n * t)
    m = np.zeros((6, 6))
    m[0] = [4 - 3 * c, 0, 0, s / n, 2 * (1 - c) / n, 0]
    m[1] = [6 * (s - n * t), 1, 0, 2 * (c - 1) / n, (4 * s - 3 * n * t) / n, 0]
    m[2] = [0, 0, c, 0, 0, s / n]
    m[3] = [3 * n * s, 0, 0, c, 2 * s, 0]
    m[4] = [6 * n * (c - 1), 0, 0, -2 * s, 4 * c - 3, 0]
    m[5] = [0, 0, -n * s, 0, 0, c]
    return m


def cw_zoh_input_matrix(n: float, dt: float, quad_points: int = 20001) -> np.ndarray:
    """B matrix for ZOH control on the CW model via high-order quadrature.

    B = int_0^dt Phi(dt - s) [0; I] ds, evaluated with composite Simpson
    using the closed-form STM only.
    """
    assert quad_points % 2 == 1
    s_grid = np.linspace(0.0, dt, quad_points)
    g = np.vstack([np.zeros((3, 3)), np.eye(3)])
    vals = np.stack([cw_stm(n, dt - s) @ g for s in s_grid])
    w = np.ones(quad_points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    h = s_grid[1] - s_grid[0]
    return (h / 3.0) * np.tensordot(w, vals, axes=1)


def finite_difference_jacobian(fun, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a vector function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def project_qp_oracle(H, h, z):
    """Independent projection onto {Hy <= h} via scipy's SLSQP solver."""
    from scipy.optimize import minimize

    H = np.asarray(H, float)
    h = np.asarray(h, float)
    z = np.asarray(z, float)
    res = minimize(
        lambda y: 0.5 * np.sum((y - z) ** 2),
        x0=z,
        jac=lambda y: y - z,
        constraints=[{"type": "ineq",
                      "fun": lambda y: h - H @ y,
                      "jac": lambda y: -H}],
        method="SLSQP",
        options={"ftol": 1e-16, "maxiter": 500},
    )
    return res.x


def interior_distance_oracle(H, h, z):
    """Exhaustive per-face distance enumeration for an interior point."""
    H = np.asarray(H, float)
    h = np.asarray(h, float)
    vals = [abs(H[i] @ z - h[i]) / np.linalg.norm(H[i])
            for i in range(H.shape[0])]
    return min(vals)


def random_polytope(rng, m, n):
    """Random nonempty polytope containing a known interior point."""
    H = rng.standard_normal((m, n))
    z0 = rng.standard_normal(n)
    h = H @ z0 + rng.uniform(0.3, 2.0, size=m)
    return H, h, z0

def random_cone_program(rng, n, cone_spec):
    """Random cone program with a KKT-certified optimum built in.

    cone_spec is a list of (kind, dim).  A primal-dual pair (x0, y0) is
    constructed blockwise to satisfy complementary slackness exactly, then
    b and q are chosen so all KKT conditions hold at (x0, y0); convexity
    makes the pair globally optimal.  Returns (program data dict, x0, y0,
    optimal objective).
    """
    m = sum(d for _, d in cone_spec)
    a_mat = rng.standard_normal((m, n))
    x0 = rng.standard_normal(n)
    p_diag = rng.uniform(0.0, 2.0, n) * rng.integers(0, 2, n)
    s0 = np.zeros(m)
    y0 = np.zeros(m)
    i = 0
    for kind, d in cone_spec:
        if kind == "zero":
            y0[i:i + d] = rng.standard_normal(d)
        elif kind == "nonneg":
            active = rng.integers(0, 2, d).astype(bool)
            s0[i:i + d] = np.where(active, 0.0, rng.uniform(0.5, 2.0, d))
            y0[i:i + d] = np.where(active, rng.uniform(0.5, 2.0, d), 0.0)
        else:
            mode = rng.integers(0, 3)
            w = rng.standard_normal(d - 1)
            nw = np.linalg.norm(w)
            if mode == 0:      # slack interior, dual zero
                s0[i:i + d] = np.concatenate([[nw + rng.uniform(0.5, 2.0)], w])
            elif mode == 1:    # dual interior, slack zero
                y0[i:i + d] = np.concatenate([[nw + rng.uniform(0.5, 2.0)], w])
            else:              # both on the boundary, orthogonal
                lam = rng.uniform(0.5, 2.0)
                s0[i:i + d] = np.concatenate([[nw], w])
                y0[i:i + d] = lam * np.concatenate([[nw], -w])
        i += d
    b = a_mat @ x0 + s0
    q = -(p_diag * x0 + a_mat.T @ y0)
    obj = 0.5 * float(x0 @ (p_diag * x0)) + float(q @ x0)
    data = {"q": q, "A": a_mat, "b": b, "P_diag": p_diag,
            "cone_spec": cone_spec}
    return data, x0, y0, obj
