"""Standard-form cone programs and a self-contained conic solver.

Programs are expressed as

    minimize    1/2 x' diag(P) x + q' x
    subject to  A x + s = b,   s in K,

with K an ordered product of zero, nonnegative, and second-order cones.
The primary solver is a primal-dual interior-point method (Mehrotra
predictor-corrector with Nesterov-Todd scaling) on Ruiz-equilibrated
data; an over-relaxed operator-splitting (ADMM) iteration serves as a
fallback and provides infeasibility certificates.  Both are
deterministic for fixed inputs.  The module also assembles the
penalized convex subproblem used by the outer optimization loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .dynamics import NU, NX
from .geometry import POSITION_SELECTOR

_CONE_KINDS = ("zero", "nonneg", "soc")


@dataclass(frozen=True)
class Cone:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in _CONE_KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("cone dimension must be positive")


def project_soc(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the second-order cone {(t, x): |x| <= t}."""
    v = np.asarray(v, dtype=float)
    t, x = v[0], v[1:]
    nx = np.linalg.norm(x)
    if nx <= t:
        return v.copy()
    if nx <= -t:
        return np.zeros_like(v)
    a = 0.5 * (t + nx)
    out = np.empty_like(v)
    out[0] = a
    out[1:] = (a / nx) * x
    return out


def project_onto_cones(s: np.ndarray, cones: Sequence[Cone],
                       dual: bool = False) -> np.ndarray:
    """Project onto K (or its dual: zero-cone blocks become free)."""
    out = np.empty_like(np.asarray(s, dtype=float))
    i = 0
    for c in cones:
        blk = s[i:i + c.dim]
        if c.kind == "zero":
            out[i:i + c.dim] = blk if dual else 0.0
        elif c.kind == "nonneg":
            out[i:i + c.dim] = np.maximum(blk, 0.0)
        else:
            out[i:i + c.dim] = project_soc(blk)
        i += c.dim
    return out


def cone_distance(s: np.ndarray, cones: Sequence[Cone],
                  dual: bool = False) -> float:
    return float(np.max(np.abs(s - project_onto_cones(s, cones, dual=dual)),
                        initial=0.0))


@dataclass
class ConeProgram:
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: list
    P_diag: Optional[np.ndarray] = None
    obj_const: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.A = sp.csc_matrix(self.A)
        self.b = np.asarray(self.b, dtype=float).ravel()
        m, n = self.A.shape
        if self.q.shape != (n,) or self.b.shape != (m,):
            raise ValueError("objective/offset dimensions inconsistent "
                             "with the constraint matrix")
        if sum(c.dim for c in self.cones) != m:
            raise ValueError("cone dimensions do not sum to the row count")
        if self.P_diag is None:
            self.P_diag = np.zeros(n)
        self.P_diag = np.asarray(self.P_diag, dtype=float).ravel()
        if self.P_diag.shape != (n,):
            raise ValueError("quadratic diagonal has wrong length")
        if np.any(self.P_diag < 0):
            raise ValueError("quadratic diagonal must be nonnegative")
        for arr in (self.q, self.b, self.P_diag):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite program data")
        if not np.all(np.isfinite(self.A.data)):
            raise ValueError("non-finite program data")

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def objective_value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P_diag * x) + self.q @ x
                     + self.obj_const)


@dataclass
class ConicSolution:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    objective: float
    status: str            # optimal | max_iters | infeasible_detected
    residuals: dict
    iterations: int


def _block_uniform_max(r: np.ndarray, cones: Sequence[Cone]) -> np.ndarray:
    """Replace entries within each SOC block by the block maximum so the
    row scaling preserves the cone."""
    out = r.copy()
    i = 0
    for c in cones:
        if c.kind == "soc":
            out[i:i + c.dim] = np.max(r[i:i + c.dim])
        i += c.dim
    return out


def _equilibrate(p: ConeProgram, iters: int = 10):
    """Ruiz equilibration returning scaled data and the diagonal maps."""
    A = p.A.tocsr(copy=True)
    P = p.P_diag.copy()
    q = p.q.copy()
    b = p.b.copy()
    m, n = A.shape
    D = np.ones(n)
    E = np.ones(m)
    for _ in range(iters):
        absA = abs(A)
        r = np.asarray(absA.max(axis=1).todense()).ravel()
        r = _block_uniform_max(r, p.cones)
        dr = np.where(r > 0, 1.0 / np.sqrt(np.clip(r, 1e-12, 1e12)), 1.0)
        c = np.asarray(absA.max(axis=0).todense()).ravel()
        c = np.maximum(c, np.abs(P))
        dc = np.where(c > 0, 1.0 / np.sqrt(np.clip(c, 1e-12, 1e12)), 1.0)
        A = sp.diags(dr) @ A @ sp.diags(dc)
        P = dc * P * dc
        q = dc * q
        b = dr * b
        D *= dc
        E *= dr
    g = max(np.max(np.abs(q), initial=0.0), np.max(P, initial=0.0))
    c_cost = 1.0 / max(1.0, g)
    return A.tocsc(), c_cost * P, c_cost * q, b, D, E, c_cost


def _kkt_metric(p: ConeProgram, x: np.ndarray, y: np.ndarray) -> float:
    s = p.b - p.A @ x
    return max(cone_distance(s, p.cones),
               float(np.max(np.abs(p.P_diag * x + p.q + p.A.T @ y),
                            initial=0.0)),
               cone_distance(y, p.cones, dual=True),
               abs(float(y @ s)))


def _solve_active_qp(p: ConeProgram, soc_modes: dict, nonneg_active: set,
                     x_lin: np.ndarray, delta: float = 1e-9,
                     refine_steps: int = 3):
    """Equality-constrained QP for a given active set.

    soc_modes maps SOC block start index -> "vertex" | "boundary";
    boundary blocks are linearized at the current slack direction from
    x_lin.  Returns (x, full dual vector) or None on a singular system.
    """
    m, n = p.A.shape
    s_lin = p.b - p.A @ x_lin
    g_rows, g_rhs, recover = [], [], []
    i = 0
    for c in p.cones:
        blk = slice(i, i + c.dim)
        if c.kind == "zero":
            g_rows.append(p.A[blk])
            g_rhs.append(p.b[blk])
            recover.append(("dense", blk, None))
        elif c.kind == "nonneg":
            act = np.array(sorted(j for j in range(c.dim)
                                  if i + j in nonneg_active), dtype=int)
            if act.size:
                idx = i + act
                g_rows.append(p.A[idx])
                g_rhs.append(p.b[idx])
                recover.append(("sparse", blk, act))
        else:
            mode = soc_modes.get(i)
            if mode == "vertex":
                g_rows.append(p.A[blk])
                g_rhs.append(p.b[blk])
                recover.append(("dense", blk, None))
            elif mode == "boundary":
                w = s_lin[blk][1:]
                nw = np.linalg.norm(w)
                if nw <= 1e-12:
                    g_rows.append(p.A[blk])
                    g_rhs.append(p.b[blk])
                    recover.append(("dense", blk, None))
                else:
                    g = np.concatenate([[1.0], -w / nw])
                    g_rows.append(sp.csr_matrix(g) @ p.A[blk])
                    g_rhs.append(np.array([float(g @ p.b[blk])]))
                    recover.append(("soc", blk, g))
        i += c.dim
    if not g_rows:
        return None
    G = sp.vstack(g_rows, format="csc")
    h = np.concatenate(g_rhs)
    k = G.shape[0]
    kkt = sp.bmat([[sp.diags(p.P_diag + delta), G.T],
                   [G, -delta * sp.eye(k)]], format="csc")
    try:
        lu = splu(kkt)
    except RuntimeError:
        return None
    rhs = np.concatenate([-p.q, h])
    sol = lu.solve(rhs)
    mat = sp.bmat([[sp.diags(p.P_diag), G.T], [G, None]], format="csc")
    for _ in range(refine_steps):
        sol = sol + lu.solve(rhs - mat @ sol)
    x_pol = sol[:n]
    nu = sol[n:]
    y_pol = np.zeros(m)
    j = 0
    for kind, blk, aux in recover:
        if kind == "dense":
            d = blk.stop - blk.start
            y_pol[blk] = nu[j:j + d]
            j += d
        elif kind == "sparse":
            y_pol[blk.start + aux] = nu[j:j + len(aux)]
            j += len(aux)
        else:
            y_pol[blk] = nu[j] * aux
            j += 1
    if not (np.all(np.isfinite(x_pol)) and np.all(np.isfinite(y_pol))):
        return None
    return x_pol, y_pol


def _polish(p: ConeProgram, x: np.ndarray, y: np.ndarray,
            max_passes: int = 8):
    """Iterative active-set refinement of an approximate solution.

    Starting from the active set guessed off the ADMM iterate, repeatedly
    solves the equality-constrained QP, adds rows it violates, and drops
    rows whose multipliers have the wrong sign, keeping the best iterate
    by KKT metric.  Returns (x, y) or None.
    """
    s = p.b - p.A @ x
    tol = 1e-7 * (1.0 + float(np.max(np.abs(p.b), initial=0.0)))
    # Classify off the duals: pinning a row is only needed where its
    # multiplier is clearly positive.  The threshold tracks the achieved
    # dual accuracy so noise in a loose solve does not pin wrong rows;
    # missed rows are picked up by the violation sweep below.
    r_dual = float(np.max(np.abs(p.P_diag * x + p.q + p.A.T @ y),
                          initial=0.0))
    tol_y = max(1e-9 * (1.0 + float(np.max(np.abs(y), initial=0.0))),
                10.0 * r_dual)
    nonneg_active = set()
    soc_modes = {}
    i = 0
    for c in p.cones:
        blk = slice(i, i + c.dim)
        if c.kind == "nonneg":
            for j in range(c.dim):
                if y[i + j] > tol_y:
                    nonneg_active.add(i + j)
        elif c.kind == "soc":
            sb, yb = s[blk], y[blk]
            if np.linalg.norm(yb) > tol_y:
                if np.linalg.norm(sb[1:]) <= 1e-7 * (1.0 + abs(sb[0])):
                    soc_modes[i] = "vertex"
                else:
                    soc_modes[i] = "boundary"
        i += c.dim
    best = None
    best_metric = np.inf
    x_lin = x
    # Additions only: with linear-cost slack variables an under-pinned
    # equality QP is unbounded, and dropping rows off its garbage duals
    # cycles.  Over-pinning merely costs a slightly negative multiplier.
    for _ in range(max_passes):
        res = _solve_active_qp(p, soc_modes, nonneg_active, x_lin)
        if res is None:
            break
        x_pol, y_pol = res
        metric = _kkt_metric(p, x_pol, y_pol)
        if metric < best_metric:
            best, best_metric = (x_pol, y_pol), metric
        s_pol = p.b - p.A @ x_pol
        changed = False
        i = 0
        for c in p.cones:
            blk = slice(i, i + c.dim)
            if c.kind == "nonneg":
                for j in range(c.dim):
                    r = i + j
                    if r not in nonneg_active and s_pol[r] < -tol:
                        nonneg_active.add(r)
                        changed = True
            elif c.kind == "soc":
                sb = s_pol[blk]
                viol = np.linalg.norm(sb[1:]) - sb[0]
                if i not in soc_modes and viol > tol:
                    soc_modes[i] = "boundary"
                    changed = True
            i += c.dim
        x_lin = x_pol
        if not changed:
            break
    return best


def _jordan_mul(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jordan product of the second-order cone algebra."""
    out = np.empty_like(u)
    out[0] = u @ v
    out[1:] = u[0] * v[1:] + v[0] * u[1:]
    return out


def _jordan_solve(lam: np.ndarray, u: np.ndarray):
    """Solve lam o w = u for w; None if lam is not interior."""
    l0, l1 = lam[0], lam[1:]
    det = l0 * l0 - l1 @ l1
    if det <= 0.0 or l0 <= 0.0:
        return None
    w0 = (l0 * u[0] - l1 @ u[1:]) / det
    out = np.empty_like(u)
    out[0] = w0
    out[1:] = (u[1:] - w0 * l1) / l0
    return out


def _soc_step_limit(u: np.ndarray, d: np.ndarray) -> float:
    """Largest alpha with u + alpha d in the SOC, u strictly interior."""
    a = d[0] * d[0] - d[1:] @ d[1:]
    bq = 2.0 * (u[0] * d[0] - u[1:] @ d[1:])
    cq = u[0] * u[0] - u[1:] @ u[1:]
    alpha = np.inf
    if abs(a) < 1e-16:
        if bq < 0.0:
            alpha = -cq / bq
    else:
        disc = bq * bq - 4.0 * a * cq
        if disc >= 0.0:
            sq = np.sqrt(disc)
            roots = [(-bq - sq) / (2.0 * a), (-bq + sq) / (2.0 * a)]
            pos = [r for r in roots if r > 0.0]
            if pos:
                alpha = min(pos)
    # The quadratic is also nonnegative inside the reflected cone; the
    # linear bound on the first component excludes it.
    if d[0] < 0.0:
        alpha = min(alpha, -u[0] / d[0])
    return float(alpha)


class _NTScaling:
    """Nesterov-Todd scaling for the nonneg/SOC rows of a cone product.

    Exposes multiplication by W and W^{-1} (W symmetric), the scaled
    point lambda = W z = W^{-T} s, and the dense W^2 blocks needed by the
    reduced KKT system.  Zero-cone rows are untouched.
    """

    def __init__(self, s, z, blocks):
        self.blocks = blocks
        self.ok = True
        self.w2_diag = np.zeros(s.shape[0])
        self.soc = {}
        self.lam = np.zeros(s.shape[0])
        for kind, i, d in blocks:
            if kind == "zero":
                continue
            sb, zb = s[i:i + d], z[i:i + d]
            if kind == "nonneg":
                if np.any(sb <= 0.0) or np.any(zb <= 0.0):
                    self.ok = False
                    return
                self.w2_diag[i:i + d] = sb / zb
                self.lam[i:i + d] = np.sqrt(sb * zb)
            else:
                sjs = sb[0] * sb[0] - sb[1:] @ sb[1:]
                zjz = zb[0] * zb[0] - zb[1:] @ zb[1:]
                if sjs <= 0.0 or zjz <= 0.0 or sb[0] <= 0.0 or zb[0] <= 0.0:
                    self.ok = False
                    return
                sbar = sb / np.sqrt(sjs)
                zbar = zb / np.sqrt(zjz)
                gamma = np.sqrt(0.5 * (1.0 + sbar @ zbar))
                wbar = (0.5 / gamma) * (sbar + np.concatenate(
                    [[zbar[0]], -zbar[1:]]))
                eta = (sjs / zjz) ** 0.25
                v = wbar.copy()
                v[0] += 1.0
                v /= np.sqrt(2.0 * (wbar[0] + 1.0))
                self.soc[i] = (eta, wbar, v, d)
                self.lam[i:i + d] = self._mul_soc(i, zb)

    def _mul_soc(self, i, u, inverse=False):
        eta, _, v, _ = self.soc[i]
        if inverse:
            jv = np.concatenate([[v[0]], -v[1:]])
            ju = np.concatenate([[u[0]], -u[1:]])
            return (2.0 * jv * (jv @ u) - ju) / eta
        ju = np.concatenate([[u[0]], -u[1:]])
        return eta * (2.0 * v * (v @ u) - ju)

    def mul(self, u, inverse=False):
        out = u.copy()
        for kind, i, d in self.blocks:
            if kind == "nonneg":
                w = np.sqrt(self.w2_diag[i:i + d])
                out[i:i + d] = u[i:i + d] / w if inverse else u[i:i + d] * w
            elif kind == "soc":
                out[i:i + d] = self._mul_soc(i, u[i:i + d], inverse=inverse)
        return out

    def w2_blocks(self):
        """(diag_vector, [(start, dense_block)]) representation of W^2."""
        dense = []
        for i, (eta, wbar, _, d) in self.soc.items():
            j = np.ones(d)
            j[1:] = -1.0
            dense.append((i, eta * eta * (2.0 * np.outer(wbar, wbar)
                                          - np.diag(j))))
        return self.w2_diag, dense


def _ipm_solve(p: ConeProgram, tol_primal: float, tol_dual: float,
               tol_gap: float, max_iters: int = 100,
               delta: float = 1e-9) -> Optional[ConicSolution]:
    """Mehrotra predictor-corrector interior-point method.

    Works on the Ruiz-equilibrated problem; terminates on unscaled
    residuals.  Returns a ConicSolution with status "optimal",
    "infeasible_detected", or "max_iters" (best iterate, usable as a warm
    start), or None on a numerical breakdown.
    """
    A, P, q, b, D, E, c_cost = _equilibrate(p)
    A = A.tocsr()
    m, n = A.shape
    blocks = []
    i = 0
    for c in p.cones:
        blocks.append((c.kind, i, c.dim))
        i += c.dim
    conic = np.zeros(m, dtype=bool)
    nu = 0
    for kind, i, d in blocks:
        if kind == "nonneg":
            conic[i:i + d] = True
            nu += d
        elif kind == "soc":
            conic[i:i + d] = True
            nu += 1
    e = np.zeros(m)
    for kind, i, d in blocks:
        if kind == "nonneg":
            e[i:i + d] = 1.0
        elif kind == "soc":
            e[i] = 1.0

    def kkt_solve(lu, mat, rhs, refine=2):
        sol = lu.solve(rhs)
        for _ in range(refine):
            sol = sol + lu.solve(rhs - mat @ sol)
        return sol

    def factor(w2_diag, w2_dense):
        hd = np.where(conic, w2_diag, 0.0)
        rows, cols, vals = [], [], []
        for i0, blk in w2_dense:
            d = blk.shape[0]
            for r in range(d):
                for cix in range(d):
                    rows.append(i0 + r)
                    cols.append(i0 + cix)
                    vals.append(blk[r, cix])
        Hd = sp.diags(hd) + sp.coo_matrix((vals, (rows, cols)),
                                          shape=(m, m))
        mat0 = sp.bmat([[sp.diags(P), A.T], [A, -Hd]], format="csc")
        matr = sp.bmat([[sp.diags(P + delta), A.T],
                        [A, -Hd - delta * sp.eye(m)]], format="csc")
        try:
            return splu(matr), mat0
        except RuntimeError:
            return None, None

    # Initial point: least-squares solve with unit scaling, then shift
    # the conic parts strictly inside their cones.
    lu0, mat0 = factor(np.ones(m), [])
    if lu0 is None:
        return None
    sol0 = kkt_solve(lu0, mat0, np.concatenate([-q, b]), refine=1)
    x = sol0[:n]
    z = sol0[n:]
    s = np.where(conic, -z, 0.0)

    def min_eig(v):
        worst = np.inf
        for kind, i, d in blocks:
            if kind == "nonneg":
                worst = min(worst, float(np.min(v[i:i + d])))
            elif kind == "soc":
                worst = min(worst, float(v[i] - np.linalg.norm(v[i + 1:i + d])))
        return worst

    if nu > 0:
        for vec in (s, z):
            t = min_eig(vec)
            if t <= 0.0:
                vec += (1.0 - t) * e
            elif t < 1e-10:
                vec += e

    def unscaled(x, z, s):
        return D * x, (E * z) / c_cost, s / E

    best = None
    met = None
    status = "max_iters"
    residuals = {}
    it = 0
    stalls = 0
    for it in range(1, max_iters + 1):
        x_u, y_u, s_u = unscaled(x, z, s)
        Ax = p.A @ x_u
        px = p.P_diag * x_u
        aty = p.A.T @ y_u
        r_prim_u = float(np.max(np.abs(Ax + s_u - p.b), initial=0.0))
        r_dual_u = float(np.max(np.abs(px + p.q + aty), initial=0.0))
        comp_u = abs(float(y_u @ s_u))
        obj = p.objective_value(x_u)
        residuals = {"primal": r_prim_u, "dual": r_dual_u, "gap": comp_u}
        best = (x_u, y_u)
        eps_p = tol_primal * (1.0 + max(np.max(np.abs(Ax), initial=0.0),
                                        np.max(np.abs(s_u), initial=0.0),
                                        np.max(np.abs(p.b), initial=0.0)))
        eps_d = tol_dual * (1.0 + max(np.max(np.abs(px), initial=0.0),
                                      np.max(np.abs(p.q), initial=0.0),
                                      np.max(np.abs(aty), initial=0.0)))
        eps_g = tol_gap * (1.0 + abs(obj))
        mu_s = (float(s[conic] @ z[conic]) / nu) if nu > 0 else 0.0
        if r_prim_u <= eps_p and r_dual_u <= eps_d and comp_u <= eps_g:
            met = (x_u, y_u, dict(residuals), it)
            # Keep refining until the scaled complementarity is small
            # too: the unscaled gap test alone is not scale invariant,
            # and solution accuracy near degeneracy goes as sqrt(gap),
            # so ask for well below the gap tolerance; a stall after the
            # criteria were met still returns the recorded iterate.
            if mu_s <= 1e-4 * tol_gap:
                status = "optimal"
                break
        # Primal infeasibility certificate off the (diverging) dual.
        ny = float(np.max(np.abs(y_u), initial=0.0))
        if ny > 1e6:
            yn = y_u / ny
            if (np.max(np.abs(p.A.T @ yn), initial=0.0) <= 1e-9
                    and cone_distance(yn, p.cones, dual=True) <= 1e-9
                    and p.b @ yn < -1e-9):
                status = "infeasible_detected"
                break
        if nu == 0:
            # Pure equality problem: the initial solve is Newton-exact;
            # failing the tolerance check indicates inconsistency.
            break

        scal = _NTScaling(s, z, blocks)
        if not scal.ok:
            break
        w2d, w2dense = scal.w2_blocks()
        lu, mat = factor(w2d, w2dense)
        if lu is None:
            break
        r_d = P * x + q + A.T @ z
        r_p = A @ x + s - b
        mu = float(s[conic] @ z[conic]) / nu
        lam = scal.lam

        def comp_rhs(d_s):
            # Jordan-divide by lambda blockwise, then apply W.
            out = np.zeros(m)
            for kind, i, d in blocks:
                if kind == "nonneg":
                    out[i:i + d] = d_s[i:i + d] / lam[i:i + d]
                elif kind == "soc":
                    r = _jordan_solve(lam[i:i + d], d_s[i:i + d])
                    if r is None:
                        return None
                    out[i:i + d] = r
            return scal.mul(out)

        def direction(d_s):
            w_ds = comp_rhs(d_s)
            if w_ds is None:
                return None
            rhs = np.concatenate([-r_d, -r_p + np.where(conic, w_ds, 0.0)])
            sol = kkt_solve(lu, mat, rhs)
            dx = sol[:n]
            dz = sol[n:]
            # ds = -W(lam \ d_s) - W^2 dz on conic rows, 0 on zero rows.
            w2dz = scal.mul(scal.mul(dz))
            ds = np.where(conic, -w_ds - w2dz, 0.0)
            return dx, dz, ds

        # Affine (predictor) direction targets zero complementarity.
        lam2 = np.zeros(m)
        for kind, i, d in blocks:
            if kind == "nonneg":
                lam2[i:i + d] = lam[i:i + d] ** 2
            elif kind == "soc":
                lam2[i:i + d] = _jordan_mul(lam[i:i + d], lam[i:i + d])
        aff = direction(lam2)
        if aff is None:
            break
        dxa, dza, dsa = aff

        def step_limit(v, dv):
            alpha = np.inf
            for kind, i, d in blocks:
                if kind == "nonneg":
                    neg = dv[i:i + d] < 0.0
                    if np.any(neg):
                        alpha = min(alpha, float(np.min(
                            -v[i:i + d][neg] / dv[i:i + d][neg])))
                elif kind == "soc":
                    alpha = min(alpha,
                                _soc_step_limit(v[i:i + d], dv[i:i + d]))
            return alpha

        a_aff = min(1.0, step_limit(s, dsa), step_limit(z, dza))
        mu_aff = float((s + a_aff * dsa)[conic]
                       @ (z + a_aff * dza)[conic]) / nu
        sig = float(np.clip((max(mu_aff, 0.0) / mu) ** 3, 1e-8, 1.0))
        # Corrector with the Mehrotra second-order term.
        corr = lam2.copy()
        winv_dsa = scal.mul(dsa, inverse=True)
        w_dza = scal.mul(dza)
        for kind, i, d in blocks:
            if kind == "nonneg":
                corr[i:i + d] += (winv_dsa[i:i + d] * w_dza[i:i + d]
                                  - sig * mu)
            elif kind == "soc":
                corr[i:i + d] += _jordan_mul(winv_dsa[i:i + d],
                                             w_dza[i:i + d])
                corr[i] -= sig * mu
        full = direction(corr)
        if full is None:
            break
        dx, dz, ds = full
        a_max = min(step_limit(s, ds), step_limit(z, dz))
        a = min(1.0, 0.99 * a_max)
        if a <= 1e-10:
            stalls += 1
            if stalls >= 2:
                break
            continue
        x = x + a * dx
        z = z + a * dz
        s = s + a * ds

    if status != "optimal" and met is not None:
        # The loop ended after the acceptance criteria were already met
        # (stall or breakdown while polishing the gap further).
        x_u, y_u, residuals, it = met
        status = "optimal"
    elif best is None:
        return None
    else:
        x_u, y_u = best
    return ConicSolution(x=x_u, y=y_u, s=p.b - p.A @ x_u,
                         objective=p.objective_value(x_u), status=status,
                         residuals=residuals, iterations=it)


def solve(p: ConeProgram, tol_primal: float = 1e-8, tol_dual: float = 1e-8,
          tol_gap: float = 1e-8, max_iters: int = 100000, rho: float = 0.1,
          sigma: float = 1e-6, alpha: float = 1.6,
          check_every: int = 25, warm_start=None,
          polish: bool = True) -> ConicSolution:
    """Solve the cone program: interior-point first, ADMM fallback.

    A Mehrotra predictor-corrector method handles the well-posed case
    fast and to high accuracy; it is immune to the slow tail convergence
    first-order splittings show on degenerate penalty-heavy programs.
    When it breaks down or fails to converge (e.g. an infeasible program
    without a clean certificate), the over-relaxed ADMM iteration runs,
    warm-started from the interior-point iterate; ADMM supplies
    infeasibility certificates from its dual increment.  Convergence is
    declared from unscaled residuals; hitting max_iters returns status
    max_iters with the current residuals so the caller can decide whether
    to accept.
    """
    ipm = _ipm_solve(p, tol_primal, tol_dual, tol_gap)
    if ipm is not None and ipm.status in ("optimal", "infeasible_detected"):
        return ipm
    if ipm is not None and warm_start is None:
        warm_start = (ipm.x, ipm.y)
    m, n = p.A.shape
    A_s, P_s, q_s, b_s, D, E, c_cost = _equilibrate(p)

    is_zero_row = np.zeros(m, dtype=bool)
    i = 0
    for c in p.cones:
        if c.kind == "zero":
            is_zero_row[i:i + c.dim] = True
        i += c.dim

    def factor(rho_base):
        rho_vec = np.where(is_zero_row, 1e3 * rho_base, rho_base)
        kkt = sp.bmat([[sp.diags(P_s + sigma), A_s.T],
                       [A_s, -sp.diags(1.0 / rho_vec)]], format="csc")
        return rho_vec, splu(kkt)

    rho_base = rho
    rho_vec, lu = factor(rho_base)

    xk = np.zeros(n)
    zk = np.zeros(m)
    yk = np.zeros(m)
    if warm_start is not None:
        x0, y0 = warm_start
        xk = np.asarray(x0, dtype=float) / D
        yk = c_cost * np.asarray(y0, dtype=float) / E
        zk = E * (p.A @ np.asarray(x0, dtype=float))
    dy = np.zeros(m)
    status = "max_iters"
    residuals = {}
    it = 0

    def unscaled():
        x = D * xk
        z = zk / E
        y = (E * yk) / c_cost
        return x, z, y

    for it in range(1, max_iters + 1):
        rhs = np.concatenate([sigma * xk - q_s, zk - yk / rho_vec])
        sol = lu.solve(rhs)
        xt, nu = sol[:n], sol[n:]
        zt = zk + (nu - yk) / rho_vec
        x_new = alpha * xt + (1.0 - alpha) * xk
        z_rel = alpha * zt + (1.0 - alpha) * zk
        v = z_rel + yk / rho_vec
        z_new = b_s - project_onto_cones(b_s - v, p.cones)
        y_new = yk + rho_vec * (z_rel - z_new)
        dy = y_new - yk
        xk, zk, yk = x_new, z_new, y_new

        if it % check_every != 0 and it != max_iters:
            continue
        x, z, y = unscaled()
        Ax = p.A @ x
        s = p.b - z
        px = p.P_diag * x
        aty = p.A.T @ y
        r_prim = float(np.max(np.abs(Ax - z), initial=0.0))
        r_dual = float(np.max(np.abs(px + p.q + aty), initial=0.0))
        comp = abs(float(y @ s))
        obj = p.objective_value(x)
        eps_p = tol_primal * (1.0 + max(np.max(np.abs(Ax), initial=0.0),
                                        np.max(np.abs(z), initial=0.0)))
        eps_d = tol_dual * (1.0 + max(np.max(np.abs(px), initial=0.0),
                                      np.max(np.abs(p.q), initial=0.0),
                                      np.max(np.abs(aty), initial=0.0)))
        eps_g = tol_gap * (1.0 + abs(obj))
        residuals = {"primal": r_prim, "dual": r_dual, "gap": comp}
        if r_prim <= eps_p and r_dual <= eps_d and comp <= eps_g:
            status = "optimal"
            break
        # Primal infeasibility certificate: a dual direction with
        # A'dy ~ 0, dy in K*, and b'dy < 0.
        dy_u = (E * dy) / c_cost
        ndy = float(np.max(np.abs(dy_u), initial=0.0))
        if ndy > 1e-12:
            dyn = dy_u / ndy
            if (np.max(np.abs(p.A.T @ dyn), initial=0.0) <= 1e-9
                    and cone_distance(dyn, p.cones, dual=True) <= 1e-9
                    and p.b @ dyn < -1e-9):
                status = "infeasible_detected"
                break
        # Penalty adaptation keeps primal/dual progress balanced.
        ratio = (r_prim / max(eps_p, 1e-16)) / max(
            r_dual / max(eps_d, 1e-16), 1e-16)
        if ratio > 25.0 or ratio < 1.0 / 25.0:
            new_rho = float(np.clip(rho_base * np.sqrt(ratio), 1e-6, 1e6))
            if new_rho / rho_base > 5.0 or rho_base / new_rho > 5.0:
                rho_base = new_rho
                rho_vec, lu = factor(rho_base)

    x, z, y = unscaled()
    if polish and status != "infeasible_detected":
        pol = _polish(p, x, y)
        if pol is not None:
            metric_old = _kkt_metric(p, x, y)
            metric_new = _kkt_metric(p, *pol)
            if metric_new < metric_old:
                x, y = pol
                s_pol = p.b - p.A @ x
                px = p.P_diag * x
                obj = p.objective_value(x)
                residuals = {
                    "primal": cone_distance(s_pol, p.cones),
                    "dual": float(np.max(np.abs(px + p.q + p.A.T @ y),
                                         initial=0.0)),
                    "gap": abs(float(y @ s_pol)),
                }
                eps_p = tol_primal * (1.0 + np.max(np.abs(p.b), initial=0.0))
                eps_d = tol_dual * (1.0 + max(
                    np.max(np.abs(px), initial=0.0),
                    np.max(np.abs(p.q), initial=0.0)))
                eps_g = tol_gap * (1.0 + abs(obj))
                if (residuals["primal"] <= eps_p
                        and residuals["dual"] <= eps_d
                        and residuals["gap"] <= eps_g):
                    status = "optimal"
    s = p.b - p.A @ x
    return ConicSolution(x=x, y=y, s=s, objective=p.objective_value(x),
                         status=status, residuals=residuals, iterations=it)


def kkt_residuals(p: ConeProgram, sol: ConicSolution) -> dict:
    """Independent first-order optimality report for a candidate solution."""
    x, y = sol.x, sol.y
    s = p.b - p.A @ x
    return {
        "primal": cone_distance(s, p.cones),
        "dual": float(np.max(np.abs(p.P_diag * x + p.q + p.A.T @ y),
                             initial=0.0)),
        "dual_cone": cone_distance(y, p.cones, dual=True),
        "comp": abs(float(y @ s)),
    }


def dump_program(p: ConeProgram, path: str) -> None:
    """Write a self-describing text dump (triplets + cone list).

    Format: header line "coneprogram v1 <n> <m>"; then "const <c>";
    "q <n floats>"; "P <n floats>"; "b <m floats>"; one line per nonzero
    "A <row> <col> <value>"; one line per cone "cone <kind> <dim>".
    """
    coo = p.A.tocoo()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"coneprogram v1 {p.n_vars} {p.n_rows}\n")
        f.write(f"const {p.obj_const!r}\n")
        f.write("q " + " ".join(repr(v) for v in p.q) + "\n")
        f.write("P " + " ".join(repr(v) for v in p.P_diag) + "\n")
        f.write("b " + " ".join(repr(v) for v in p.b) + "\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"A {r} {c} {v!r}\n")
        for c in p.cones:
            f.write(f"cone {c.kind} {c.dim}\n")


# ---------------------------------------------------------------------------
# Subproblem assembly
# ---------------------------------------------------------------------------

@dataclass
class NodeConstraint:
    """Ball-and-halfspace requirement on the position at a grid node:
    |rE x| <= radius and axis' rE x >= offset."""

    node: int
    radius: float
    axis: np.ndarray
    offset: float

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float).ravel()
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")
        if self.offset >= self.radius:
            raise ValueError("halfspace offset must be below the ball radius")


@dataclass
class SubproblemLayout:
    """Variable slices of the assembled subproblem vector."""

    n_nodes: int
    x: slice = field(init=False)
    u: slice = field(init=False)
    s: slice = field(init=False)
    omega_plus: slice = field(init=False)
    omega_minus: slice = field(init=False)
    q: slice = field(init=False)
    n_vars: int = field(init=False)

    def __post_init__(self):
        n, ni = self.n_nodes, self.n_nodes - 1
        ofs = 0

        def take(count):
            nonlocal ofs
            sl = slice(ofs, ofs + count)
            ofs += count
            return sl

        self.x = take(NX * n)
        self.u = take(NU * ni)
        self.s = take(ni)
        self.omega_plus = take(NX * ni)
        self.omega_minus = take(NX * ni)
        self.q = take(3 * ni)
        self.n_vars = ofs

    def extract(self, v: np.ndarray) -> dict:
        ni = self.n_nodes - 1
        return {
            "x": v[self.x].reshape(self.n_nodes, NX),
            "u": v[self.u].reshape(ni, NU),
            "s": v[self.s].copy(),
            "omega_plus": v[self.omega_plus].reshape(ni, NX),
            "omega_minus": v[self.omega_minus].reshape(ni, NX),
            "q": v[self.q].reshape(ni, 3),
        }


def assemble_subproblem(lins, constraint_lins, input_a, input_b,
                        node_constraints, x_init, x_final, alphas,
                        x_ref, u_ref, w_ep: float = 1e4,
                        w_px: float = 1e-1,
                        eps_relax: float = 1e-6):
    """Build the penalized convex subproblem as a ConeProgram.

    lins supply per-interval (A, B, c); constraint_lins the affine path
    constraint rows (or None per interval); input_a/input_b the tightened
    input polytope faces (input_b per interval); node_constraints the
    ball-and-halfspace requirements on nominal node positions.  Dynamics
    defects are split into nonnegative slacks and penalized in l1, path
    rows are relaxed by eps_relax plus a penalized slack, and proximal
    terms anchor the iterate to the reference (x_ref, u_ref).

    Returns (ConeProgram, SubproblemLayout).
    """
    n_nodes = len(lins) + 1
    ni = n_nodes - 1
    lay = SubproblemLayout(n_nodes)
    nv = lay.n_vars
    x_ref = np.asarray(x_ref, dtype=float).reshape(n_nodes, NX)
    u_ref = np.asarray(u_ref, dtype=float).reshape(ni, NU)
    alphas = np.asarray(alphas, dtype=float).ravel()
    if alphas.shape != (ni,):
        raise ValueError("need one cost coefficient per interval")
    input_a = np.atleast_2d(np.asarray(input_a, dtype=float))

    def xi(k):
        return lay.x.start + NX * k

    def ui(k):
        return lay.u.start + NU * k

    rows, cols, vals = [], [], []
    b_parts = []
    cones = []
    r = 0

    def add_entries(r0, c0, mat):
        mat = np.atleast_2d(mat)
        rr, cc = np.nonzero(mat)
        rows.extend((r0 + rr).tolist())
        cols.extend((c0 + cc).tolist())
        vals.extend(mat[rr, cc].tolist())

    # --- zero cone: boundary conditions and dynamics ---
    add_entries(r, xi(0), np.eye(NX))
    b_parts.append(np.asarray(x_init, float))
    cones.append(Cone("zero", NX))
    r += NX
    add_entries(r, xi(n_nodes - 1), np.eye(NX))
    b_parts.append(np.asarray(x_final, float))
    cones.append(Cone("zero", NX))
    r += NX
    for k, lin in enumerate(lins):
        # x_{k+1} - A x_k - B u_k - w+ + w- = c
        add_entries(r, xi(k + 1), np.eye(NX))
        add_entries(r, xi(k), -np.asarray(lin.A, float))
        add_entries(r, ui(k), -np.asarray(lin.B, float))
        add_entries(r, lay.omega_plus.start + NX * k, -np.eye(NX))
        add_entries(r, lay.omega_minus.start + NX * k, np.eye(NX))
        b_parts.append(np.asarray(lin.c, float))
        cones.append(Cone("zero", NX))
        r += NX

    # --- nonneg cone: path rows, slack nonnegativity, inputs, halfspaces ---
    for k in range(ni):
        cl = constraint_lins[k] if constraint_lins is not None else None
        if cl is not None:
            sc = cl.row_scale
            add_entries(r, xi(k), sc[:, None] * cl.Gx)
            add_entries(r, ui(k), sc[:, None] * cl.Gu)
            add_entries(r, lay.q.start + 3 * k, -np.eye(3))
            b_parts.append(eps_relax - sc * cl.h)
            cones.append(Cone("nonneg", 3))
            r += 3
    n_slack = 2 * NX * ni + 3 * ni
    add_entries(r, lay.omega_plus.start, -np.eye(n_slack))
    b_parts.append(np.zeros(n_slack))
    cones.append(Cone("nonneg", n_slack))
    r += n_slack
    n_act = input_a.shape[0]
    for k in range(ni):
        bk = np.asarray(input_b[k], dtype=float).ravel()
        if bk.shape != (n_act,):
            raise ValueError("tightened input bounds shape mismatch")
        add_entries(r, ui(k), input_a)
        b_parts.append(bk)
        cones.append(Cone("nonneg", n_act))
        r += n_act
    for nc in node_constraints:
        add_entries(r, xi(nc.node), -(nc.axis @ POSITION_SELECTOR))
        b_parts.append(np.array([-nc.offset]))
        cones.append(Cone("nonneg", 1))
        r += 1

    # --- second-order cones: control-norm epigraphs and node balls ---
    for k in range(ni):
        add_entries(r, lay.s.start + k, -np.ones((1, 1)))
        add_entries(r + 1, ui(k), -np.eye(NU))
        b_parts.append(np.zeros(1 + NU))
        cones.append(Cone("soc", 1 + NU))
        r += 1 + NU
    for nc in node_constraints:
        add_entries(r + 1, xi(nc.node), -POSITION_SELECTOR)
        b_parts.append(np.concatenate([[nc.radius], np.zeros(3)]))
        cones.append(Cone("soc", 4))
        r += 4

    b = np.concatenate(b_parts)
    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, nv))

    q = np.zeros(nv)
    q[lay.s] = alphas
    q[lay.omega_plus] = w_ep
    q[lay.omega_minus] = w_ep
    q[lay.q] = w_ep
    q[lay.x] = -2.0 * w_px * x_ref.ravel()
    q[lay.u] = -2.0 * w_px * u_ref.ravel()
    p_diag = np.zeros(nv)
    p_diag[lay.x] = 2.0 * w_px
    p_diag[lay.u] = 2.0 * w_px
    const = w_px * (float(np.sum(x_ref**2)) + float(np.sum(u_ref**2)))
    prog = ConeProgram(q=q, A=A, b=b, cones=cones, P_diag=p_diag,
                       obj_const=const)
    return prog, lay
