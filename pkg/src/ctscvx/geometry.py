"""Signed distance, boundary projection and gradients for convex polytopes,
plus the approach-cone constraint function.

The exterior projection is solved by a small self-contained QP routine
(dual projected gradient with an active-set polish) so this module has no
dependency on the conic solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog


class GeometryError(RuntimeError):
    """Raised for degenerate geometric queries (empty sets, undefined
    gradients near a boundary)."""


@dataclass
class Polytope:
    """Half-space set {z : Hz <= h} (or the open set {z : Hz < h}).

    Construction optionally verifies a nonempty interior via a Chebyshev
    center feasibility solve; callers that build polytopes from invertible
    linear maps of known-good sets can skip the check.
    """

    H: np.ndarray
    h: np.ndarray
    open: bool = False
    check_interior: bool = True
    row_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.h = np.asarray(self.h, dtype=float).ravel()
        if self.H.shape[0] != self.h.shape[0]:
            raise ValueError("H and h row counts differ")
        if self.H.shape[0] < 1:
            raise ValueError("polytope needs at least one face")
        self.row_norms = np.linalg.norm(self.H, axis=1)
        if np.any(self.row_norms < 1e-14):
            raise ValueError("polytope has a zero row")
        if self.check_interior and self.chebyshev_radius() <= 0.0:
            raise GeometryError("polytope has empty interior")

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def chebyshev_radius(self) -> float:
        """Radius of the largest inscribed ball (<= 0 iff empty interior)."""
        m, n = self.H.shape
        c = np.zeros(n + 1)
        c[-1] = -1.0
        a_ub = np.column_stack([self.H, self.row_norms])
        res = linprog(c, A_ub=a_ub, b_ub=self.h,
                      bounds=[(None, None)] * n + [(None, None)],
                      method="highs")
        if res.status == 3:  # unbounded radius: interior certainly nonempty
            return np.inf
        if not res.success:
            return -np.inf
        return float(res.x[-1])

    def contains(self, z: np.ndarray, strict: Optional[bool] = None) -> bool:
        strict = self.open if strict is None else strict
        r = self.H @ np.asarray(z, float) - self.h
        return bool(np.all(r < 0.0) if strict else np.all(r <= 0.0))

    def margins(self, Z: np.ndarray) -> np.ndarray:
        """max_i (H_i z - h_i)/||H_i|| for each row of Z (vectorized).

        Negative inside (equal to the interior signed distance), a lower
        bound on the exterior distance outside.
        """
        Z = np.atleast_2d(Z)
        return np.max((Z @ self.H.T - self.h) / self.row_norms, axis=1)


def _polish_projection(P: Polytope, z: np.ndarray, active: np.ndarray):
    """Equality-constrained projection onto the active faces + KKT check."""
    if len(active) == 0:
        return None
    hs = P.H[active]
    rhs = hs @ z - P.h[active]
    gram = hs @ hs.T
    try:
        lam = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    except np.linalg.LinAlgError:
        return None
    if np.any(lam < -1e-9):
        return None
    y = z - hs.T @ lam
    if np.any(P.H @ y - P.h > 1e-9 * max(1.0, np.max(np.abs(P.h)))):
        return None
    return y


def _project_exterior(P: Polytope, z: np.ndarray) -> np.ndarray:
    """Euclidean projection of an exterior point onto {Hz <= h}."""
    m = P.H.shape[0]
    gram = P.H @ P.H.T
    lip = max(np.linalg.eigvalsh(gram)[-1], 1e-12)
    b = P.H @ z - P.h
    lam = np.zeros(m)
    lam_acc = lam.copy()
    t_acc = 1.0
    best = None
    for it in range(2000):
        grad = gram @ lam_acc - b
        lam_new = np.maximum(lam_acc - grad / lip, 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc**2))
        lam_acc = lam_new + ((t_acc - 1.0) / t_new) * (lam_new - lam)
        lam, t_acc = lam_new, t_new
        if it % 25 == 24 or it == 0:
            y = z - P.H.T @ lam
            viol = P.H @ y - P.h
            active = np.flatnonzero(
                (lam > 1e-10) | (viol > -1e-8 * max(1.0, lip)))
            polished = _polish_projection(P, z, active)
            if polished is not None:
                return polished
            best = y
    # Fall back to the (feasibility-clipped) iterate if polish never
    # certified optimality.
    return best if best is not None else z - P.H.T @ lam


def boundary_projection(P: Polytope, z: np.ndarray) -> np.ndarray:
    """Projection of z onto the boundary of the polytope."""
    z = np.asarray(z, dtype=float)
    resid = P.H @ z - P.h
    if np.any(resid > 0.0):
        return _project_exterior(P, z)
    ratios = -resid / P.row_norms
    i_star = int(np.argmin(ratios))  # lowest index wins ties (argmin does)
    hi = P.H[i_star]
    return z - ((hi @ z - P.h[i_star]) / (P.row_norms[i_star] ** 2)) * hi


def signed_distance(P: Polytope, z: np.ndarray) -> float:
    """Signed distance: positive outside the closure, negative inside."""
    z = np.asarray(z, dtype=float)
    resid = P.H @ z - P.h
    if np.any(resid > 0.0):
        y = _project_exterior(P, z)
        return float(np.linalg.norm(z - y))
    return float(-np.min(-resid / P.row_norms))


def signed_distance_gradient(P: Polytope, z: np.ndarray,
                             eps_d: float = 1e-9,
                             near_boundary_normal: bool = False) -> np.ndarray:
    """Gradient (z - z_boundary)/d as a 1-D array of unit norm.

    Within eps_d of the boundary the gradient is undefined; opt in via
    near_boundary_normal to get the outward unit normal of the nearest
    face instead of an error.
    """
    z = np.asarray(z, dtype=float)
    d = signed_distance(P, z)
    if abs(d) <= eps_d:
        if not near_boundary_normal:
            raise GeometryError("gradient undefined near boundary")
        ratios = np.abs(P.H @ z - P.h) / P.row_norms
        i_star = int(np.argmin(ratios))
        return P.H[i_star] / P.row_norms[i_star]
    zb = boundary_projection(P, z)
    return (z - zb) / d


# Position selector rE: picks the position block of a 6-state.
POSITION_SELECTOR = np.hstack([np.eye(3), np.zeros((3, 3))])


@dataclass
class ConeSpec:
    """Approach cone with unit axis and half angle (radians).

    r_lvlh is the constant rotation from the planning frame to the frame
    in which avoid-set boxes and the cone axis are specified.
    """

    e_ac: np.ndarray
    theta_ac: float
    r_lvlh: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.e_ac = np.asarray(self.e_ac, dtype=float).ravel()
        if self.e_ac.shape != (3,):
            raise ValueError("cone axis must be a 3-vector")
        if abs(np.linalg.norm(self.e_ac) - 1.0) > 1e-9:
            raise ValueError("cone axis must be a unit vector")
        if not (0.0 < self.theta_ac < np.pi / 2):
            raise ValueError("half angle must lie in (0, pi/2)")
        self.r_lvlh = np.asarray(self.r_lvlh, dtype=float)
        if self.r_lvlh.shape != (3, 3):
            raise ValueError("r_lvlh must be 3x3")


def approach_cone_g(cone: ConeSpec, x: np.ndarray):
    """Quadratic/linear cone constraint value g (2,) and Jacobian (2, 6).

    g <= 0 elementwise iff the position lies in the cone about e_ac.
    """
    x = np.asarray(x, dtype=float)
    r = POSITION_SELECTOR @ x
    ct2 = np.cos(cone.theta_ac) ** 2
    er = float(cone.e_ac @ r)
    g = np.array([ct2 * float(r @ r) - er**2, -er])
    jac = np.vstack([
        2.0 * ct2 * r @ POSITION_SELECTOR
        - 2.0 * er * cone.e_ac @ POSITION_SELECTOR,
        -cone.e_ac @ POSITION_SELECTOR,
    ])
    return g, jac
