import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctscvx.geometry import (
    ConeSpec,
    GeometryError,
    Polytope,
    approach_cone_g,
    boundary_projection,
    signed_distance,
    signed_distance_gradient,
)
from oracles import (
    finite_difference_jacobian,
    interior_distance_oracle,
    project_qp_oracle,
    random_polytope,
)


def unit_box(n=2):
    H = np.vstack([np.eye(n), -np.eye(n)])
    return Polytope(H, np.ones(2 * n))


class TestSignedDistance:
    def test_face_distance(self):
        assert signed_distance(unit_box(), np.array([3.0, 0.0])) == pytest.approx(2.0, abs=1e-10)

    def test_interior(self):
        assert signed_distance(unit_box(), np.zeros(2)) == pytest.approx(-1.0, abs=1e-12)

    def test_corner(self):
        d = signed_distance(unit_box(), np.array([2.0, 2.0]))
        assert d == pytest.approx(np.sqrt(2.0), abs=1e-9)

    def test_empty_polytope_rejected(self):
        H = np.array([[1.0], [-1.0]])
        with pytest.raises(GeometryError, match="empty interior"):
            Polytope(H, np.array([-1.0, -1.0]))

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError, match="zero row"):
            Polytope(np.array([[0.0, 0.0]]), np.array([1.0]))

    def test_oracle_equivalence_random(self, rng):
        for _ in range(100):
            m = rng.integers(3, 13)
            n = rng.integers(2, 7)
            H, h, z0 = random_polytope(rng, m, n)
            P = Polytope(H, h)
            z = z0 + rng.standard_normal(n) * 2.0
            d = signed_distance(P, z)
            if np.any(H @ z - h > 0):
                y = project_qp_oracle(H, h, z)
                np.testing.assert_allclose(d, np.linalg.norm(z - y),
                                           rtol=1e-8, atol=1e-8)
            else:
                assert d == pytest.approx(
                    -interior_distance_oracle(H, h, z), abs=1e-10)


class TestBoundaryProjection:
    def test_exterior_face(self):
        np.testing.assert_allclose(
            boundary_projection(unit_box(), np.array([3.0, 0.0])),
            [1.0, 0.0], atol=1e-9)

    def test_interior_nearest_face(self):
        np.testing.assert_allclose(
            boundary_projection(unit_box(), np.array([0.5, 0.0])),
            [1.0, 0.0], atol=1e-12)

    def test_corner(self):
        np.testing.assert_allclose(
            boundary_projection(unit_box(), np.array([2.0, 2.0])),
            [1.0, 1.0], atol=1e-9)

    def test_interior_tie_break_lowest_index(self):
        # All four faces of the unit box are equidistant from the center;
        # the first row (z1 <= 1) must win.
        np.testing.assert_allclose(
            boundary_projection(unit_box(), np.zeros(2)), [1.0, 0.0],
            atol=1e-12)

    def test_exterior_matches_oracle(self, rng):
        for _ in range(50):
            H, h, z0 = random_polytope(rng, 8, 4)
            P = Polytope(H, h)
            z = z0 + rng.standard_normal(4) * 4.0
            if np.any(H @ z - h > 1e-9):
                np.testing.assert_allclose(
                    boundary_projection(P, z), project_qp_oracle(H, h, z),
                    rtol=1e-7, atol=1e-7)


class TestSignedDistanceGradient:
    def test_exterior_face_normal(self):
        np.testing.assert_allclose(
            signed_distance_gradient(unit_box(), np.array([3.0, 0.0])),
            [1.0, 0.0], atol=1e-9)

    def test_corner_direction(self):
        g = signed_distance_gradient(unit_box(), np.array([2.0, 2.0]))
        np.testing.assert_allclose(g, [1 / np.sqrt(2)] * 2, atol=1e-9)

    def test_interior_center_tie_break(self):
        # Derived by enumeration: lowest-index face of the unit box is
        # z1 <= 1, so the boundary projection is (1, 0) and the gradient
        # (z - z_b)/d = (-1, 0)/(-1) = (1, 0).
        g = signed_distance_gradient(unit_box(), np.zeros(2))
        np.testing.assert_allclose(g, [1.0, 0.0], atol=1e-12)

    def test_error_near_boundary(self):
        with pytest.raises(GeometryError, match="gradient undefined"):
            signed_distance_gradient(unit_box(), np.array([1.0, 0.0]))

    def test_near_boundary_fallback(self):
        g = signed_distance_gradient(unit_box(), np.array([1.0, 0.0]),
                                     near_boundary_normal=True)
        np.testing.assert_allclose(g, [1.0, 0.0], atol=1e-12)

    def test_unit_norm_and_finite_differences(self, rng):
        for _ in range(50):
            H, h, z0 = random_polytope(rng, 8, 3)
            P = Polytope(H, h)
            z = z0 + rng.standard_normal(3) * 2.0
            d = signed_distance(P, z)
            if abs(d) <= 1e-3:
                continue
            g = signed_distance_gradient(P, z)
            assert np.linalg.norm(g) == pytest.approx(1.0, abs=1e-9)
            fd = finite_difference_jacobian(
                lambda y: np.atleast_1d(signed_distance(P, y)), z,
                step=1e-6).ravel()
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)


class TestApproachCone:
    def cone(self):
        return ConeSpec(e_ac=np.array([0.0, 0, 1.0]),
                        theta_ac=np.deg2rad(55.0))

    def test_on_axis_point_satisfied(self):
        g, _ = approach_cone_g(self.cone(), np.array([0, 0, 1.0, 0, 0, 0]))
        assert g[0] == pytest.approx(np.cos(np.deg2rad(55)) ** 2 - 1.0)
        assert g[0] < 0 and g[1] == pytest.approx(-1.0)

    def test_anti_axis_violated(self):
        g, _ = approach_cone_g(self.cone(), np.array([0, 0, -1.0, 0, 0, 0]))
        assert g[1] == pytest.approx(1.0)
        assert g[1] > 0

    def test_boundary_of_cone(self):
        th = np.deg2rad(55.0)
        x = np.array([np.sin(th), 0.0, np.cos(th), 0, 0, 0])
        g, _ = approach_cone_g(self.cone(), x)
        assert g[0] == pytest.approx(0.0, abs=1e-12)

    def test_jacobian_matches_finite_differences(self, rng):
        cone = self.cone()
        for _ in range(20):
            x = rng.standard_normal(6) * 5.0
            _, jac = approach_cone_g(cone, x)
            fd = finite_difference_jacobian(
                lambda y: approach_cone_g(cone, y)[0], x)
            np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-5)

    def test_validation(self):
        with pytest.raises(ValueError, match="unit"):
            ConeSpec(e_ac=np.array([0.0, 0, 2.0]), theta_ac=0.5)
        with pytest.raises(ValueError, match="half angle"):
            ConeSpec(e_ac=np.array([0.0, 0, 1.0]), theta_ac=2.0)


class TestPolytopeProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_projection_on_boundary_and_distance_consistency(self, seed):
        rng = np.random.default_rng(seed)
        H, h, z0 = random_polytope(rng, 6, 3)
        P = Polytope(H, h)
        z = z0 + rng.standard_normal(3) * 3.0
        d = signed_distance(P, z)
        zb = boundary_projection(P, z)
        # Boundary points have (near-)zero signed distance and their
        # distance to z reproduces |d|.
        assert abs(signed_distance(P, zb)) < 1e-7
        assert np.linalg.norm(z - zb) == pytest.approx(abs(d), abs=1e-7)
