import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctscvx.discretize import linearize_interval
from ctscvx.dynamics import CWModel, ControlParametrization, DynamicsModel, TimeGrid
from ctscvx.uncertainty import (
    CovarianceTrajectory,
    UncertaintyConfig,
    chi2_quantile,
    dense_covariance,
    fta_gain,
    input_tightening,
    noise_term,
    propagate_node_covariances,
    tighten_halfspace,
)

ZOH = ControlParametrization("zoh")


class DiagonalModel(DynamicsModel):
    """dx = a*x on all six components; analytic covariance growth."""

    def __init__(self, a):
        self.a = a

    def drift(self, t, x):
        return self.a * x

    def jac_x(self, t, x):
        return self.a * np.eye(6)


class TestFtaGain:
    def test_double_integrator_closed_form(self):
        a = np.array([[1.0, 1.0], [0.0, 1.0]])
        b = np.array([[0.5], [1.0]])
        k, cond = fta_gain(a, b)
        np.testing.assert_allclose(k, [[-2.0, -2.0]], atol=1e-12)
        np.testing.assert_allclose((a + b @ k)[0], [0.0, 0.0], atol=1e-12)
        assert np.isfinite(cond)

    def test_zero_position_rows_give_zero_gain(self):
        a = np.block([[np.zeros((3, 6))], [np.random.default_rng(0).standard_normal((3, 6))]])
        b = np.vstack([np.eye(3), np.eye(3)])
        k, _ = fta_gain(a, b)
        np.testing.assert_allclose(k, np.zeros((3, 6)), atol=1e-12)

    def test_cw_residual(self, rng):
        lin = linearize_interval(CWModel(n=0.04), ZOH, 0.0, 4.0,
                                 rng.standard_normal(6), np.zeros(3))
        k, _ = fta_gain(lin.A, lin.B)
        resid = (lin.A + lin.B @ k)[:3]
        np.testing.assert_allclose(resid, np.zeros((3, 6)), atol=1e-10)

    def test_singular_map_rejected(self):
        a = np.eye(2)
        b = np.array([[0.0], [1.0]])
        with pytest.raises(np.linalg.LinAlgError, match="FTA gain undefined"):
            fta_gain(a, b)

    def test_deadbeat_one_step(self, rng):
        lin = linearize_interval(CWModel(n=0.1), ZOH, 0.0, 2.0,
                                 rng.standard_normal(6), np.zeros(3))
        k, _ = fta_gain(lin.A, lin.B)
        dev = rng.standard_normal(6)
        next_dev = (lin.A + lin.B @ k) @ dev
        np.testing.assert_allclose(next_dev[:3], np.zeros(3), atol=1e-9)


class TestNodeCovariances:
    def test_constant_when_noise_free_identity(self):
        sigma = np.diag([1.0, 2, 3, 4, 5, 6])
        traj = propagate_node_covariances(
            [np.eye(6)] * 3, [np.zeros((6, 3))] * 3,
            [np.zeros((3, 6))] * 3, sigma, [np.zeros((6, 6))] * 4,
            np.zeros((3, 3)))
        for k in range(4):
            np.testing.assert_allclose(traj.node_covs[k], sigma, atol=1e-14)

    def test_scalar_chain_hand_recursion(self):
        a, b = 0.9, 0.3
        s_act = 0.04
        s_rr = [0.01, 0.02, 0.03, 0.05]
        s = 1.0 + s_rr[0]
        expected = [s]
        for k in range(3):
            s = a * a * s + s_rr[k + 1] + a * a * s_rr[k] + b * b * s_act
            expected.append(s)
        traj = propagate_node_covariances(
            [np.array([[a]])] * 3, [np.array([[b]])] * 3,
            [np.array([[0.0]])] * 3, np.array([[1.0]]),
            [np.array([[v]]) for v in s_rr], np.array([[s_act]]))
        np.testing.assert_allclose(traj.node_covs.ravel(), expected,
                                   rtol=1e-12)

    def test_open_loop_reduction(self, rng):
        # K = 0 and no measurement noise must reproduce the open-loop
        # recursion Sigma_{k+1} = A Sigma A' + B Sigma_act B'.
        a_mats = [rng.standard_normal((6, 6)) * 0.4 + np.eye(6)
                  for _ in range(4)]
        b_mats = [rng.standard_normal((6, 3)) for _ in range(4)]
        s_act = np.diag([0.1, 0.2, 0.3])
        s_i = np.eye(6)
        traj = propagate_node_covariances(
            a_mats, b_mats, [np.zeros((3, 6))] * 4, s_i,
            [np.zeros((6, 6))] * 5, s_act)
        s = s_i.copy()
        for k in range(4):
            s = a_mats[k] @ s @ a_mats[k].T + b_mats[k] @ s_act @ b_mats[k].T
            np.testing.assert_allclose(traj.node_covs[k + 1], s, rtol=1e-10,
                                       atol=1e-12)

    def test_all_covariances_psd(self, rng):
        a_mats = [np.eye(6) + 0.1 * rng.standard_normal((6, 6))
                  for _ in range(5)]
        b_mats = [rng.standard_normal((6, 3)) for _ in range(5)]
        gains = [0.1 * rng.standard_normal((3, 6)) for _ in range(5)]
        traj = propagate_node_covariances(
            a_mats, b_mats, gains, np.eye(6),
            [0.01 * np.eye(6)] * 6, 0.01 * np.eye(3))
        for c in traj.node_covs:
            assert np.linalg.eigvalsh(c)[0] >= -1e-10
            np.testing.assert_allclose(c, c.T, atol=1e-12)


class TestDenseCovariance:
    def test_constant_for_static_field(self, rng):
        from ctscvx.dynamics import StaticModel
        lin = linearize_interval(StaticModel(), ZOH, 0.0, 1.0, np.zeros(6),
                                 np.zeros(3))
        sigma = np.diag(rng.uniform(0.5, 2.0, 6))
        dense = dense_covariance(lin, sigma, np.zeros((3, 6)),
                                 np.zeros((6, 6)))
        for q in range(dense.shape[0]):
            np.testing.assert_allclose(dense[q], sigma, atol=1e-12)

    def test_exponential_growth_diagonal_field(self):
        a = 0.3
        lin = linearize_interval(DiagonalModel(a), ZOH, 0.0, 1.0,
                                 np.ones(6), np.zeros(3), steps=64)
        sigma = np.eye(6)
        dense = dense_covariance(lin, sigma, np.zeros((3, 6)),
                                 np.zeros((6, 6)))
        for t, s in zip(lin.sub_times, dense):
            np.testing.assert_allclose(s, np.exp(2 * a * t) * np.eye(6),
                                       rtol=1e-8)

    def test_endpoint_matches_node_recursion_cw(self, rng):
        model = CWModel(n=0.2)
        lins = [linearize_interval(model, ZOH, float(k), float(k + 1),
                                   rng.standard_normal(6),
                                   rng.standard_normal(3), steps=64)
                for k in range(3)]
        gains = [fta_gain(l.A, l.B)[0] for l in lins]
        s_rr = [0.01 * np.eye(6)] * 4
        s_act = 0.05 * np.eye(3)
        traj = propagate_node_covariances(
            [l.A for l in lins], [l.B for l in lins], gains, np.eye(6),
            s_rr, s_act)
        for k, lin in enumerate(lins):
            noise = noise_term(lin.A, lin.B, s_rr[k], s_rr[k + 1], s_act)
            dense = dense_covariance(lin, traj.node_covs[k], gains[k], noise)
            np.testing.assert_allclose(dense[-1], traj.node_covs[k + 1],
                                       rtol=1e-6)

    def test_singular_a_rejected(self):
        lin = linearize_interval(CWModel(n=0.1), ZOH, 0.0, 1.0, np.zeros(6),
                                 np.zeros(3))
        lin.A = np.zeros((6, 6))
        with pytest.raises(np.linalg.LinAlgError):
            dense_covariance(lin, np.eye(6), np.zeros((3, 6)),
                             np.zeros((6, 6)))


class TestChi2Quantile:
    def test_one_dof_gaussian_identity(self):
        from scipy.stats import norm
        expected = norm.ppf((1 + 0.8) / 2) ** 2
        assert chi2_quantile(1, 0.8) == pytest.approx(expected, abs=1e-9)
        assert chi2_quantile(1, 0.8) == pytest.approx(1.6423744151, abs=1e-6)

    def test_two_dof_closed_form(self):
        assert chi2_quantile(2, 0.8) == pytest.approx(-2 * np.log(0.2),
                                                      abs=1e-9)

    def test_six_dof_frozen_value(self):
        # Frozen from numerical inversion of the regularized incomplete
        # gamma; cross-checked by 2e6 Monte Carlo chi-squared draws
        # (empirical 0.8-quantile 8.5596).
        assert chi2_quantile(6, 0.8) == pytest.approx(8.558059720, abs=1e-6)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            chi2_quantile(0, 0.5)
        with pytest.raises(ValueError):
            chi2_quantile(13, 0.5)
        with pytest.raises(ValueError):
            chi2_quantile(3, 1.0)


class TestTightenHalfspace:
    def test_zero_covariance(self):
        assert tighten_halfspace(np.ones(6), np.zeros((6, 6)), 0.8, 6) == 0.0

    def test_unit_direction_identity_covariance(self):
        c = tighten_halfspace(np.eye(6)[0], np.eye(6), 0.8, 6)
        assert c == pytest.approx(2.92541616, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_homogeneity(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal(6)
        m = rng.standard_normal((6, 6))
        sigma = m @ m.T
        c1 = tighten_halfspace(a, sigma, 0.9, 6)
        c2 = tighten_halfspace(2 * a, sigma, 0.9, 6)
        assert c2 == pytest.approx(2 * c1, rel=1e-12)

    def test_conservativeness_sampling(self, rng):
        a = rng.standard_normal(6)
        m = rng.standard_normal((6, 6)) * 0.5
        sigma = m @ m.T
        beta = 0.8
        b = 1.0
        c = tighten_halfspace(a, sigma, beta, 6)
        mean = rng.standard_normal(6)
        mean += a * (b - c - a @ mean) / (a @ a)  # place mean on tightened boundary
        draws = rng.multivariate_normal(mean, sigma, size=100_000)
        freq = np.mean(draws @ a <= b)
        sigma_bin = np.sqrt(beta * (1 - beta) / 100_000)
        assert freq >= beta - 3 * sigma_bin


class TestInputTightening:
    def box(self, u_max):
        a = np.vstack([np.eye(3), -np.eye(3)])
        return a, np.full(6, u_max)

    def test_noise_free_unchanged(self):
        a, b = self.box(2.0)
        out = input_tightening(np.zeros((3, 6)), np.eye(6), np.zeros((3, 3)),
                               a, b, 0.8)
        np.testing.assert_allclose(out, b, atol=1e-14)

    def test_isotropic_backoff(self):
        a, b = self.box(10.0)
        sigma = 0.25 * np.eye(3)
        out = input_tightening(np.zeros((3, 6)), np.zeros((6, 6)), sigma,
                               a, b, 0.8)
        expected = 10.0 - 0.5 * np.sqrt(chi2_quantile(3, 0.8))
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_monte_carlo_chance_level(self, rng):
        a, b = self.box(5.0)
        sigma = 0.2 * np.eye(3)
        beta = 0.8
        out = input_tightening(np.zeros((3, 6)), np.zeros((6, 6)), sigma,
                               a, b, beta)
        u = np.array([out[0], 0.0, 0.0])  # on the tightened +u1 face
        draws = rng.multivariate_normal(u, sigma, size=100_000)
        freq = np.mean(np.all(np.abs(draws) <= 5.0, axis=1))
        sigma_bin = np.sqrt(beta * (1 - beta) / 100_000)
        assert freq >= beta - 3 * sigma_bin

    def test_infeasible_tightening(self):
        a, b = self.box(0.1)
        with pytest.raises(ValueError, match="infeasible tightening"):
            input_tightening(np.zeros((3, 6)), np.zeros((6, 6)),
                             100.0 * np.eye(3), a, b, 0.99)


class TestUncertaintyConfig:
    def grid(self):
        return TimeGrid(nodes=np.array([0.0, 10, 20, 30, 40, 48]), n2=2,
                        n3=4, t_safe=24.0)

    def cfg(self):
        return UncertaintyConfig(
            sigma_i=np.eye(6),
            sigma_act=0.1 * np.eye(3),
            sigma_rr_decision=[4.0 * np.eye(6), 2.0 * np.eye(6),
                               1.0 * np.eye(6), 0.5 * np.eye(6)])

    def test_interpolation_hits_anchors(self):
        cfg, grid = self.cfg(), self.grid()
        np.testing.assert_allclose(cfg.sigma_rr_at(0.0, grid), 4 * np.eye(6))
        np.testing.assert_allclose(cfg.sigma_rr_at(20.0, grid), 2 * np.eye(6))
        np.testing.assert_allclose(cfg.sigma_rr_at(48.0, grid), 0.5 * np.eye(6))

    def test_midpoint_interpolation(self):
        cfg, grid = self.cfg(), self.grid()
        np.testing.assert_allclose(cfg.sigma_rr_at(10.0, grid), 3 * np.eye(6))

    def test_beta_validation(self):
        with pytest.raises(ValueError, match="beta_ps"):
            UncertaintyConfig(np.eye(6), np.eye(3), [np.eye(6)] * 4,
                              beta_ps=1.5)
