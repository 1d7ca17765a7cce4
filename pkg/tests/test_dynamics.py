import numpy as np
import pytest

from ctscvx.dynamics import (
    CONTROL_MAP,
    CWModel,
    ControlParametrization,
    DoubleIntegratorModel,
    ReferenceOrbit,
    StaticModel,
    TimeGrid,
    eval_control,
    free_drift,
    free_drift_batch,
    integrate_interval,
)
from oracles import cw_stm, finite_difference_jacobian

ZOH = ControlParametrization("zoh")
IMPULSE = ControlParametrization("impulse")


class TestEvalControl:
    def test_fbp_within_burn(self):
        fbp = ControlParametrization("fbp", t_burn=0.25)
        u = eval_control(fbp, 0.1, 0.0, np.array([1.0, 0, 0]))
        np.testing.assert_array_equal(u, [1.0, 0, 0])

    def test_fbp_after_burn(self):
        fbp = ControlParametrization("fbp", t_burn=0.25)
        u = eval_control(fbp, 0.3, 0.0, np.array([1.0, 0, 0]))
        np.testing.assert_array_equal(u, np.zeros(3))

    def test_zoh_holds(self):
        u = eval_control(ZOH, 0.7, 0.0, np.array([2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(u, [2.0, 3.0, 4.0])

    def test_impulse_has_no_pointwise_value(self):
        with pytest.raises(ValueError, match="impulse has no pointwise value"):
            eval_control(IMPULSE, 0.0, 0.0, np.zeros(3))

    def test_fbp_requires_positive_burn(self):
        with pytest.raises(ValueError):
            ControlParametrization("fbp", t_burn=0.0)
        with pytest.raises(ValueError):
            ControlParametrization("fbp")

    def test_cost_coefficient(self):
        assert ZOH.cost_coefficient(1.0, 3.5) == 2.5
        assert IMPULSE.cost_coefficient(1.0, 3.5) == 1.0
        fbp = ControlParametrization("fbp", t_burn=0.1)
        assert fbp.cost_coefficient(1.0, 3.5) == 1.0


class TestIntegrateInterval:
    def test_cw_equilibrium(self):
        model = CWModel(n=0.04)
        x_end, _ = integrate_interval(model, ZOH, 0.0, 2.0, np.zeros(6),
                                      np.zeros(3))
        np.testing.assert_allclose(x_end, np.zeros(6), atol=1e-14)

    def test_double_integrator_analytic(self):
        model = DoubleIntegratorModel()
        x_end, _ = integrate_interval(model, ZOH, 0.0, 1.0, np.zeros(6),
                                      np.array([1.0, 0, 0]))
        np.testing.assert_allclose(x_end, [0.5, 0, 0, 1.0, 0, 0], atol=1e-12)

    def test_cw_matches_analytic_stm(self, rng):
        n = 0.3
        model = CWModel(n=n)
        x0 = rng.standard_normal(6)
        x_end, _ = integrate_interval(model, ZOH, 0.0, 2.0, x0, np.zeros(3),
                                      steps=200)
        expected = cw_stm(n, 2.0) @ x0
        np.testing.assert_allclose(x_end, expected, rtol=1e-8, atol=1e-10)

    def test_impulse_is_velocity_jump_then_drift(self, rng):
        n = 0.1
        model = CWModel(n=n)
        x0 = rng.standard_normal(6)
        dv = np.array([0.1, -0.2, 0.05])
        x_end, _ = integrate_interval(model, IMPULSE, 0.0, 1.0, x0, dv,
                                      steps=100)
        expected = cw_stm(n, 1.0) @ (x0 + CONTROL_MAP @ dv)
        np.testing.assert_allclose(x_end, expected, rtol=1e-9, atol=1e-11)

    def test_fbp_burn_then_coast(self):
        model = DoubleIntegratorModel()
        fbp = ControlParametrization("fbp", t_burn=0.5)
        u = np.array([2.0, 0, 0])
        x_end, _ = integrate_interval(model, fbp, 0.0, 1.0, np.zeros(6), u)
        # burn: r=0.25, v=1; coast 0.5: r=0.25+0.5
        np.testing.assert_allclose(x_end, [0.75, 0, 0, 1.0, 0, 0], atol=1e-12)

    def test_fbp_burn_longer_than_interval_rejected(self):
        model = DoubleIntegratorModel()
        fbp = ControlParametrization("fbp", t_burn=2.0)
        with pytest.raises(ValueError, match="burn duration"):
            integrate_interval(model, fbp, 0.0, 1.0, np.zeros(6), np.zeros(3))

    def test_dense_samples_hit_subtimes(self):
        model = DoubleIntegratorModel()
        subs = [0.0, 0.25, 0.5, 1.0]
        _, samples = integrate_interval(model, ZOH, 0.0, 1.0, np.zeros(6),
                                        np.array([1.0, 0, 0]),
                                        sub_times=subs)
        assert set(samples) == set(subs)
        np.testing.assert_allclose(samples[0.5], [0.125, 0, 0, 0.5, 0, 0],
                                   atol=1e-12)

    def test_rk4_order(self, rng):
        n = 1.0
        model = CWModel(n=n)
        x0 = rng.standard_normal(6)
        exact = cw_stm(n, 2.0) @ x0
        errs = []
        for steps in (8, 16):
            x_end, _ = integrate_interval(model, ZOH, 0.0, 2.0, x0,
                                          np.zeros(3), steps=steps)
            errs.append(np.linalg.norm(x_end - exact))
        ratio = errs[0] / errs[1]
        assert 8.0 < ratio < 32.0


class TestJacobians:
    @pytest.mark.parametrize("case", ["cw", "cr3bp"])
    def test_jacobian_matches_finite_differences(self, case, rng, cr3bp_model):
        model = CWModel(n=0.04) if case == "cw" else cr3bp_model
        for _ in range(100):
            t = rng.uniform(0.0, 48.0)
            x = rng.standard_normal(6) * 10.0
            jac = model.jac_x(t, x)
            fd = finite_difference_jacobian(lambda xx: model.drift(t, xx), x)
            np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("case", ["static", "cw", "cr3bp"])
    def test_control_additivity(self, case, rng, cr3bp_model):
        model = {"static": StaticModel(), "cw": CWModel(n=0.04),
                 "cr3bp": cr3bp_model}[case]
        for _ in range(10):
            t = rng.uniform(0.0, 48.0)
            x = rng.standard_normal(6)
            u = rng.standard_normal(3)
            lhs = model.f(t, x, u) - model.f(t, x, np.zeros(3))
            np.testing.assert_allclose(lhs, CONTROL_MAP @ u, rtol=0,
                                       atol=1e-14)


class TestFreeDrift:
    def test_static_model_constant(self):
        x0 = np.arange(6.0)
        tau, states = free_drift(StaticModel(), 0.0, x0, 2.0, 5)
        assert tau.shape == (5,)
        np.testing.assert_array_equal(states, np.tile(x0, (5, 1)))

    def test_double_integrator_constant_velocity(self):
        x0 = np.array([0.0, 0, 0, 1.0, 0, 0])
        tau, states = free_drift(DoubleIntegratorModel(), 0.0, x0, 2.0, 9)
        np.testing.assert_allclose(states[:, 0], tau, atol=1e-12)
        np.testing.assert_allclose(states[:, 3], 1.0, atol=1e-12)

    def test_cw_matches_stm(self, rng):
        n = 0.2
        x0 = rng.standard_normal(6)
        tau, states = free_drift(CWModel(n=n), 1.0, x0, 5.0, 11,
                                 steps_per_sample=64)
        for t, x in zip(tau, states):
            np.testing.assert_allclose(x, cw_stm(n, t) @ x0, rtol=1e-8,
                                       atol=1e-10)

    def test_batch_matches_scalar(self, rng):
        n = 0.2
        model = CWModel(n=n)
        X0 = rng.standard_normal((7, 6))
        snaps = {t: s for t, s in
                 free_drift_batch(model, 0.0, X0, 3.0, 6)}
        for i, x0 in enumerate(X0):
            tau, states = free_drift(model, 0.0, x0, 3.0, 6)
            for t, x in zip(tau, states):
                np.testing.assert_allclose(snaps[t][i], x, atol=1e-12)


class TestTimeGrid:
    def grid(self):
        return TimeGrid(nodes=np.array([0.0, 1, 2, 3, 4, 5]), n2=2, n3=4,
                        t_safe=2.0)

    def test_phase_lookup(self):
        g = self.grid()
        assert [g.phase_of_interval(k) for k in range(5)] == [1, 1, 2, 2, 3]
        assert g.phase_of_time(0.5) == 1
        assert g.phase_of_time(2.0) == 2
        assert g.phase_of_time(4.7) == 3

    def test_validation(self):
        with pytest.raises(ValueError):
            TimeGrid(nodes=np.array([0.0, 1.0, 0.5]), n2=1, n3=2, t_safe=1.0)
        with pytest.raises(ValueError):
            TimeGrid(nodes=np.array([0.0, 1, 2, 3]), n2=2, n3=1, t_safe=1.0)
        with pytest.raises(ValueError):
            TimeGrid(nodes=np.array([0.0, 1, 2, 3, 4]), n2=1, n3=2, t_safe=-1.0)


class TestReferenceOrbit:
    def test_csv_round_trip(self, reference_orbit_csv, reference_orbit):
        loaded = ReferenceOrbit.from_csv(reference_orbit_csv)
        for t in (0.0, 10.0, 47.9):
            np.testing.assert_allclose(loaded(t), reference_orbit(t),
                                       rtol=1e-9)

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,r1,r2\n0,1,2\n1,3,4\n")
        with pytest.raises(ValueError, match="missing columns"):
            ReferenceOrbit.from_csv(path)


class TestCR3BPRelative:
    def test_zero_state_is_equilibrium(self, cr3bp_model):
        np.testing.assert_allclose(cr3bp_model.drift(5.0, np.zeros(6)),
                                   np.zeros(6), atol=1e-14)

    def test_drift_finite_over_horizon(self, cr3bp_model):
        x0 = np.array([10.0, -5.0, 3.0, 0.5, 0.2, -0.1])
        _, states = free_drift(cr3bp_model, 0.0, x0, 24.0, 13)
        assert np.all(np.isfinite(states))
