import math

import numpy as np
import pytest

from nmpc_forge import offsetfree as of
from nmpc_forge import runtime as rt

from conftest import build_motor_ocp


class TestTargetSelect:
    def test_hand_case_negative_reference(self):
        x_s, u_s = of.target_select(-3.0, 0.5)
        assert np.abs(x_s - [-3.0, 0.0]).max() <= 1e-12
        assert abs(u_s - (-0.5)) <= 1e-12

    def test_origin(self):
        x_s, u_s = of.target_select(0.0, 0.0)
        assert np.abs(x_s).max() == 0.0 and u_s == 0.0

    def test_positive_reference(self):
        x_s, u_s = of.target_select(1.0, -0.2)
        assert np.abs(x_s - [1.0, 0.0]).max() <= 1e-12
        assert abs(u_s - 0.2) <= 1e-12

    def test_defining_equations_hold(self):
        rng = np.random.default_rng(2)
        A = np.array([[0.0, 1.0], [0.0, -10.0]])
        B = np.array([0.0, 20.0])
        for _ in range(20):
            y_r = rng.uniform(-5, 5)
            d = rng.uniform(-1, 1)
            x_s, u_s = of.target_select(y_r, d)
            resid = A @ x_s + B * (u_s + d)
            assert np.abs(resid).max() <= 1e-12
            assert abs(x_s[0] - y_r) <= 1e-12


class TestPlant:
    def test_equilibrium(self):
        plant = of.LinearPlant()
        x, y = plant.step([0.0, 0.0], 0.0, 0.0, 0.00333)
        assert np.all(x == 0.0) and y == 0.0

    def test_saturation(self):
        plant = of.LinearPlant()
        a, _ = plant.step([0.0, 0.0], 15.0, 0.0, 0.05)
        b, _ = plant.step([0.0, 0.0], 10.0, 0.0, 0.05)
        assert np.array_equal(a, b)

    def test_matches_fine_rk4_oracle(self):
        # Exact discretization against a 100-substep RK4 of the same ODE.
        a_, b_ = 10.0, 20.0

        def rhs(x, u):
            return np.array([x[1], -a_ * x[1] + b_ * u])

        def rk4_fine(x, u, dt, n=100):
            h = dt / n
            x = np.array(x, dtype=float)
            for _ in range(n):
                k1 = rhs(x, u)
                k2 = rhs(x + h / 2 * k1, u)
                k3 = rhs(x + h / 2 * k2, u)
                k4 = rhs(x + h * k3, u)
                x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            return x

        plant = of.LinearPlant(b_scale=1.0, coulomb_v=0.0)
        got, _ = plant.step([0.0, 0.0], 1.0, 0.0, 0.00333)
        ref = rk4_fine([0.0, 0.0], 1.0, 0.00333)
        assert np.abs(got - ref).max() <= 1e-9

    def test_stiction_holds_small_drives(self):
        plant = of.LinearPlant(coulomb_v=0.3)
        x, _ = plant.step([1.0, 0.0], 0.2, 0.0, 0.01)
        assert np.array_equal(x, [1.0, 0.0])
        x, _ = plant.step([1.0, 0.0], 0.5, 0.0, 0.01)
        assert x[1] != 0.0  # breaks away above the friction level

    def test_encoder_quantization(self):
        plant = of.LinearPlant(encoder_counts=4096)
        step = 2 * math.pi / 4096
        assert plant.output([0.4 * step, 0.0]) == 0.0
        assert plant.output([0.6 * step, 0.0]) == pytest.approx(step)


class TestKalman:
    def setup_pieces(self, dt=1.0 / 300.0):
        model = of.AugmentedModel.from_motor(10.0, 20.0, dt)
        cfg = of.KalmanCfg()
        return model, cfg

    def test_augmented_structure(self):
        model, _ = self.setup_pieces()
        assert model.A_bar[2].tolist() == [0.0, 0.0, 1.0]
        assert model.C_bar.tolist() == [1.0, 0.0, 0.0]
        # x-rows carry the ZOH pair and the disturbance acts like the input.
        assert np.allclose(model.A_bar[:2, 2], model.B_bar[:2])

    def test_estimate_converges_with_exact_model(self):
        # The filter estimates the state at the measurement instant, so the
        # comparison is against the pre-step plant state.
        dt = 1.0 / 300.0
        model, cfg = self.setup_pieces(dt)
        kf = of.KalmanState(np.array([0.3, -0.2, 0.1]), np.eye(3) * 1e-2)
        plant = of.LinearPlant(b_scale=1.0, coulomb_v=0.0)
        x = np.array([0.0, 0.0])
        x_at_meas = x
        for k in range(200):
            x_at_meas = x
            kf = of.kf_step(kf, model, cfg, 0.5, x[0])
            x, _ = plant.step(x, 0.5, 0.0, dt)
        assert np.abs(kf.x_hat[:2] - x_at_meas).max() <= 1e-6

    def test_disturbance_estimate_converges(self):
        dt = 1.0 / 300.0
        model, cfg = self.setup_pieces(dt)
        kf = of.KalmanState.from_cfg(cfg)
        plant = of.LinearPlant(b_scale=1.0, coulomb_v=0.0)
        x = np.array([0.0, 0.0])
        hit = None
        for k in range(int(2.0 / dt)):
            y = x[0]
            kf = of.kf_step(kf, model, cfg, 0.0, y)
            if hit is None and k * dt > 0.05 and abs(kf.x_hat[2] - 0.5) <= 1e-3:
                hit = k * dt
            x, _ = plant.step(x, 0.0, 0.5, dt)
        assert hit is not None and hit < 2.0
        assert abs(kf.x_hat[2] - 0.5) <= 1e-3

    def test_zero_innovation_keeps_prediction(self):
        model, cfg = self.setup_pieces()
        kf = of.KalmanState(np.array([0.2, 0.1, -0.3]), np.eye(3) * 1e-2)
        pred = model.A_bar @ kf.x_hat + model.B_bar * 0.7
        y = float(model.C_bar @ pred)
        out = of.kf_step(kf, model, cfg, 0.7, y)
        assert np.abs(out.x_hat - pred).max() <= 1e-15

    def test_covariance_stays_symmetric_psd(self):
        model, cfg = self.setup_pieces()
        kf = of.KalmanState.from_cfg(cfg)
        rng = np.random.default_rng(0)
        for _ in range(2000):
            kf = of.kf_step(kf, model, cfg, rng.uniform(-1, 1),
                            rng.uniform(-0.1, 0.1))
            assert np.array_equal(kf.P, kf.P.T)
        assert np.linalg.eigvalsh(kf.P).min() >= -1e-12


class TestSignals:
    def test_step_signal(self):
        sig = of.step_signal([(0.0, 0.0), (1.0, -3.0), (3.0, 0.0)])
        assert sig(0.5) == 0.0
        assert sig(1.0) == -3.0
        assert sig(2.999) == -3.0
        assert sig(3.0) == 0.0

    def test_scenario_validation(self):
        with pytest.raises(of.OffsetFreeError):
            of.ScenarioCfg(total_time=1.0, mode="bogus")
        cfg = of.ScenarioCfg(total_time=10.0)
        assert cfg.n_samples == 3000
        assert cfg.dt * cfg.N == pytest.approx(cfg.T)


@pytest.fixture(scope="module")
def motor_instance():
    return rt.initialize(rt.export_bundle(build_motor_ocp(), name="motor"))


class TestClosedLoop:
    def short_scenario(self, mode, **kw):
        args = dict(
            total_time=2.0,
            reference=[(0.0, 0.0), (0.3, -1.0)],
            disturbance=[(0.0, 0.0), (1.0, 0.3)],
            mode=mode,
        )
        args.update(kw)
        return of.ScenarioCfg(**args)

    def test_offset_free_short_run(self, motor_instance):
        log = of.run_closed_loop(self.short_scenario("offset_free"),
                                 motor_instance)
        assert len(log) == 600
        assert log.summary()["failed_solves"] == 0
        assert np.abs(log.u_applied).max() <= 10.0
        assert log.mean_error_over(1.9, 2.0) <= 2e-3

    def test_traditional_keeps_offset(self, motor_instance):
        log = of.run_closed_loop(self.short_scenario("traditional"),
                                 motor_instance)
        assert log.mean_error_over(1.7, 2.0) >= 0.02

    def test_zero_disturbance_zero_mismatch_traditional(self):
        inst = rt.initialize(rt.export_bundle(build_motor_ocp(), name="motor"))
        scen = self.short_scenario(
            "traditional",
            reference=[(0.0, 0.0)],
            disturbance=[(0.0, 0.0)],
            plant=of.LinearPlant(b_scale=1.0, coulomb_v=0.0))
        log = of.run_closed_loop(scen, inst)
        assert log.mean_error_over(1.0, 2.0) <= 1e-6

    def test_zero_length_scenario(self, motor_instance):
        log = of.run_closed_loop(of.ScenarioCfg(total_time=0.0), motor_instance)
        assert len(log) == 0

    def test_dimension_mismatch_rejected(self, pendulum_nlp):
        from nmpc_forge.runtime import Bundle, Instance
        bundle = Bundle(name="pendulum", nlp=pendulum_nlp)
        inst = Instance(bundle)
        with pytest.raises(of.OffsetFreeError, match="parameter"):
            of.run_closed_loop(of.ScenarioCfg(total_time=0.1), inst)

    def test_csv_shape(self, motor_instance):
        scen = of.ScenarioCfg(total_time=0.05)
        log = of.run_closed_loop(scen, motor_instance)
        text = log.to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(of.LOG_COLUMNS)
        assert len(lines) == 1 + len(log)
