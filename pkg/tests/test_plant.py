import numpy as np
import pytest

from ddpc_lab.exceptions import DimensionMismatch
from ddpc_lab.models import BENCHMARK_A, KalmanGain, LtiSystem, Regime
from ddpc_lab.numerics import RngState
from ddpc_lab.plant import (
    collect_training_data,
    dare_residual,
    kf_filter_step,
    predictor_markov_parameters,
    step,
    steady_state_kf,
    tracking_reference,
    training_reference,
)


class TestStep:
    """Tests for the plant simulation step."""

    def test_zero_everything(self, noise_free_system):
        x_next, y = step(noise_free_system, np.zeros(2), np.zeros(1), RngState(0))
        np.testing.assert_array_equal(x_next, np.zeros(2))
        np.testing.assert_array_equal(y, np.zeros(1))

    def test_dc_gain(self, noise_free_system):
        sys = noise_free_system
        x = np.zeros(2)
        for _ in range(500):
            x, y = step(sys, x, np.ones(1), RngState(0))
        expected = sys.C @ np.linalg.solve(np.eye(2) - sys.A, sys.B)
        np.testing.assert_allclose(y, expected.ravel(), atol=1e-10)
        assert y[0] == pytest.approx(0.9995, abs=1e-3)

    def test_benchmark_eigenvalues(self):
        eigenvalues = np.sort(np.linalg.eigvals(np.array(BENCHMARK_A)).real)
        np.testing.assert_allclose(eigenvalues, [0.8187, 0.9048], atol=1e-3)
        assert np.all(np.abs(eigenvalues) < 1.0)

    def test_noise_is_drawn_from_the_stream(self, benchmark_system):
        a = step(benchmark_system, np.zeros(2), np.zeros(1), RngState(1))
        b = step(benchmark_system, np.zeros(2), np.zeros(1), RngState(1))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert np.any(a[0] != 0.0)

    def test_dimension_mismatch(self, benchmark_system):
        with pytest.raises(DimensionMismatch):
            step(benchmark_system, np.zeros(3), np.zeros(1), RngState(0))
        with pytest.raises(DimensionMismatch):
            step(benchmark_system, np.zeros(2), np.zeros(2), RngState(0))


class TestReferences:
    """Tests for the training and tracking references."""

    def test_square_wave(self):
        r = training_reference(Regime.INFORMATIVE, 100)
        assert np.all(r[:25] == 1.0)
        assert np.all(r[25:50] == -1.0)
        assert r[50] == 1.0

    def test_sine(self):
        r = training_reference(Regime.WEAK, 75)
        np.testing.assert_allclose(r, np.sin(2 * np.pi * np.arange(75) / 75))
        assert np.max(np.abs(r)) == pytest.approx(1.0, abs=1e-3)

    def test_tracking_reference(self):
        np.testing.assert_allclose(tracking_reference(150), np.sin(2 * np.pi * np.arange(150) / 75))


class TestCollectTrainingData:
    """Tests for collect_training_data."""

    def test_first_step_informative(self, noise_free_system):
        traj = collect_training_data(noise_free_system, Regime.INFORMATIVE, 50, RngState(0))
        assert traj.u[0, 0] == 1.0
        assert traj.y[0, 0] == 0.0

    def test_length_and_feedback_identity(self, benchmark_system):
        for regime in Regime:
            traj = collect_training_data(benchmark_system, regime, 150, RngState(3))
            assert len(traj) == 150
            np.testing.assert_allclose(traj.u + traj.y, traj.r, atol=1e-12)

    def test_deterministic(self, benchmark_system):
        a = collect_training_data(benchmark_system, Regime.WEAK, 80, RngState(9))
        b = collect_training_data(benchmark_system, Regime.WEAK, 80, RngState(9))
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.y, b.y)

    def test_invalid_length(self, benchmark_system):
        with pytest.raises(ValueError):
            collect_training_data(benchmark_system, Regime.WEAK, 0, RngState(0))

    def test_feedback_needs_square_plant(self):
        sys = LtiSystem(A=np.eye(2) * 0.5, B=np.eye(2), C=[[1.0, 0.0]], D=[[0.0, 0.0]])
        with pytest.raises(DimensionMismatch):
            collect_training_data(sys, Regime.WEAK, 10, RngState(0))


class TestSteadyStateKf:
    """Tests for the steady-state Kalman filter."""

    def test_noise_free_process(self, noise_free_system):
        gain = steady_state_kf(noise_free_system)
        np.testing.assert_array_equal(gain.K, np.zeros((2, 1)))
        np.testing.assert_array_equal(gain.P, np.zeros((2, 2)))

    def test_scalar_riccati_root(self):
        # p = 0.25 p - 0.25 p^2 / (p + 1) + 1  <=>  p^2 - 0.25 p - 1 = 0
        sys = LtiSystem(A=[[0.5]], B=[[1.0]], C=[[1.0]], D=[[0.0]], sigma_w2=1.0, sigma_v2=1.0)
        gain = steady_state_kf(sys)
        p = (0.25 + np.sqrt(0.0625 + 4.0)) / 2.0
        assert gain.P[0, 0] == pytest.approx(p, rel=1e-9)
        assert gain.P[0, 0] == pytest.approx(1.1327822, abs=1e-6)
        assert gain.K[0, 0] == pytest.approx(0.5 * p / (p + 1.0), rel=1e-9)

    def test_benchmark_residual_and_stability(self, benchmark_system):
        gain = steady_state_kf(benchmark_system)
        assert dare_residual(benchmark_system, gain.P) < 1e-9
        np.testing.assert_allclose(gain.P, gain.P.T)
        assert np.linalg.eigvalsh(gain.P).min() >= 0.0
        A_tilde = benchmark_system.A - gain.K @ benchmark_system.C
        assert np.max(np.abs(np.linalg.eigvals(A_tilde))) < 1.0

    def test_requires_measurement_noise(self):
        sys = LtiSystem.benchmark(sigma_w2=0.01, sigma_v2=0.0)
        with pytest.raises(ValueError):
            steady_state_kf(sys)


class TestKfFilterStep:
    """Tests for kf_filter_step."""

    def test_zero_gain_is_open_loop(self, benchmark_system, rng):
        gain = KalmanGain(K=np.zeros((2, 1)), P=np.zeros((2, 2)))
        xhat, u, y = rng.standard_normal(2), rng.standard_normal(1), rng.standard_normal(1)
        np.testing.assert_allclose(kf_filter_step(gain, benchmark_system, xhat, u, y),
                                   benchmark_system.A @ xhat + benchmark_system.B @ u)

    def test_exact_state_stays_exact(self, benchmark_system, noise_free_system, rng):
        gain = steady_state_kf(benchmark_system)
        x = np.zeros(2)
        xhat = x.copy()
        for _ in range(50):
            u = rng.standard_normal(1)
            x_next, y = step(noise_free_system, x, u, RngState(0))
            xhat = kf_filter_step(gain, noise_free_system, xhat, u, y)
            x = x_next
            np.testing.assert_allclose(xhat, x, atol=1e-12)

    def test_innovations_are_white(self, benchmark_system, rng):
        sys = benchmark_system
        gain = steady_state_kf(sys)
        noise = RngState(17)
        x, xhat = np.zeros(2), np.zeros(2)
        innovations, errors = [], []
        for _ in range(500):
            u = rng.standard_normal(1)
            x_next, y = step(sys, x, u, noise)
            innovations.append((y - sys.C @ xhat - sys.D @ u)[0])
            xhat = kf_filter_step(gain, sys, xhat, u, y)
            x = x_next
            errors.append(np.linalg.norm(xhat - x))

        e = np.array(innovations) - np.mean(innovations)
        bound = 3.0 / np.sqrt(len(e))
        for lag in range(1, 6):
            rho = np.dot(e[lag:], e[:-lag]) / np.dot(e, e)
            assert abs(rho) < bound
        assert max(errors) < 10.0 * np.sqrt(np.trace(gain.P))

    def test_dimension_mismatch(self, benchmark_system):
        gain = KalmanGain(K=np.zeros((2, 1)), P=np.zeros((2, 2)))
        with pytest.raises(DimensionMismatch):
            kf_filter_step(gain, benchmark_system, np.zeros(3), np.zeros(1), np.zeros(1))


class TestPredictorMarkovParameters:
    """Tests for predictor_markov_parameters."""

    def test_layout(self, benchmark_system):
        sys = benchmark_system
        gain = steady_state_kf(sys)
        phi_y, phi_u = predictor_markov_parameters(sys, gain, 4)
        assert len(phi_y) == 4
        assert len(phi_u) == 5
        np.testing.assert_array_equal(phi_u[0], sys.D)
        A_tilde = sys.A - gain.K @ sys.C
        np.testing.assert_allclose(phi_y[0], sys.C @ gain.K)
        np.testing.assert_allclose(phi_y[2], sys.C @ A_tilde @ A_tilde @ gain.K)
        np.testing.assert_allclose(phi_u[2], sys.C @ A_tilde @ (sys.B - gain.K @ sys.D))
