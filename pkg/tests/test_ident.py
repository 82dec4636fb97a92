import logging

import numpy as np
import pytest

from ddpc_lab.exceptions import DimensionMismatch, InsufficientData, RankDeficient
from ddpc_lab.ident import (
    build_closed_loop_regression,
    build_regression,
    eb_objective,
    eb_tune,
    kernel_matrix,
    kernel_posterior,
    ols_estimate,
    shaped_estimate,
)
from ddpc_lab.models import (
    ArxStructure,
    KernelConfig,
    KernelFamily,
    Method,
    PredictorTheta,
    Regime,
    RegressionProblem,
    Trajectory,
)
from ddpc_lab.numerics import RngState, is_psd
from ddpc_lab.plant import collect_training_data, steady_state_kf
from tests.helpers import simulate_arx


def random_problem(rng, rows=60, structure=None, noise=0.1):
    structure = structure or ArxStructure(na=2, nb=2)
    H = rng.standard_normal((rows, structure.n_theta))
    theta = rng.standard_normal(structure.n_theta)
    yvec = H @ theta + noise * rng.standard_normal(rows)
    return RegressionProblem(H=H, yvec=yvec, structure=structure)


def random_spd(rng, dim):
    a = rng.standard_normal((dim, dim))
    return a.T @ a + np.eye(dim)


class TestBuildRegression:
    """Tests for build_regression."""

    def test_hand_assembled_rows(self):
        traj = Trajectory(u=[4.0, 5.0, 6.0], y=[1.0, 2.0, 3.0])
        prob = build_regression(traj, ArxStructure(na=1, nb=0))
        np.testing.assert_array_equal(prob.H, [[1.0, 5.0], [2.0, 6.0]])
        np.testing.assert_array_equal(prob.yvec, [2.0, 3.0])

    def test_too_short(self):
        traj = Trajectory(u=[1.0, 2.0], y=[1.0, 2.0])
        with pytest.raises(InsufficientData):
            build_regression(traj, ArxStructure(na=2, nb=0))

    def test_signal_dimensions_checked(self):
        traj = Trajectory(u=np.zeros((10, 2)), y=np.zeros(10))
        with pytest.raises(DimensionMismatch):
            build_regression(traj, ArxStructure(na=1, nb=1))

    def test_noise_free_recovery_siso(self, rng, random_theta):
        structure = ArxStructure(na=3, nb=2)
        theta = random_theta(structure)
        u = rng.standard_normal(200)
        traj = Trajectory(u=u, y=simulate_arx(theta, u))
        prob = build_regression(traj, structure)

        assert prob.rows == 200 - 3
        assert np.max(np.abs(prob.yvec - prob.H @ theta.values)) < 1e-10
        est = ols_estimate(prob)
        np.testing.assert_allclose(est.theta_bar.values, theta.values, atol=1e-8)
        assert est.trace_sigma_theta < 1e-12

    def test_noise_free_recovery_mimo(self, rng, random_theta):
        structure = ArxStructure(na=1, nb=1, n_y=2, n_u=2)
        theta = random_theta(structure)
        u = rng.standard_normal((150, 2))
        traj = Trajectory(u=u, y=simulate_arx(theta, u))
        prob = build_regression(traj, structure)

        assert prob.H.shape == ((150 - 1) * 2, structure.n_theta)
        est = ols_estimate(prob)
        np.testing.assert_allclose(est.theta_bar.values, theta.values, atol=1e-8)


class TestClosedLoopRegression:
    """Tests for build_closed_loop_regression."""

    def test_feedthrough_dropped_on_sinusoid_feedback_data(self, benchmark_system, caplog):
        traj = collect_training_data(benchmark_system, Regime.WEAK, 150, RngState(0, 0))
        structure = ArxStructure(na=10, nb=10)
        full = build_regression(traj, structure)
        theta, *_ = np.linalg.lstsq(full.H, full.yvec, rcond=None)
        assert np.linalg.norm(full.yvec - full.H @ theta) < 1e-8 * np.linalg.norm(full.yvec)

        with caplog.at_level(logging.WARNING, logger="ddpc_lab.ident"):
            prob = build_closed_loop_regression(traj, structure)
        assert not prob.structure.include_feedthrough
        assert prob.structure.n_theta == 20
        assert "feedback law" in caplog.text
        assert ols_estimate(prob).residual_rms > 1e-3

    def test_feedthrough_kept_on_square_wave_data(self, benchmark_system):
        traj = collect_training_data(benchmark_system, Regime.INFORMATIVE, 150, RngState(0, 0))
        prob = build_closed_loop_regression(traj, ArxStructure(na=10, nb=10))
        assert prob.structure.include_feedthrough

    def test_feedthrough_kept_on_noise_free_data(self, noise_free_system):
        traj = collect_training_data(noise_free_system, Regime.WEAK, 150, RngState(0, 0))
        prob = build_closed_loop_regression(traj, ArxStructure(na=4, nb=4))
        assert prob.structure.include_feedthrough

    def test_requested_structure_without_feedthrough(self, benchmark_system):
        traj = collect_training_data(benchmark_system, Regime.WEAK, 150, RngState(0, 0))
        structure = ArxStructure(na=10, nb=10, include_feedthrough=False)
        assert build_closed_loop_regression(traj, structure).structure == structure

    def test_eb_noise_level_on_sinusoid_feedback_data(self, benchmark_system):
        gain = steady_state_kf(benchmark_system)
        C = benchmark_system.C
        innovation = float((C @ gain.P @ C.T)[0, 0]) + benchmark_system.sigma_v2
        for seed in range(3):
            traj = collect_training_data(benchmark_system, Regime.WEAK, 150, RngState(seed, 0))
            prob = build_closed_loop_regression(traj, ArxStructure(na=10, nb=10))
            _, sigma2 = eb_tune(prob, KernelFamily.SS)
            assert 0.3 * innovation < sigma2 < 3.0 * innovation


class TestOlsEstimate:
    """Tests for ols_estimate."""

    def test_identity_regressor(self):
        v = np.array([1.5, -2.0])
        prob = RegressionProblem(H=np.eye(2), yvec=v, structure=ArxStructure(na=1, nb=0))
        est = ols_estimate(prob)
        np.testing.assert_allclose(est.theta_bar.values, v)
        assert est.sigma2 == 1e-12
        assert est.method == Method.OLS
        assert not est.ridge_fallback

    def test_noise_variance_estimate(self, rng):
        prob = random_problem(rng, rows=2000, noise=0.1)
        est = ols_estimate(prob)
        assert est.sigma2 == pytest.approx(0.01, rel=0.1)
        assert is_psd(est.sigma_theta)

    def test_rank_deficient(self, rng):
        column = rng.standard_normal(20)
        H = np.column_stack([column, np.zeros(20)])
        prob = RegressionProblem(H=H, yvec=column, structure=ArxStructure(na=1, nb=0))
        with pytest.raises(RankDeficient):
            ols_estimate(prob)

    def test_ridge_fallback_is_flagged(self, rng, caplog):
        column = rng.standard_normal(20)
        H = np.column_stack([column, np.zeros(20)])
        prob = RegressionProblem(H=H, yvec=column, structure=ArxStructure(na=1, nb=0))
        with caplog.at_level(logging.WARNING, logger="ddpc_lab.ident"):
            est = ols_estimate(prob, ridge_fallback=True)
        assert est.ridge_fallback
        assert "ridge" in caplog.text
        np.testing.assert_allclose(H @ est.theta_bar.values, column, atol=1e-6)


class TestKernelMatrix:
    """Tests for the TC/SS prior covariance."""

    def test_tc_formula(self):
        cfg = KernelConfig(KernelFamily.TC, c_y=1.0, lambda_y=0.5, c_u=2.0, lambda_u=0.9)
        K = kernel_matrix(cfg, ArxStructure(na=2, nb=0))
        np.testing.assert_allclose(K[:2, :2], [[0.5, 0.25], [0.25, 0.25]])
        assert K[2, 2] == pytest.approx(2.0 * 0.9)
        np.testing.assert_array_equal(K[:2, 2], [0.0, 0.0])

    def test_ss_formula(self):
        cfg = KernelConfig(KernelFamily.SS, c_y=1.0, lambda_y=0.5, c_u=1.0, lambda_u=0.5)
        K = kernel_matrix(cfg, ArxStructure(na=2, nb=0))
        lam = 0.5
        assert K[0, 0] == pytest.approx(lam ** 3 / 2 - lam ** 3 / 6)
        assert K[0, 1] == pytest.approx(lam ** 5 / 2 - lam ** 6 / 6)
        # input lag 0 sits at kernel index 1
        assert K[2, 2] == pytest.approx(K[0, 0])

    def test_symmetric_psd(self, rng):
        for family in KernelFamily:
            for _ in range(5):
                cfg = KernelConfig(family, rng.uniform(0.1, 10), rng.uniform(0.5, 0.999),
                                   rng.uniform(0.1, 10), rng.uniform(0.5, 0.999))
                K = kernel_matrix(cfg, ArxStructure(na=10, nb=10))
                np.testing.assert_array_equal(K, K.T)
                assert is_psd(K)

    def test_fast_decay_is_nearly_diagonal(self):
        cfg = KernelConfig(KernelFamily.TC, 1.0, 1e-6, 1.0, 1e-6)
        K = kernel_matrix(cfg, ArxStructure(na=3, nb=2))
        off_diagonal = K - np.diag(np.diag(K))
        assert np.max(np.abs(off_diagonal)) <= 1e-5 * np.max(np.abs(K))

    def test_mimo_shares_lag_kernel(self):
        cfg = KernelConfig(KernelFamily.TC, 1.0, 0.5, 1.0, 0.5)
        structure = ArxStructure(na=2, nb=0, n_y=2, n_u=1)
        K = kernel_matrix(cfg, structure)
        assert K.shape == (structure.n_theta, structure.n_theta)
        np.testing.assert_allclose(K[:4, :4], 0.5 * np.eye(4))
        np.testing.assert_allclose(K[:4, 4:8], 0.25 * np.eye(4))


class TestKernelPosterior:
    """Tests for kernel_posterior."""

    def test_diffuse_prior_matches_ols(self, rng):
        prob = random_problem(rng)
        ols = ols_estimate(prob)
        est = kernel_posterior(prob, 1e8 * np.eye(prob.structure.n_theta), 0.01)
        np.testing.assert_allclose(est.theta_bar.values, ols.theta_bar.values, rtol=1e-5, atol=1e-8)
        assert est.method == Method.SS

    def test_method_follows_kernel_family(self, rng):
        prob = random_problem(rng)
        K = 1e2 * np.eye(prob.structure.n_theta)
        tc = KernelConfig(KernelFamily.TC, 1.0, 0.8, 1.0, 0.8)
        ss = KernelConfig(KernelFamily.SS, 1.0, 0.8, 1.0, 0.8)
        assert kernel_posterior(prob, K, 0.01, tc).method == Method.TC
        assert kernel_posterior(prob, K, 0.01, ss).method == Method.SS

    def test_strong_prior_shrinks_to_zero(self, rng):
        prob = random_problem(rng)
        est = kernel_posterior(prob, 1e-12 * np.eye(prob.structure.n_theta), 0.01)
        assert np.max(np.abs(est.theta_bar.values)) < 1e-6

    def test_gradient_vanishes(self, rng):
        for _ in range(50):
            prob = random_problem(rng, rows=40)
            K = random_spd(rng, prob.structure.n_theta)
            sigma2 = rng.uniform(0.05, 1.0)
            theta = kernel_posterior(prob, K, sigma2).theta_bar.values
            grad = -prob.H.T @ (prob.yvec - prob.H @ theta) / sigma2 + np.linalg.solve(K, theta)
            assert np.linalg.norm(grad) < 1e-6

    def test_covariance_matches_dense_inverse(self, rng):
        prob = random_problem(rng)
        K = random_spd(rng, prob.structure.n_theta)
        est = kernel_posterior(prob, K, 0.1)
        assert is_psd(est.sigma_theta)
        dense = np.linalg.inv(prob.H.T @ prob.H / 0.1 + np.linalg.inv(K))
        np.testing.assert_allclose(est.sigma_theta, dense, rtol=1e-6, atol=1e-10)

    def test_rejects_non_positive_noise(self, rng):
        prob = random_problem(rng)
        with pytest.raises(ValueError):
            kernel_posterior(prob, np.eye(prob.structure.n_theta), 0.0)


class TestShapedEstimate:
    """Tests for the sensitivity-shaped second-stage estimate."""

    @pytest.fixture
    def setup(self, rng):
        prob = random_problem(rng)
        n = prob.structure.n_theta
        K = random_spd(rng, n)
        theta_bar = PredictorTheta(prob.structure, rng.standard_normal(n))
        W = random_spd(rng, n)
        return prob, K, theta_bar, W

    def test_zero_mu_reproduces_kernel_posterior(self, setup):
        prob, K, theta_bar, W = setup
        base = kernel_posterior(prob, K, 0.1)
        shaped = shaped_estimate(prob, K, 0.1, theta_bar, W, mu=0.0)
        np.testing.assert_array_equal(shaped.theta_bar.values, base.theta_bar.values)
        np.testing.assert_array_equal(shaped.sigma_theta, base.sigma_theta)
        assert shaped.method == Method.SSW

    def test_dominant_penalty_pulls_to_anchor(self, setup):
        prob, K, theta_bar, W = setup
        shaped = shaped_estimate(prob, K, 0.1, theta_bar, W, mu=1e8)
        np.testing.assert_allclose(shaped.theta_bar.values, theta_bar.values, atol=1e-4)

    def test_gradient_vanishes(self, rng):
        for _ in range(50):
            prob = random_problem(rng, rows=40)
            n = prob.structure.n_theta
            K, W = random_spd(rng, n), random_spd(rng, n)
            anchor = PredictorTheta(prob.structure, rng.standard_normal(n))
            sigma2 = rng.uniform(0.05, 1.0)
            theta = shaped_estimate(prob, K, sigma2, anchor, W, mu=1.0).theta_bar.values
            grad = (-prob.H.T @ (prob.yvec - prob.H @ theta) / sigma2 + np.linalg.solve(K, theta)
                    + W @ (theta - anchor.values))
            assert np.linalg.norm(grad) < 1e-6

    def test_trace_non_increasing_in_mu(self, setup):
        prob, K, theta_bar, W = setup
        traces = [shaped_estimate(prob, K, 0.1, theta_bar, W, mu).trace_sigma_theta for mu in (0.0, 0.1, 1.0, 10.0)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(traces, traces[1:]))
        assert is_psd(shaped_estimate(prob, K, 0.1, theta_bar, W, 10.0).sigma_theta)

    def test_invalid_arguments(self, setup):
        prob, K, theta_bar, W = setup
        with pytest.raises(ValueError):
            shaped_estimate(prob, K, 0.1, theta_bar, W, mu=-1.0)
        with pytest.raises(DimensionMismatch):
            shaped_estimate(prob, K, 0.1, theta_bar, np.eye(2), mu=1.0)


class TestEmpiricalBayes:
    """Tests for eb_objective and eb_tune."""

    def test_objective_matches_dense_formula(self, rng):
        structure = ArxStructure(na=1, nb=1)
        prob = random_problem(rng, rows=5, structure=structure)
        cfg = KernelConfig(KernelFamily.SS, 2.0, 0.8, 0.5, 0.7)
        sigma2 = 0.3
        K = kernel_matrix(cfg, structure)
        Sigma_y = prob.H @ K @ prob.H.T + sigma2 * np.eye(5)
        dense = np.linalg.slogdet(Sigma_y)[1] + prob.yvec @ np.linalg.solve(Sigma_y, prob.yvec)
        assert eb_objective(prob, cfg, sigma2) == pytest.approx(dense, abs=1e-8)

    def test_generating_noise_level_is_preferred(self):
        structure = ArxStructure(na=3, nb=2)
        cfg = KernelConfig(KernelFamily.TC, 1.0, 0.8, 1.0, 0.8)
        L = np.linalg.cholesky(kernel_matrix(cfg, structure))
        sigma2 = 0.05
        at_truth, inflated = [], []
        for seed in range(20):
            gen = np.random.default_rng(seed)
            H = gen.standard_normal((200, structure.n_theta))
            theta = L @ gen.standard_normal(structure.n_theta)
            prob = RegressionProblem(H=H, yvec=H @ theta + np.sqrt(sigma2) * gen.standard_normal(200),
                                     structure=structure)
            at_truth.append(eb_objective(prob, cfg, sigma2))
            inflated.append(eb_objective(prob, cfg, 100 * sigma2))
        assert np.mean(at_truth) < np.mean(inflated)

    def test_tuned_values_within_bounds(self, rng):
        prob = random_problem(rng, rows=80, structure=ArxStructure(na=2, nb=2))
        cfg, sigma2 = eb_tune(prob, KernelFamily.TC)
        c_lo, c_hi = KernelConfig.C_BOUNDS
        l_lo, l_hi = KernelConfig.LAMBDA_BOUNDS
        assert cfg.family == KernelFamily.TC
        assert c_lo <= cfg.c_y <= c_hi and c_lo <= cfg.c_u <= c_hi
        assert l_lo <= cfg.lambda_y <= l_hi and l_lo <= cfg.lambda_u <= l_hi
        assert sigma2 > 0

    def test_tuned_point_beats_grid_center(self, rng):
        prob = random_problem(rng, rows=80, structure=ArxStructure(na=2, nb=2))
        cfg, sigma2 = eb_tune(prob, KernelFamily.SS)
        center = KernelConfig(KernelFamily.SS, 1e-2, np.sqrt(0.5 * 0.999), 1e-2, np.sqrt(0.5 * 0.999))
        scale = prob.yvec @ prob.yvec / prob.rows
        assert eb_objective(prob, cfg, sigma2) <= eb_objective(prob, center, 1e-4 * scale) + 1e-9

    def test_needs_enough_rows(self, rng):
        prob = random_problem(rng, rows=5, structure=ArxStructure(na=3, nb=3))
        with pytest.raises(InsufficientData):
            eb_tune(prob, KernelFamily.TC)

    @pytest.mark.slow
    def test_recovers_decay_rate(self):
        structure = ArxStructure(na=10, nb=10)
        truth = KernelConfig(KernelFamily.TC, 1.0, 0.8, 1.0, 0.8)
        L = np.linalg.cholesky(kernel_matrix(truth, structure))
        errors = []
        for seed in range(20):
            gen = np.random.default_rng(100 + seed)
            H = gen.standard_normal((300, structure.n_theta))
            theta = L @ gen.standard_normal(structure.n_theta)
            prob = RegressionProblem(H=H, yvec=H @ theta + 0.1 * gen.standard_normal(300), structure=structure)
            cfg, _ = eb_tune(prob, KernelFamily.TC)
            errors.append(0.5 * (abs(cfg.lambda_y - 0.8) + abs(cfg.lambda_u - 0.8)))
        assert np.mean(errors) <= 0.15
