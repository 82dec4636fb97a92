"""
Ground-truth LTI plant: noisy simulation, closed-loop training data and the steady-state
Kalman filter used by the oracle controller.
"""
import logging
from typing import Tuple

import numpy as np

from ddpc_lab.exceptions import DimensionMismatch, NoConvergence
from ddpc_lab.models import LtiSystem, Trajectory, KalmanGain, Regime
from ddpc_lab.numerics import RngState, chol_factor, chol_solve, symmetrize

logger = logging.getLogger(__name__)

SQUARE_WAVE_PERIOD = 50
TRAINING_SINE_PERIOD = 75
TEST_SINE_PERIOD = 75

DARE_TOLERANCE = 1e-12
DARE_MAX_ITER = 100_000


def training_reference(regime: Regime, n_steps: int) -> np.ndarray:
    """Reference driving the training feedback loop: +/-1 square wave or unit sine."""
    t = np.arange(n_steps)
    if Regime(regime) == Regime.INFORMATIVE:
        return np.where(t % SQUARE_WAVE_PERIOD < SQUARE_WAVE_PERIOD // 2, 1.0, -1.0)
    return np.sin(2 * np.pi * t / TRAINING_SINE_PERIOD)


def tracking_reference(n_steps: int) -> np.ndarray:
    return np.sin(2 * np.pi * np.arange(n_steps) / TEST_SINE_PERIOD)


def _draw_noise(sys: LtiSystem, rng: RngState) -> Tuple[np.ndarray, np.ndarray]:
    # One draw per step: process noise first, then measurement noise
    e = rng.standard_normal(sys.n + sys.n_y)
    w = np.sqrt(sys.sigma_w2) * e[:sys.n]
    v = np.sqrt(sys.sigma_v2) * e[sys.n:]
    return w, v


def step(sys: LtiSystem, x: np.ndarray, u: np.ndarray, rng: RngState) -> Tuple[np.ndarray, np.ndarray]:
    """Advance the plant one sample: returns ``(x_next, y)`` for the current state and input."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.shape[0] != sys.n or u.shape[0] != sys.n_u:
        raise DimensionMismatch(f"State/input dims ({x.shape[0]}, {u.shape[0]}) do not match system "
                                f"({sys.n}, {sys.n_u})")
    w, v = _draw_noise(sys, rng)
    y = sys.C @ x + sys.D @ u + v
    x_next = sys.A @ x + sys.B @ u + w
    return x_next, y


def collect_training_data(sys: LtiSystem, regime: Regime, N_train: int, rng: RngState) -> Trajectory:
    """Simulate the training loop ``u(t) = r_train(t) - y(t)`` from the zero state."""
    if N_train < 1:
        raise ValueError("N_train must be at least 1")
    if sys.n_u != sys.n_y:
        raise DimensionMismatch("Output feedback training loop needs n_u == n_y")

    r = training_reference(regime, N_train)
    r = np.repeat(r[:, None], sys.n_y, axis=1)
    x = np.zeros(sys.n)
    u_log = np.zeros((N_train, sys.n_u))
    y_log = np.zeros((N_train, sys.n_y))
    loop = np.eye(sys.n_y) + sys.D

    for t in range(N_train):
        w, v = _draw_noise(sys, rng)
        y_free = sys.C @ x + v
        # u = r - y with y = y_free + D u
        u = np.linalg.solve(loop, r[t] - y_free)
        y = y_free + sys.D @ u
        u_log[t] = u
        y_log[t] = y
        x = sys.A @ x + sys.B @ u + w

    logger.debug(f"Collected {N_train} training samples ({Regime(regime).value} regime)")
    return Trajectory(u=u_log, y=y_log, r=r)


def dare_residual(sys: LtiSystem, P: np.ndarray) -> float:
    A, C = sys.A, sys.C
    S = C @ P @ C.T + sys.sigma_v2 * np.eye(sys.n_y)
    correction = A @ P @ C.T @ np.linalg.solve(S, C @ P @ A.T)
    return float(np.linalg.norm(P - (A @ P @ A.T - correction + sys.sigma_w2 * np.eye(sys.n)), "fro"))


def steady_state_kf(sys: LtiSystem) -> KalmanGain:
    """Predictor-form steady-state Kalman gain by fixed-point iteration of the DARE.

    Raises:
        NoConvergence: if the iteration cap is reached before the residual drops below 1e-12
    """
    n, n_y = sys.n, sys.n_y
    if sys.sigma_w2 == 0.0:
        # Noise-free process: P = 0 is the fixed point and the gain vanishes
        return KalmanGain(K=np.zeros((n, n_y)), P=np.zeros((n, n)))
    if sys.sigma_v2 <= 0.0:
        raise ValueError("Steady-state Kalman filter needs sigma_v2 > 0")

    A, C = sys.A, sys.C
    Sigma_w = sys.sigma_w2 * np.eye(n)
    Sigma_v = sys.sigma_v2 * np.eye(n_y)
    P = Sigma_w.copy()
    for iteration in range(DARE_MAX_ITER):
        S = chol_factor(symmetrize(C @ P @ C.T + Sigma_v))
        P_next = A @ P @ A.T - A @ P @ C.T @ chol_solve(S, C @ P @ A.T) + Sigma_w
        P_next = symmetrize(P_next)
        change = np.linalg.norm(P_next - P, "fro")
        P = P_next
        if change < DARE_TOLERANCE:
            break
    else:
        raise NoConvergence(f"DARE iteration did not converge in {DARE_MAX_ITER} iterations")

    S = chol_factor(symmetrize(C @ P @ C.T + Sigma_v))
    K = chol_solve(S, C @ P @ A.T).T

    radius = max(abs(np.linalg.eigvals(A - K @ C)))
    if radius >= 1.0:
        logger.warning(f"Kalman predictor A - KC is not stable (spectral radius {radius:.4f})")
    logger.debug(f"DARE converged after {iteration + 1} iterations, residual {dare_residual(sys, P):.2e}")
    return KalmanGain(K=K, P=P)


def kf_filter_step(gain: KalmanGain, sys: LtiSystem, xhat: np.ndarray, u: np.ndarray,
                   y: np.ndarray) -> np.ndarray:
    """One-step-ahead predictor update ``(A - KC) xhat + (B - KD) u + K y``."""
    xhat = np.asarray(xhat, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if xhat.shape[0] != sys.n or u.shape[0] != sys.n_u or y.shape[0] != sys.n_y:
        raise DimensionMismatch("Filter state, input or output dimension does not match the system")
    A_tilde = sys.A - gain.K @ sys.C
    B_tilde = sys.B - gain.K @ sys.D
    return A_tilde @ xhat + B_tilde @ u + gain.K @ y


def predictor_markov_parameters(sys: LtiSystem, gain: KalmanGain, order: int):
    """Return ``(phi_y, phi_u)``: ``phi_y[i-1] = C Ã^{i-1} K`` for i = 1..order and
    ``phi_u[j] = C Ã^{j-1} B̃`` for j = 0..order with ``phi_u[0] = D``."""
    A_tilde = sys.A - gain.K @ sys.C
    B_tilde = sys.B - gain.K @ sys.D
    phi_y, phi_u = [], [sys.D.copy()]
    power = np.eye(sys.n)
    for _ in range(order):
        phi_y.append(sys.C @ power @ gain.K)
        phi_u.append(sys.C @ power @ B_tilde)
        power = power @ A_tilde
    return phi_y, phi_u
