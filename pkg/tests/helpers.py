"""Shared oracles for the test suite."""
import numpy as np

from ddpc_lab.models import KalmanGain, LtiSystem, PredictorTheta


def simulate_arx(theta: PredictorTheta, u: np.ndarray) -> np.ndarray:
    """Noise-free ARX recursion from zero initial conditions."""
    s = theta.structure
    u = np.asarray(u, dtype=float).reshape(len(u), s.n_u)
    y = np.zeros((len(u), s.n_y))
    for t in range(len(u)):
        for lag in range(1, s.na + 1):
            if t - lag >= 0:
                y[t] += theta.phi_y(lag) @ y[t - lag]
        for lag in range(s.first_input_lag, s.nb + 1):
            if t - lag >= 0:
                y[t] += theta.phi_u(lag) @ u[t - lag]
    return y


def deadbeat_gain(sys: LtiSystem) -> KalmanGain:
    """Observer gain with A - KC nilpotent (Ackermann, single output).

    The predictor built from it is exact after ``n`` lags on noise-free data.
    """
    observability = np.vstack([sys.C @ np.linalg.matrix_power(sys.A, i) for i in range(sys.n)])
    last = np.zeros(sys.n)
    last[-1] = 1.0
    K = np.linalg.matrix_power(sys.A, sys.n) @ np.linalg.solve(observability, last)
    return KalmanGain(K=K.reshape(sys.n, 1), P=np.zeros((sys.n, sys.n)))
