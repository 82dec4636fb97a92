"""
ARX predictor identification: regression assembly, OLS, kernel-regularized posteriors with
Empirical Bayes hyperparameters, and the sensitivity-shaped second-stage estimator.
"""
import dataclasses
import itertools
import logging
from typing import Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize

from ddpc_lab.exceptions import (
    DimensionMismatch,
    InsufficientData,
    NotPositiveDefinite,
    RankDeficient,
)
from ddpc_lab.models import (
    ArxStructure,
    KernelConfig,
    KernelFamily,
    Method,
    PosteriorEstimate,
    PredictorTheta,
    RegressionProblem,
    Trajectory,
)
from ddpc_lab.numerics import CholFactor, chol_factor, chol_inverse, chol_solve, logdet, symmetrize

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12
RIDGE_FALLBACK = 1e-8

EB_GRID_POINTS = 5
EB_MAX_ITER = 500
# sigma^2 search range relative to the mean square of the targets
EB_SIGMA2_RANGE = (1e-8, 1.0)
# relative least-squares residual below which a regression counts as an exact fit
EXACT_FIT_RTOL = 1e-8


def build_regression(traj: Trajectory, structure: ArxStructure) -> RegressionProblem:
    """Stack ``y(t) = H_t theta`` for every time step with a complete lag window.

    Rows are ordered by time (and output channel within a time step); columns follow the
    theta layout of ``ArxStructure.coordinates``.
    """
    if traj.n_y != structure.n_y or traj.n_u != structure.n_u:
        raise DimensionMismatch(f"Trajectory dims ({traj.n_y}, {traj.n_u}) do not match the ARX structure "
                                f"({structure.n_y}, {structure.n_u})")
    n_samples = len(traj)
    first = structure.max_lag
    if n_samples <= first:
        raise InsufficientData(f"Need more than {first} samples for na={structure.na}, nb={structure.nb}, "
                               f"got {n_samples}")

    n_y = structure.n_y
    H = np.zeros(((n_samples - first) * n_y, structure.n_theta))
    for column, coord in enumerate(structure.coordinates()):
        signal = traj.y if coord.family == "y" else traj.u
        H[coord.row::n_y, column] = signal[first - coord.lag:n_samples - coord.lag, coord.col]

    yvec = traj.y[first:].ravel()
    return RegressionProblem(H=H, yvec=yvec, structure=structure)


def _relative_lstsq_residual(prob: RegressionProblem) -> float:
    theta, *_ = np.linalg.lstsq(prob.H, prob.yvec, rcond=None)
    scale = max(float(np.linalg.norm(prob.yvec)), np.finfo(float).tiny)
    return float(np.linalg.norm(prob.yvec - prob.H @ theta)) / scale


def build_closed_loop_regression(traj: Trajectory, structure: ArxStructure) -> RegressionProblem:
    """``build_regression`` for data recorded under a static feedback law without delay.

    Under ``u(t) = r(t) - y(t)`` with a reference that obeys a short linear recursion (a sinusoid),
    ``y(t)`` is an exact linear function of ``u(t)`` and past samples. A model with the feedthrough
    coefficient then fits the controller instead of the plant and its residual vanishes. When that
    happens and the model without feedthrough still leaves a residual, the feedthrough is dropped.
    Data that both models fit exactly are noise-free and keep the requested structure.
    """
    prob = build_regression(traj, structure)
    if not structure.include_feedthrough or _relative_lstsq_residual(prob) > EXACT_FIT_RTOL:
        return prob

    reduced = build_regression(traj, dataclasses.replace(structure, include_feedthrough=False))
    if _relative_lstsq_residual(reduced) <= EXACT_FIT_RTOL:
        return prob
    logger.warning("Feedthrough term fits the feedback law exactly, identifying without it")
    return reduced


def _residual_rms(prob: RegressionProblem, theta: np.ndarray) -> float:
    return float(np.sqrt(np.mean((prob.yvec - prob.H @ theta) ** 2)))


def ols_estimate(prob: RegressionProblem, ridge_fallback: bool = False) -> PosteriorEstimate:
    """Least-squares ARX estimate with its Gaussian posterior covariance.

    Raises:
        RankDeficient: if ``H'H`` is singular and ``ridge_fallback`` is off
    """
    HtH = prob.H.T @ prob.H
    Hty = prob.H.T @ prob.yvec
    used_ridge = False
    try:
        factor = chol_factor(HtH, escalate=False)
    except NotPositiveDefinite:
        if not ridge_fallback:
            raise RankDeficient("Regressor normal matrix is singular (weak excitation)")
        logger.warning(f"H'H is rank deficient, falling back to ridge {RIDGE_FALLBACK:g}")
        factor = chol_factor(HtH, jitter=RIDGE_FALLBACK)
        used_ridge = True

    theta = chol_solve(factor, Hty)
    residual = prob.yvec - prob.H @ theta
    dof = max(prob.rows - prob.structure.n_theta, 1)
    sigma2 = max(float(residual @ residual) / dof, SIGMA2_FLOOR)
    sigma_theta = sigma2 * chol_inverse(factor)

    return PosteriorEstimate(
        theta_bar=PredictorTheta(prob.structure, theta),
        sigma_theta=sigma_theta,
        sigma2=sigma2,
        method=Method.OLS,
        ridge_fallback=used_ridge,
        residual_rms=_residual_rms(prob, theta),
    )


def _lag_kernel(family: KernelFamily, c: float, lam: float, lags: np.ndarray) -> np.ndarray:
    i = lags[:, None].astype(float)
    j = lags[None, :].astype(float)
    top = np.maximum(i, j)
    if family == KernelFamily.TC:
        return c * lam ** top
    return c * (lam ** (i + j + top) / 2.0 - lam ** (3.0 * top) / 6.0)


def kernel_matrix(cfg: KernelConfig, structure: ArxStructure) -> np.ndarray:
    """Block-diagonal TC/SS prior covariance over theta.

    ``phi_y^i`` sits at lag index i and ``phi_u^j`` at j + 1; matrix coefficients share the
    lag kernel across their entries.
    """
    y_lags = np.arange(1, structure.na + 1)
    u_lags = np.arange(structure.first_input_lag, structure.nb + 1) + 1
    K_y = np.kron(_lag_kernel(cfg.family, cfg.c_y, cfg.lambda_y, y_lags),
                  np.eye(structure.n_y * structure.n_y))
    K_u = np.kron(_lag_kernel(cfg.family, cfg.c_u, cfg.lambda_u, u_lags),
                  np.eye(structure.n_y * structure.n_u))
    return symmetrize(scipy.linalg.block_diag(K_y, K_u))


def _posterior(prob: RegressionProblem, K_factor: CholFactor, sigma2: float,
               extra_precision: Optional[np.ndarray] = None,
               extra_rhs: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    # Sigma = (s^-2 H'H + K^-1 + E)^-1 = L (I + L'(s^-2 H'H + E) L)^-1 L' with K = L L'
    L = K_factor.lower
    data_precision = prob.H.T @ prob.H / sigma2
    rhs = prob.H.T @ prob.yvec / sigma2
    if extra_precision is not None:
        data_precision = data_precision + extra_precision
        rhs = rhs + extra_rhs
    inner = chol_factor(symmetrize(np.eye(L.shape[0]) + L.T @ data_precision @ L))
    sigma_theta = symmetrize(L @ chol_solve(inner, L.T))
    theta = L @ chol_solve(inner, L.T @ rhs)
    return theta, sigma_theta


def kernel_posterior(prob: RegressionProblem, K: np.ndarray, sigma2: float,
                     kernel: Optional[KernelConfig] = None) -> PosteriorEstimate:
    """Posterior of theta under the prior ``N(0, K)`` and noise variance ``sigma2``.

    The method tag follows ``kernel.family``; without a kernel config it is ``SS``.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    theta, sigma_theta = _posterior(prob, chol_factor(K), sigma2)
    method = Method.TC if kernel is not None and kernel.family == KernelFamily.TC else Method.SS
    return PosteriorEstimate(
        theta_bar=PredictorTheta(prob.structure, theta),
        sigma_theta=sigma_theta,
        sigma2=sigma2,
        method=method,
        kernel=kernel,
        residual_rms=_residual_rms(prob, theta),
    )


def shaped_estimate(prob: RegressionProblem, K: np.ndarray, sigma2: float, theta_bar: PredictorTheta,
                    W_bar: np.ndarray, mu: float, kernel: Optional[KernelConfig] = None) -> PosteriorEstimate:
    """Second-stage estimate with the extra precision ``mu * W_bar`` pulling towards ``theta_bar``.

    ``mu == 0`` reproduces ``kernel_posterior`` exactly.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    W_bar = np.asarray(W_bar, dtype=float)
    if W_bar.shape != (prob.structure.n_theta, prob.structure.n_theta):
        raise DimensionMismatch(f"W_bar has shape {W_bar.shape}, expected n_theta = {prob.structure.n_theta}")

    if mu == 0:
        theta, sigma_theta = _posterior(prob, chol_factor(K), sigma2)
    else:
        shaping = mu * symmetrize(W_bar)
        theta, sigma_theta = _posterior(prob, chol_factor(K), sigma2,
                                        extra_precision=shaping, extra_rhs=shaping @ theta_bar.values)
    return PosteriorEstimate(
        theta_bar=PredictorTheta(prob.structure, theta),
        sigma_theta=sigma_theta,
        sigma2=sigma2,
        method=Method.SSW,
        kernel=kernel,
        residual_rms=_residual_rms(prob, theta),
    )


class _SufficientStats:
    """``H'H``, ``H'y`` and ``y'y``: all the marginal likelihood needs from the data."""

    def __init__(self, prob: RegressionProblem):
        self.HtH = prob.H.T @ prob.H
        self.Hty = prob.H.T @ prob.yvec
        self.yty = float(prob.yvec @ prob.yvec)
        self.rows = prob.rows


def eb_objective(prob: RegressionProblem, cfg: KernelConfig, sigma2: float,
                 stats: Optional[_SufficientStats] = None) -> float:
    """``log det Sigma_y + y' Sigma_y^-1 y`` with ``Sigma_y = H K H' + sigma2 I``.

    Evaluated in the theta dimension through the Woodbury identity, so the cost does not
    grow with the number of regression rows. Returns ``inf`` when K cannot be factored.
    """
    stats = stats or _SufficientStats(prob)
    try:
        L = chol_factor(kernel_matrix(cfg, prob.structure)).lower
    except NotPositiveDefinite:
        return np.inf
    inner = chol_factor(symmetrize(np.eye(L.shape[0]) + L.T @ stats.HtH @ L / sigma2))
    b = L.T @ stats.Hty
    log_det = stats.rows * np.log(sigma2) + logdet(inner)
    quad = (stats.yty - float(b @ chol_solve(inner, b)) / sigma2) / sigma2
    return float(log_det + quad)


def eb_tune(prob: RegressionProblem, family: KernelFamily) -> Tuple[KernelConfig, float]:
    """Empirical Bayes hyperparameters ``(c_y, lambda_y, c_u, lambda_u, sigma2)``.

    A coarse log-grid over the kernel bounds picks the start point, Nelder-Mead in log-space
    refines it. The best point seen is returned.
    """
    family = KernelFamily(family)
    if prob.rows < prob.structure.n_theta + 1:
        raise InsufficientData(f"Empirical Bayes needs at least {prob.structure.n_theta + 1} rows, "
                               f"got {prob.rows}")

    stats = _SufficientStats(prob)
    target_scale = max(stats.yty / stats.rows, SIGMA2_FLOOR)
    c_lo, c_hi = KernelConfig.C_BOUNDS
    l_lo, l_hi = KernelConfig.LAMBDA_BOUNDS
    s_lo, s_hi = EB_SIGMA2_RANGE[0] * target_scale, EB_SIGMA2_RANGE[1] * target_scale
    log_bounds = np.log([(c_lo, c_hi), (l_lo, l_hi), (c_lo, c_hi), (l_lo, l_hi), (s_lo, s_hi)])

    def objective(log_params: np.ndarray) -> float:
        c_y, lam_y, c_u, lam_u, sigma2 = np.exp(np.clip(log_params, log_bounds[:, 0], log_bounds[:, 1]))
        cfg = KernelConfig(family, c_y, lam_y, c_u, lam_u)
        return eb_objective(prob, cfg, sigma2, stats)

    grids = [np.linspace(lo, hi, EB_GRID_POINTS) for lo, hi in log_bounds]
    best_point, best_value = None, np.inf
    for point in itertools.product(*grids):
        value = objective(np.array(point))
        if value < best_value:
            best_point, best_value = np.array(point), value
    if best_point is None:
        best_point = log_bounds.mean(axis=1)
        best_value = objective(best_point)

    result = scipy.optimize.minimize(
        objective,
        best_point,
        method="Nelder-Mead",
        bounds=log_bounds,
        options={"maxiter": EB_MAX_ITER, "xatol": 1e-6, "fatol": 1e-9},
    )
    if np.isfinite(result.fun) and result.fun < best_value:
        best_point, best_value = result.x, float(result.fun)

    c_y, lam_y, c_u, lam_u, sigma2 = np.exp(np.clip(best_point, log_bounds[:, 0], log_bounds[:, 1]))
    cfg = KernelConfig(family, float(c_y), float(lam_y), float(c_u), float(lam_u))
    logger.debug(f"EB tuned {family.value} kernel: c_y={c_y:.3g} lambda_y={lam_y:.4f} c_u={c_u:.3g} "
                 f"lambda_u={lam_u:.4f} sigma2={sigma2:.3g} (objective {best_value:.4f})")
    return cfg, float(sigma2)
