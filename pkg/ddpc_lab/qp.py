"""
Operator-splitting QP solver for the small dense problems of the receding-horizon controller.

Solves ``min 1/2 z'Pz + q'z  s.t.  lower <= G z <= upper`` with the ADMM iteration of the OSQP
family: Ruiz equilibration of the KKT matrix plus cost scaling, over-relaxation, a penalty ``rho``
rebalanced from the residual ratio (one Cholesky factorization per penalty value), and an
active-set polish that recovers a solution accurate to the KKT tolerance.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from ddpc_lab.exceptions import DimensionMismatch
from ddpc_lab.models import QpProblem, QpSolution, QpStatus
from ddpc_lab.numerics import CholFactor, chol_factor, chol_solve, symmetrize

logger = logging.getLogger(__name__)

RHO_MIN = 1e-6
RHO_MAX = 1e6
# equality rows get a stiffer penalty
RHO_EQ_SCALE = 1e3
MIN_SCALING = 1e-4
MAX_SCALING = 1e4


@dataclass
class AdmmSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 10_000
    check_every: int = 25
    scaling_iter: int = 10
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    # relative residual level below which the active set is trusted enough to polish
    polish_trigger: float = 1e-3
    polish_delta: float = 1e-10
    polish_refine_iter: int = 5
    kkt_tol: float = 1e-8
    eps_prim_inf: float = 1e-6
    stall_window: int = 1000
    stall_growth: float = 10.0


DEFAULT_SETTINGS = AdmmSettings()


@dataclass
class _Scaling:
    """``x = D x_s``, ``z = z_s / E``, ``y = E y_s / c`` between original and scaled problems."""
    D: np.ndarray
    E: np.ndarray
    c: float


def _limit(values):
    values = np.where(values < MIN_SCALING, 1.0, values)
    return np.minimum(values, MAX_SCALING)


def _equilibrate(P: np.ndarray, q: np.ndarray, G: np.ndarray,
                 iterations: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, _Scaling]:
    """Ruiz equilibration of ``[[P, G'], [G, 0]]`` in the infinity norm, each pass followed by cost scaling."""
    n, m = P.shape[0], G.shape[0]
    D, E, c = np.ones(n), np.ones(m), 1.0
    P, q, G = P.copy(), q.copy(), G.copy()
    for _ in range(iterations):
        col_norms = np.maximum(np.max(np.abs(P), axis=0), np.max(np.abs(G), axis=0))
        row_norms = np.max(np.abs(G), axis=1)
        D_step = 1.0 / np.sqrt(_limit(col_norms))
        E_step = 1.0 / np.sqrt(_limit(row_norms))
        P = D_step[:, None] * P * D_step[None, :]
        G = E_step[:, None] * G * D_step[None, :]
        q = D_step * q
        D, E = D * D_step, E * E_step

        cost_norm = max(float(np.mean(np.max(np.abs(P), axis=0))), float(np.max(np.abs(q))))
        c_step = 1.0 / float(_limit(np.array(cost_norm)))
        P, q, c = c_step * P, c_step * q, c * c_step
    return P, q, G, _Scaling(D, E, c)


def _rho_vector(rho: float, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    rho_vec = np.full(len(lower), rho)
    rho_vec[~np.isfinite(lower) & ~np.isfinite(upper)] = RHO_MIN
    rho_vec[np.isfinite(lower) & (lower == upper)] = rho * RHO_EQ_SCALE
    return np.clip(rho_vec, RHO_MIN, RHO_MAX)


def _factor(P: np.ndarray, G: np.ndarray, sigma: float, rho_vec: np.ndarray) -> CholFactor:
    return chol_factor(symmetrize(P + sigma * np.eye(P.shape[0]) + G.T @ (rho_vec[:, None] * G)))


def _validate(qp: QpProblem):
    n, m = qp.n, qp.G.shape[0]
    if qp.P.shape != (n, n) or qp.q.shape != (n,) or qp.G.shape[1] != n:
        raise DimensionMismatch(f"Inconsistent QP data: P {qp.P.shape}, q {qp.q.shape}, G {qp.G.shape}")
    if qp.lower.shape != (m,) or qp.upper.shape != (m,):
        raise DimensionMismatch(f"Constraint bounds must have {m} entries")
    if np.any(qp.lower > qp.upper):
        raise ValueError("Constraint lower bounds exceed upper bounds")


def kkt_residuals(qp: QpProblem, x: np.ndarray, y: np.ndarray) -> Tuple[float, float, float]:
    """Return ``(stationarity, primal violation, complementarity)`` in the infinity norm.

    ``y`` follows the sign convention ``y_i > 0`` on upper-active rows and ``y_i < 0`` on lower-active rows.
    """
    Gx = qp.G @ x
    stationarity = np.linalg.norm(qp.P @ x + qp.q + qp.G.T @ y, np.inf) if qp.n else 0.0
    if not len(y):
        return float(stationarity), 0.0, 0.0
    violation = np.maximum(qp.lower - Gx, 0.0) + np.maximum(Gx - qp.upper, 0.0)
    upper_gap = np.where(y > 0, np.abs(qp.upper - Gx), 0.0)
    lower_gap = np.where(y < 0, np.abs(Gx - qp.lower), 0.0)
    complementarity = np.abs(y) * (upper_gap + lower_gap)
    return float(stationarity), float(np.max(violation)), float(np.max(complementarity))


def _kkt_residual(qp: QpProblem, x: np.ndarray, y: np.ndarray) -> float:
    return max(kkt_residuals(qp, x, y))


def _polish(qp: QpProblem, x: np.ndarray, z: np.ndarray, y: np.ndarray,
            settings: AdmmSettings) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Solve the equality-constrained QP on the guessed active set; ``None`` if the guess fails."""
    ind_low = np.where(z - qp.lower < -y)[0]
    ind_upp = np.where(qp.upper - z < y)[0]
    active = np.concatenate([ind_low, ind_upp])
    n, n_act = qp.n, len(active)

    G_act = qp.G[active]
    delta = settings.polish_delta
    kkt = np.block([[qp.P + delta * np.eye(n), G_act.T],
                    [G_act, -delta * np.eye(n_act)]])
    rhs = np.concatenate([-qp.q, qp.lower[ind_low], qp.upper[ind_upp]])
    try:
        lu = scipy.linalg.lu_factor(kkt, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)

    # iterative refinement against the unregularized system
    exact = np.block([[qp.P, G_act.T], [G_act, np.zeros((n_act, n_act))]])
    for _ in range(settings.polish_refine_iter):
        sol = sol + scipy.linalg.lu_solve(lu, rhs - exact @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None

    x_pol = sol[:n]
    y_pol = np.zeros_like(y)
    y_pol[ind_low] = np.minimum(sol[n:n + len(ind_low)], 0.0)
    y_pol[ind_upp] = np.maximum(sol[n + len(ind_low):], 0.0)
    # a multiplier of the wrong sign means the active set guess is wrong
    if np.any(sol[n:n + len(ind_low)] > settings.kkt_tol) or np.any(sol[n + len(ind_low):] < -settings.kkt_tol):
        return None
    if _kkt_residual(qp, x_pol, y_pol) >= settings.kkt_tol:
        return None
    return x_pol, y_pol


def _primal_infeasible(qp: QpProblem, delta_y: np.ndarray, settings: AdmmSettings) -> bool:
    norm = np.linalg.norm(delta_y, np.inf)
    if norm <= settings.eps_prim_inf:
        return False
    v = delta_y / norm
    upper = np.where(np.isfinite(qp.upper), qp.upper, 0.0)
    lower = np.where(np.isfinite(qp.lower), qp.lower, 0.0)
    if np.any(~np.isfinite(qp.upper) & (v > settings.eps_prim_inf)) or \
            np.any(~np.isfinite(qp.lower) & (v < -settings.eps_prim_inf)):
        return False
    support = upper @ np.maximum(v, 0.0) + lower @ np.minimum(v, 0.0)
    return support < -settings.eps_prim_inf and np.linalg.norm(qp.G.T @ v, np.inf) < settings.eps_prim_inf


def _slack_usage(qp: QpProblem, x: np.ndarray) -> float:
    if qp.n_slack == 0:
        return 0.0
    return float(max(np.max(x[qp.n_inputs:]), 0.0))


def _solution(qp: QpProblem, x, y, status: QpStatus, iterations: int) -> QpSolution:
    return QpSolution(z=x, duals=y, kkt_residual=_kkt_residual(qp, x, y), status=status,
                      iterations=iterations, slack_usage=_slack_usage(qp, x))


def _balanced_rho(rho: float, P: np.ndarray, q: np.ndarray, G: np.ndarray, x: np.ndarray,
                  z: np.ndarray, y: np.ndarray) -> Optional[float]:
    """Penalty that equalizes the normalized primal and dual residuals of the scaled problem."""
    Gx, Px, Gty = G @ x, P @ x, G.T @ y
    pri = np.linalg.norm(Gx - z, np.inf) / max(np.linalg.norm(Gx, np.inf), np.linalg.norm(z, np.inf), 1e-30)
    dua = np.linalg.norm(Px + q + Gty, np.inf) / max(np.linalg.norm(Px, np.inf), np.linalg.norm(Gty, np.inf),
                                                     np.linalg.norm(q, np.inf), 1e-30)
    if pri == 0.0 or dua == 0.0:
        return None
    return float(np.clip(rho * np.sqrt(pri / dua), RHO_MIN, RHO_MAX))


def solve_qp(qp: QpProblem, warm: Optional[np.ndarray] = None,
             settings: AdmmSettings = DEFAULT_SETTINGS) -> QpSolution:
    """ADMM with equilibration, over-relaxation, adaptive rho, polish and primal infeasibility detection.

    Termination, polish and the returned iterate use the original coordinates. ``Optimal`` is only
    reported with a KKT residual below ``settings.kkt_tol``. ``MaxIter`` and ``Infeasible`` are
    reported through ``QpSolution.status``; the caller decides whether they are fatal.
    """
    _validate(qp)
    n, m = qp.n, qp.G.shape[0]
    P_orig = symmetrize(qp.P)

    x0 = np.zeros(n) if warm is None else np.asarray(warm, dtype=float).copy()
    if x0.shape != (n,):
        raise DimensionMismatch(f"Warm start has shape {x0.shape}, expected ({n},)")

    if m == 0:
        x = chol_solve(chol_factor(P_orig), -qp.q)
        return _solution(qp, x, np.zeros(0), QpStatus.OPTIMAL, 0)

    P, q, G, scaling = _equilibrate(P_orig, qp.q, qp.G, settings.scaling_iter)
    lower, upper = scaling.E * qp.lower, scaling.E * qp.upper
    sigma, alpha, rho = settings.sigma, settings.alpha, settings.rho
    rho_vec = _rho_vector(rho, lower, upper)
    factor = _factor(P, G, sigma, rho_vec)

    x = x0 / scaling.D
    z = np.clip(G @ x, lower, upper)
    y = np.zeros(m)

    def unscaled(x_s, z_s, y_s):
        return scaling.D * x_s, z_s / scaling.E, scaling.E * y_s / scaling.c

    history = []
    for iteration in range(1, settings.max_iter + 1):
        y_prev = y
        x_tilde = chol_solve(factor, sigma * x - q + G.T @ (rho_vec * z - y))
        z_tilde = G @ x_tilde
        x = alpha * x_tilde + (1.0 - alpha) * x
        z_relaxed = alpha * z_tilde + (1.0 - alpha) * z
        z_new = np.clip(z_relaxed + y / rho_vec, lower, upper)
        y = y + rho_vec * (z_relaxed - z_new)
        z = z_new

        if iteration % settings.check_every:
            continue

        x_u, z_u, y_u = unscaled(x, z, y)
        Gx = qp.G @ x_u
        Px = P_orig @ x_u
        Gty = qp.G.T @ y_u
        pri_res = np.linalg.norm(Gx - z_u, np.inf)
        dua_res = np.linalg.norm(Px + qp.q + Gty, np.inf)
        pri_scale = max(np.linalg.norm(Gx, np.inf), np.linalg.norm(z_u, np.inf))
        dua_scale = max(np.linalg.norm(Px, np.inf), np.linalg.norm(Gty, np.inf), np.linalg.norm(qp.q, np.inf))
        pri_tol = settings.eps_abs + settings.eps_rel * pri_scale
        dua_tol = settings.eps_abs + settings.eps_rel * dua_scale

        if pri_res < settings.polish_trigger * (1.0 + pri_scale) and \
                dua_res < settings.polish_trigger * (1.0 + dua_scale):
            polished = _polish(qp, x_u, z_u, y_u, settings)
            if polished is not None:
                logger.debug(f"QP polished after {iteration} iterations (rho={rho:.3g})")
                return _solution(qp, polished[0], polished[1], QpStatus.OPTIMAL, iteration)

        if pri_res < pri_tol and dua_res < dua_tol and _kkt_residual(qp, x_u, y_u) < settings.kkt_tol:
            return _solution(qp, x_u, y_u, QpStatus.OPTIMAL, iteration)

        if _primal_infeasible(qp, scaling.E * (y - y_prev) / scaling.c, settings):
            logger.debug(f"QP primal infeasibility certificate found at iteration {iteration}")
            return _solution(qp, x_u, y_u, QpStatus.INFEASIBLE, iteration)

        history.append((iteration, pri_res, dua_res))
        if _stalled(history, settings):
            logger.debug(f"QP primal residual diverging at iteration {iteration}")
            return _solution(qp, x_u, y_u, QpStatus.INFEASIBLE, iteration)

        if settings.adaptive_rho:
            rho_new = _balanced_rho(rho, P, q, G, x, z, y)
            tol = settings.adaptive_rho_tolerance
            if rho_new is not None and (rho_new > tol * rho or rho_new < rho / tol):
                logger.debug(f"QP rho {rho:.3g} -> {rho_new:.3g} at iteration {iteration}")
                rho = rho_new
                rho_vec = _rho_vector(rho, lower, upper)
                factor = _factor(P, G, sigma, rho_vec)
                history.clear()

    x_u, _, y_u = unscaled(x, z, y)
    logger.warning(f"QP reached the iteration cap of {settings.max_iter}")
    return _solution(qp, x_u, y_u, QpStatus.MAX_ITER, settings.max_iter)


def _stalled(history, settings: AdmmSettings) -> bool:
    """Primal residual grew by ``stall_growth`` over ``stall_window`` iterations while the dual residual stalled."""
    lookback = settings.stall_window // settings.check_every
    if len(history) <= lookback:
        return False
    _, pri_res, dua_res = history[-1]
    _, past_pri, past_dua = history[-1 - lookback]
    grew = pri_res > settings.stall_growth * max(past_pri, np.finfo(float).tiny)
    stalled = abs(dua_res - past_dua) <= 1e-3 * max(past_dua, settings.eps_abs)
    return grew and stalled
