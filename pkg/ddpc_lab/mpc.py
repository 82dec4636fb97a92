"""
Receding-horizon tracking controller built on the lifted ARX predictor.
"""
import logging
from collections import deque
from typing import Optional, Tuple

import numpy as np

from ddpc_lab.exceptions import DimensionMismatch, QpInfeasible, RunInvalid
from ddpc_lab.lifted import apply_a_inverse, assemble, check_lifted_lengths, free_response, pad_theta
from ddpc_lab.models import (
    ClosedLoopRun,
    ConstraintMode,
    LiftedPredictor,
    LtiSystem,
    MpcConfig,
    PredictorTheta,
    QpProblem,
    QpStatus,
    StepDiagnostics,
    TaskPoint,
)
from ddpc_lab.numerics import RngState, symmetrize
from ddpc_lab.plant import step
from ddpc_lab.qp import DEFAULT_SETTINGS, AdmmSettings, solve_qp
from ddpc_lab.sensitivity import fce_quadratic, jacobian

logger = logging.getLogger(__name__)


def lifted_weights(cfg: MpcConfig, n_y: int, n_u: int) -> Tuple[np.ndarray, np.ndarray]:
    """Block-diagonal ``(Q_lift, R_lift)`` over the future horizon."""
    Lf = cfg.horizons.Lf
    return cfg.Q_weight * np.eye(n_y * Lf), cfg.R_weight * np.eye(n_u * Lf)


def build_qp(lp: LiftedPredictor, task: Tuple[np.ndarray, np.ndarray], r_f: np.ndarray, cfg: MpcConfig,
             fce: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> QpProblem:
    """Tracking QP in ``u_f`` (and output slacks in soft mode).

    The objective is half the tracking cost ``|r_f - y_f|_Q^2 + |u_f|_R^2`` (plus the FCE quadratic)
    with ``y_f = h_pred + G_pred u_f``; slacks carry a linear penalty ``soft_penalty``.
    """
    n_y, n_u, Lf = lp.n_y, lp.n_u, lp.horizons.Lf
    u_p, y_p, _ = check_lifted_lengths(n_y, n_u, lp.horizons, task[0], task[1], np.zeros(n_u * Lf))
    r_f = np.asarray(r_f, dtype=float).ravel()
    if r_f.shape[0] != n_y * Lf:
        raise DimensionMismatch(f"Reference preview has {r_f.shape[0]} entries, expected {n_y * Lf}")

    Q_lift, R_lift = lifted_weights(cfg, n_y, n_u)
    h_pred = apply_a_inverse(lp, free_response(lp, u_p, y_p))
    G_pred = apply_a_inverse(lp, lp.Phi_u)

    P_u = G_pred.T @ Q_lift @ G_pred + R_lift
    q_u = -G_pred.T @ Q_lift @ (r_f - h_pred)
    if fce is not None:
        Hq, hlin = fce
        P_u = P_u + Hq
        q_u = q_u + hlin
    P_u = symmetrize(P_u)

    n_in, n_out = n_u * Lf, n_y * Lf
    u_lo, u_hi = cfg.u_bounds
    y_lo, y_hi = cfg.y_bounds

    if cfg.output_constraint_mode == ConstraintMode.HARD:
        G = np.vstack([np.eye(n_in), G_pred])
        lower = np.concatenate([np.full(n_in, u_lo), y_lo - h_pred])
        upper = np.concatenate([np.full(n_in, u_hi), y_hi - h_pred])
        return QpProblem(P=P_u, q=q_u, G=G, lower=lower, upper=upper, n_inputs=n_in)

    P = np.zeros((n_in + n_out, n_in + n_out))
    P[:n_in, :n_in] = P_u
    q = np.concatenate([q_u, np.full(n_out, cfg.soft_penalty)])
    eye_s = np.eye(n_out)
    G = np.block([
        [np.eye(n_in), np.zeros((n_in, n_out))],
        [G_pred, eye_s],
        [G_pred, -eye_s],
        [np.zeros((n_out, n_in)), eye_s],
    ])
    lower = np.concatenate([np.full(n_in, u_lo), y_lo - h_pred, np.full(n_out, -np.inf), np.zeros(n_out)])
    upper = np.concatenate([np.full(n_in, u_hi), np.full(n_out, np.inf), y_hi - h_pred, np.full(n_out, np.inf)])
    return QpProblem(P=P, q=q, G=G, lower=lower, upper=upper, n_inputs=n_in)


def _shift(block: np.ndarray, width: int) -> np.ndarray:
    if len(block) <= width:
        return block.copy()
    return np.concatenate([block[width:], block[-width:]])


class PredictiveController:
    """Stateful receding-horizon controller for one closed-loop run.

    Args:
        theta: ARX predictor coefficients the controller plans with
        cfg: MPC weights, bounds and horizons
        sigma_theta: coefficient covariance, required when ``cfg.fce_enabled``
        settings: QP solver settings
    """

    def __init__(self, theta: PredictorTheta, cfg: MpcConfig, sigma_theta: Optional[np.ndarray] = None,
                 settings: AdmmSettings = DEFAULT_SETTINGS):
        if cfg.fce_enabled and sigma_theta is None:
            raise ValueError("FCE controller needs the coefficient covariance")
        self.theta = theta
        self.cfg = cfg
        self.sigma_theta = sigma_theta
        self.settings = settings
        self.horizons = cfg.horizons
        self.n_y = theta.structure.n_y
        self.n_u = theta.structure.n_u
        self.lifted = assemble(pad_theta(theta, self.horizons), self.horizons)
        self.Q_lift, self.R_lift = lifted_weights(cfg, self.n_y, self.n_u)
        self.reset()

    def reset(self):
        Lp = self.horizons.Lp
        self.u_history = deque([np.zeros(self.n_u) for _ in range(Lp)], maxlen=Lp)
        self.y_history = deque([np.zeros(self.n_y) for _ in range(Lp)], maxlen=Lp)
        self._pending_u: Optional[np.ndarray] = None
        self._warm: Optional[np.ndarray] = None
        self.last_task: Optional[TaskPoint] = None

    def _record_measurement(self, y_meas):
        if self._pending_u is None:
            return
        if y_meas is None:
            raise ValueError("A measurement is required after the first control step")
        y_meas = np.asarray(y_meas, dtype=float).ravel()
        if y_meas.shape[0] != self.n_y:
            raise DimensionMismatch(f"Measurement has {y_meas.shape[0]} entries, expected {self.n_y}")
        self.u_history.append(self._pending_u)
        self.y_history.append(y_meas)

    def control_step(self, y_meas: Optional[np.ndarray],
                     r_preview: np.ndarray) -> Tuple[np.ndarray, StepDiagnostics]:
        """Complete the history with ``y_meas``, solve the QP and return the first planned input.

        ``y_meas`` is the output measured after the previously applied input and is ignored on the
        first call.

        Raises:
            QpInfeasible: if a hard-constrained QP has no feasible point
        """
        self._record_measurement(y_meas)
        u_p = np.concatenate(self.u_history)
        y_p = np.concatenate(self.y_history)

        fce = None
        if self.cfg.fce_enabled:
            nominal = TaskPoint(u_p=u_p, y_p=y_p, u_f=np.zeros(self.n_u * self.horizons.Lf))
            _, bundle = jacobian(self.theta, self.horizons, nominal)
            Hq, hlin, _ = fce_quadratic(bundle, self.sigma_theta, self.Q_lift)
            fce = (Hq, hlin)

        qp = build_qp(self.lifted, (u_p, y_p), r_preview, self.cfg, fce)
        warm = self._warm if self._warm is not None and self._warm.shape == (qp.n,) else None
        sol = solve_qp(qp, warm=warm, settings=self.settings)
        if sol.status == QpStatus.INFEASIBLE:
            raise QpInfeasible(f"Tracking QP is infeasible (after {sol.iterations} iterations)")
        if sol.status == QpStatus.MAX_ITER:
            logger.warning(f"QP hit the iteration cap, applying the last iterate (KKT {sol.kkt_residual:.2e})")

        u_f = sol.z[:qp.n_inputs]
        u_apply = np.clip(u_f[:self.n_u], *self.cfg.u_bounds)
        self._warm = np.concatenate([_shift(u_f, self.n_u), _shift(sol.z[qp.n_inputs:], self.n_y)])
        self._pending_u = u_apply
        self.last_task = TaskPoint(u_p=u_p, y_p=y_p, u_f=u_f.copy())

        diagnostics = StepDiagnostics(status=sol.status, qp_iters=sol.iterations,
                                      kkt_residual=sol.kkt_residual, slack_usage=sol.slack_usage)
        return u_apply, diagnostics


def _reference_matrix(r: np.ndarray, n_steps: int, n_y: int) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    r = r.reshape(len(r), -1)
    if r.shape[1] == 1 and n_y > 1:
        r = np.repeat(r, n_y, axis=1)
    if r.shape[1] != n_y:
        raise DimensionMismatch(f"Reference has {r.shape[1]} channels, plant has {n_y} outputs")
    if len(r) < n_steps:
        # hold the last value beyond the supplied reference
        r = np.pad(r, ((0, n_steps - len(r)), (0, 0)), mode="edge")
    return r


def run_closed_loop(sys: LtiSystem, controller: PredictiveController, r: np.ndarray, N_test: int,
                    rng: RngState, collect_tasks: bool = False) -> ClosedLoopRun:
    """Simulate plant and controller for ``N_test`` steps from the zero state.

    Raises:
        RunInvalid: in hard output mode, if the QP turns infeasible or a measured output leaves
            ``y_bounds``
    """
    if N_test < 1:
        raise ValueError("N_test must be at least 1")
    Lf = controller.horizons.Lf
    r_full = _reference_matrix(r, N_test + Lf - 1, sys.n_y)
    controller.reset()

    x = np.zeros(sys.n)
    u_log = np.zeros((N_test, sys.n_u))
    y_log = np.zeros((N_test, sys.n_y))
    qp_iters = np.zeros(N_test, dtype=int)
    kkt = np.zeros(N_test)
    slack = np.zeros(N_test)
    tasks = []
    y_meas = None
    hard = controller.cfg.output_constraint_mode == ConstraintMode.HARD
    y_lo, y_hi = controller.cfg.y_bounds

    for t in range(N_test):
        try:
            u, diag = controller.control_step(y_meas, r_full[t:t + Lf].ravel())
        except QpInfeasible as exc:
            raise RunInvalid(f"Closed-loop run invalid at t={t}: {exc}") from exc
        x, y = step(sys, x, u, rng)
        if hard and (np.any(y < y_lo) or np.any(y > y_hi)):
            raise RunInvalid(f"Closed-loop run invalid at t={t}: output {np.round(y, 4).tolist()} "
                             f"outside the hard bounds [{y_lo}, {y_hi}]")
        u_log[t], y_log[t] = u, y
        qp_iters[t], kkt[t], slack[t] = diag.qp_iters, diag.kkt_residual, diag.slack_usage
        if collect_tasks:
            tasks.append(controller.last_task)
        y_meas = y

    r_used = r_full[:N_test]
    cost = float(controller.cfg.Q_weight * np.sum((r_used - y_log) ** 2)
                 + controller.cfg.R_weight * np.sum(u_log ** 2))
    logger.debug(f"Closed-loop run finished: J={cost:.4f}, max slack {slack.max():.3g}")
    return ClosedLoopRun(u=u_log, y=y_log, r=r_used, qp_iters=qp_iters, kkt_residual=kkt,
                         slack_usage=slack, cost=cost, task_points=tasks)
