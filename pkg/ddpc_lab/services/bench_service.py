"""
Monte Carlo benchmark of the controller variants on the ground-truth plant.
"""
import dataclasses
import logging
import threading
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ddpc_lab.exceptions import DdpcError
from ddpc_lab.ident import (
    build_closed_loop_regression,
    eb_tune,
    kernel_matrix,
    kernel_posterior,
    ols_estimate,
    shaped_estimate,
)
from ddpc_lab.models import (
    ArxStructure,
    ExperimentConfig,
    McResult,
    Method,
    PosteriorEstimate,
    PredictorTheta,
    RunRecord,
    Trajectory,
    Variant,
    VariantSummary,
)
from ddpc_lab.mpc import PredictiveController, lifted_weights, run_closed_loop
from ddpc_lab.numerics import RngState
from ddpc_lab.plant import (
    collect_training_data,
    predictor_markov_parameters,
    steady_state_kf,
    tracking_reference,
)
from ddpc_lab.sensitivity import normalize_w, task_sensitivity

logger = logging.getLogger(__name__)

# Random streams of one run, shared by every variant of that run
STREAM_TRAIN = 0
STREAM_TASK = 1
STREAM_TEST = 2


def oracle_estimate(cfg: ExperimentConfig) -> PosteriorEstimate:
    """Exact predictor Markov parameters of the steady-state Kalman predictor, truncated at ``Lp``."""
    sys = cfg.system
    Lp = cfg.mpc.horizons.Lp
    gain = steady_state_kf(sys)
    phi_y, phi_u = predictor_markov_parameters(sys, gain, Lp)
    structure = ArxStructure(na=Lp, nb=Lp, include_feedthrough=True, n_y=sys.n_y, n_u=sys.n_u)
    theta = PredictorTheta.from_coefficients(structure, phi_y, phi_u)
    return PosteriorEstimate(theta_bar=theta, sigma_theta=np.zeros((structure.n_theta, structure.n_theta)),
                             sigma2=sys.sigma_v2, method=Method.ORACLE)


def _kernel_stage(cfg: ExperimentConfig, train: Trajectory):
    prob = build_closed_loop_regression(train, cfg.arx)
    kernel, sigma2 = eb_tune(prob, cfg.kernel_family)
    K = kernel_matrix(kernel, prob.structure)
    return prob, kernel, K, sigma2


def build_controller(cfg: ExperimentConfig, estimate: PosteriorEstimate, fce: bool = False) -> PredictiveController:
    mpc_cfg = dataclasses.replace(cfg.mpc, fce_enabled=fce)
    return PredictiveController(estimate.theta_bar, mpc_cfg, sigma_theta=estimate.sigma_theta if fce else None)


def collect_task_sensitivity(cfg: ExperimentConfig, estimate: PosteriorEstimate,
                             run_seed: int) -> Tuple[np.ndarray, int]:
    """Run the closed loop on the task stream with ``estimate`` and average ``J'QJ`` over its steps."""
    controller = build_controller(cfg, estimate)
    h = cfg.mpc.horizons
    task_run = run_closed_loop(cfg.system, controller, tracking_reference(cfg.N_test + h.Lf), cfg.N_test,
                               RngState(run_seed, STREAM_TASK), collect_tasks=True)
    Q_lift, _ = lifted_weights(cfg.mpc, cfg.system.n_y, cfg.system.n_u)
    W_bar = task_sensitivity(estimate.theta_bar, h, task_run.task_points, Q_lift)
    if cfg.normalize_w:
        W_bar = normalize_w(W_bar)
    return W_bar, len(task_run.task_points)


def estimate_for_variant(cfg: ExperimentConfig, variant: Variant, train: Optional[Trajectory],
                         run_seed: int) -> PosteriorEstimate:
    """Identification stage of one variant; ``train`` is unused by the oracle."""
    variant = Variant(variant)
    if variant == Variant.ORACLE_KF:
        return oracle_estimate(cfg)
    if variant in (Variant.OLS, Variant.FCE):
        return ols_estimate(build_closed_loop_regression(train, cfg.arx), ridge_fallback=True)

    prob, kernel, K, sigma2 = _kernel_stage(cfg, train)
    first_stage = kernel_posterior(prob, K, sigma2, kernel)
    if variant == Variant.SS:
        return first_stage

    W_bar, n_tasks = collect_task_sensitivity(cfg, first_stage, run_seed)
    logger.debug(f"Shaping with W_bar from {n_tasks} task points (mu={cfg.mu})")
    return shaped_estimate(prob, K, sigma2, first_stage.theta_bar, W_bar, cfg.mu, kernel)


def run_variant(cfg: ExperimentConfig, variant: Variant, run_seed: int, run_id: int = 0,
                keep_trajectories: bool = True) -> RunRecord:
    """Identify, control and score one variant on one seed; failures come back as invalid records."""
    variant = Variant(variant)
    try:
        train = None
        if variant != Variant.ORACLE_KF:
            train = collect_training_data(cfg.system, cfg.regime, cfg.N_train, RngState(run_seed, STREAM_TRAIN))
        estimate = estimate_for_variant(cfg, variant, train, run_seed)
        controller = build_controller(cfg, estimate, fce=variant == Variant.FCE)
        Lf = cfg.mpc.horizons.Lf
        run = run_closed_loop(cfg.system, controller, tracking_reference(cfg.N_test + Lf), cfg.N_test,
                              RngState(run_seed, STREAM_TEST))
    except Exception as e:
        if isinstance(e, DdpcError):
            logger.error(f"Run {run_id} ({variant.value}, seed {run_seed}) failed: {e}")
        else:
            logger.exception(f"Run {run_id} ({variant.value}, seed {run_seed}) failed unexpectedly: {e}")
        return RunRecord(variant=variant, run_id=run_id, seed=run_seed, cost_J=float("nan"),
                         trace_sigma_theta=None, valid=False, error=f"{type(e).__name__}: {e}")

    trace = None if variant == Variant.ORACLE_KF else estimate.trace_sigma_theta
    return RunRecord(
        variant=variant,
        run_id=run_id,
        seed=run_seed,
        cost_J=run.cost,
        trace_sigma_theta=trace,
        valid=True,
        y=run.y if keep_trajectories else None,
        u=run.u if keep_trajectories else None,
    )


def _run_task(args) -> RunRecord:
    cfg, variant, run_seed, run_id = args
    return run_variant(cfg, variant, run_seed, run_id)


def _sample_std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def summarize(res: McResult) -> Dict[Variant, VariantSummary]:
    """Per-variant descriptive statistics over the valid runs."""
    aggregates = {}
    for variant in res.config.variants:
        records = res.records_for(variant)
        valid = [r for r in records if r.valid]
        costs = np.array([r.cost_J for r in valid], dtype=float)
        traces = np.array([r.trace_sigma_theta for r in valid if r.trace_sigma_theta is not None], dtype=float)

        if len(costs):
            q25, median, q75 = np.percentile(costs, [25, 50, 75])
            mean_J, std_J = float(np.mean(costs)), _sample_std(costs)
        else:
            q25 = median = q75 = mean_J = std_J = float("nan")

        summary = VariantSummary(
            variant=variant,
            mean_J=mean_J,
            std_J=std_J,
            median_J=float(median),
            q25=float(q25),
            q75=float(q75),
            mean_trace=float(np.mean(traces)) if len(traces) else None,
            std_trace=_sample_std(traces) if len(traces) else None,
            valid_runs=len(valid),
            total_runs=len(records),
        )
        with_traj = [r for r in valid if r.y is not None]
        if with_traj:
            ys = np.stack([r.y for r in with_traj])
            us = np.stack([r.u for r in with_traj])
            summary.y_mean, summary.u_mean = ys.mean(axis=0), us.mean(axis=0)
            if len(with_traj) > 1:
                summary.y_std, summary.u_std = ys.std(axis=0, ddof=1), us.std(axis=0, ddof=1)
            else:
                summary.y_std, summary.u_std = np.zeros_like(summary.y_mean), np.zeros_like(summary.u_mean)
        aggregates[variant] = summary
    return aggregates


class BenchService:
    """Runs the Monte Carlo protocol of an experiment configuration.

    Args:
        config: experiment configuration
        jobs: number of worker processes; 1 runs everything in-process
    """

    def __init__(self, config: ExperimentConfig, jobs: int = 1):
        if jobs < 1:
            raise ValueError("jobs must be at least 1")
        self.config = config
        self.jobs = jobs
        self._completed: List[RunRecord] = []
        self._lock = threading.Lock()

    def run_seed(self, run_id: int) -> int:
        return self.config.base_seed + run_id

    def run_variant(self, variant: Variant, run_seed: int, run_id: int = 0) -> RunRecord:
        return run_variant(self.config, variant, run_seed, run_id)

    def completed_records(self) -> List[RunRecord]:
        """Snapshot of the records finished so far, ordered by run id and variant."""
        with self._lock:
            return self._ordered(list(self._completed))

    def _ordered(self, records: List[RunRecord]) -> List[RunRecord]:
        position = {v: i for i, v in enumerate(self.config.variants)}
        return sorted(records, key=lambda r: (r.run_id, position[r.variant]))

    def _record(self, record: RunRecord, on_record: Optional[Callable[[RunRecord], None]]):
        with self._lock:
            self._completed.append(record)
        if on_record is not None:
            on_record(record)

    def run_monte_carlo(self, on_record: Optional[Callable[[RunRecord], None]] = None) -> McResult:
        """All variants on ``N_MC`` seeds; the result does not depend on ``jobs`` or completion order."""
        cfg = self.config
        tasks = [(cfg, variant, self.run_seed(run_id), run_id)
                 for run_id in range(cfg.N_MC) for variant in cfg.variants]
        logger.info(f"Starting Monte Carlo: {cfg.N_MC} runs x {len(cfg.variants)} variants "
                    f"({cfg.regime.value} regime, {self.jobs} worker(s))")
        start_time = time.time()
        with self._lock:
            self._completed = []

        if self.jobs == 1:
            for task in tasks:
                self._record(_run_task(task), on_record)
        else:
            with ProcessPoolExecutor(max_workers=self.jobs) as executor:
                futures = [executor.submit(_run_task, task) for task in tasks]
                for future in as_completed(futures):
                    self._record(future.result(), on_record)

        result = McResult(config=cfg, records=self.completed_records())
        result.aggregates = summarize(result)
        invalid = sum(not r.valid for r in result.records)
        logger.info(f"Monte Carlo finished in {time.time() - start_time:.1f}s "
                    f"({len(result.records)} records, {invalid} invalid)")
        return result
