#!/usr/bin/env python3
"""
Command-line entry point: simulate, identify, compute sensitivities, run closed loops and
Monte Carlo experiments.
"""
import argparse
import dataclasses
import json
import logging
import signal
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from ddpc_lab import __version__
from ddpc_lab import config
from ddpc_lab.exceptions import ConfigError, DataError, DdpcError
from ddpc_lab.ident import build_closed_loop_regression, eb_tune, kernel_matrix, kernel_posterior, shaped_estimate
from ddpc_lab.models import ExperimentConfig, McResult, RunManifest, Trajectory, Variant
from ddpc_lab.numerics import RngState
from ddpc_lab.plant import collect_training_data, tracking_reference
from ddpc_lab.mpc import run_closed_loop
from ddpc_lab.sensitivity import normalize_w
from ddpc_lab.services.bench_service import (
    STREAM_TEST,
    STREAM_TRAIN,
    BenchService,
    build_controller,
    collect_task_sensitivity,
    estimate_for_variant,
    summarize,
)
from ddpc_lab.services.influxdb_service import InfluxDBService
from ddpc_lab.services.scheduler_service import SchedulerService
from ddpc_lab import storage

logger = logging.getLogger("ddpc_lab")

METHODS = {
    "ols": Variant.OLS,
    "fce": Variant.FCE,
    "ss": Variant.SS,
    "ssw": Variant.SSW,
    "oracle": Variant.ORACLE_KF,
}

EXIT_INTERRUPTED = 130

# Global objects touched by the signal handler
scheduler_service: Optional[SchedulerService] = None


def configure_logging(level: str = config.LOG_LEVEL):
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )


def signal_handler(sig, frame):
    """Flush partial results and abort the running command."""
    logger.info(f"Received signal {sig}, shutting down gracefully...")
    if scheduler_service and scheduler_service.running:
        scheduler_service.stop(flush=True)
    raise KeyboardInterrupt


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (KEY=value); defaults to the benchmark setup")
    common.add_argument("--out-dir", default=config.DDPC_OUT_DIR, help="directory for all outputs")
    common.add_argument("--seed", type=int, help="override EXPERIMENT_BASE_SEED")

    parser = argparse.ArgumentParser(prog="ddpc-lab", description="Data-driven predictive control lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="collect closed-loop training data")

    identify = sub.add_parser("identify", parents=[common], help="estimate the ARX predictor")
    identify.add_argument("--data", help="training trajectory CSV")
    identify.add_argument("--method", choices=sorted(METHODS), default="ols")
    identify.add_argument("--w-bar", help="sensitivity matrix JSON (required for --method ssw)")

    sensitivity = sub.add_parser("sensitivity", parents=[common], help="compute the task sensitivity matrix")
    sensitivity.add_argument("--data", required=True, help="training trajectory CSV")

    closed_loop = sub.add_parser("closed-loop", parents=[common], help="run one closed-loop evaluation")
    closed_loop.add_argument("--method", choices=sorted(METHODS), default="ss")
    closed_loop.add_argument("--data", help="training trajectory CSV (simulated from the seed if omitted)")

    monte_carlo = sub.add_parser("monte-carlo", parents=[common], help="run the Monte Carlo benchmark")
    monte_carlo.add_argument("--jobs", type=int, default=config.DDPC_JOBS, help="worker processes")
    monte_carlo.add_argument("--influx", action="store_true", help="export results to InfluxDB")

    report = sub.add_parser("report", parents=[common], help="summarize a Monte Carlo result file")
    report.add_argument("--results", help="Monte Carlo JSON (defaults to <out-dir>/mc_results.json)")
    return parser


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_config(args) -> ExperimentConfig:
    cfg = config.load_experiment_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, base_seed=args.seed)
    return cfg


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, started_at: str, outputs: List[Path], name: str):
    manifest = RunManifest(
        config_hash=config.config_hash(cfg),
        tool_version=__version__,
        started_at=started_at,
        finished_at=_now(),
        outputs=[str(p) for p in outputs],
        base_seed=cfg.base_seed,
    )
    path = storage.write_manifest(out_dir / f"manifest_{name}.json", manifest)
    logger.info(f"Wrote {len(outputs)} output(s) and {path}")


def _training_data(args, cfg: ExperimentConfig) -> Trajectory:
    if getattr(args, "data", None):
        return storage.read_trajectory_csv(args.data)
    return collect_training_data(cfg.system, cfg.regime, cfg.N_train, RngState(cfg.base_seed, STREAM_TRAIN))


def cmd_simulate(args, cfg: ExperimentConfig, out_dir: Path, started_at: str) -> int:
    traj = collect_training_data(cfg.system, cfg.regime, cfg.N_train, RngState(cfg.base_seed, STREAM_TRAIN))
    path = storage.write_trajectory_csv(out_dir / "train.csv", traj)
    _write_manifest(out_dir, cfg, started_at, [path], "simulate")
    return 0


def cmd_identify(args, cfg: ExperimentConfig, out_dir: Path, started_at: str) -> int:
    variant = METHODS[args.method]
    if variant == Variant.SSW and not args.w_bar:
        raise ConfigError("--method ssw needs --w-bar (run the sensitivity command first)")
    if variant != Variant.ORACLE_KF and not args.data:
        raise ConfigError(f"--method {args.method} needs --data")

    if variant == Variant.SSW:
        W_bar = storage.read_w_bar(args.w_bar)
        prob = build_closed_loop_regression(storage.read_trajectory_csv(args.data), cfg.arx)
        if W_bar.shape[0] != prob.structure.n_theta:
            raise DataError(f"{args.w_bar}: W_bar has dimension {W_bar.shape[0]}, ARX structure has "
                            f"{prob.structure.n_theta} coefficients")
        kernel, sigma2 = eb_tune(prob, cfg.kernel_family)
        K = kernel_matrix(kernel, prob.structure)
        first_stage = kernel_posterior(prob, K, sigma2, kernel)
        estimate = shaped_estimate(prob, K, sigma2, first_stage.theta_bar, W_bar, cfg.mu, kernel)
    else:
        train = storage.read_trajectory_csv(args.data) if args.data else None
        estimate = estimate_for_variant(cfg, variant, train, cfg.base_seed)

    logger.info(f"Identified {estimate.method.value} predictor: trace(Sigma_theta)={estimate.trace_sigma_theta:.4g}")
    path = storage.write_json(out_dir / f"posterior_{args.method}.json", storage.posterior_to_dict(estimate))
    _write_manifest(out_dir, cfg, started_at, [path], f"identify_{args.method}")
    return 0


def cmd_sensitivity(args, cfg: ExperimentConfig, out_dir: Path, started_at: str) -> int:
    prob = build_closed_loop_regression(storage.read_trajectory_csv(args.data), cfg.arx)
    kernel, sigma2 = eb_tune(prob, cfg.kernel_family)
    K = kernel_matrix(kernel, prob.structure)
    estimate = kernel_posterior(prob, K, sigma2, kernel)
    W_bar, n_tasks = collect_task_sensitivity(cfg, estimate, cfg.base_seed)

    w_path = storage.write_json(out_dir / "w_bar.json", storage.w_bar_to_dict(W_bar, n_tasks, cfg.normalize_w))
    k_path = storage.write_json(out_dir / "kernel.json", {
        "kernel": kernel.to_dict(),
        "K": K,
        "W_bar_norm": normalize_w(W_bar),
    })
    _write_manifest(out_dir, cfg, started_at, [w_path, k_path], "sensitivity")
    return 0


def cmd_closed_loop(args, cfg: ExperimentConfig, out_dir: Path, started_at: str) -> int:
    variant = METHODS[args.method]
    train = None if variant == Variant.ORACLE_KF else _training_data(args, cfg)
    estimate = estimate_for_variant(cfg, variant, train, cfg.base_seed)
    controller = build_controller(cfg, estimate, fce=variant == Variant.FCE)
    Lf = cfg.mpc.horizons.Lf
    run = run_closed_loop(cfg.system, controller, tracking_reference(cfg.N_test + Lf), cfg.N_test,
                          RngState(cfg.base_seed, STREAM_TEST))
    logger.info(f"Closed-loop {variant.value}: J={run.cost:.6g}")

    csv_path = storage.write_closed_loop_csv(out_dir / f"closed_loop_{args.method}.csv", run)
    json_path = storage.write_json(out_dir / f"closed_loop_{args.method}.json", storage.closed_loop_summary(run))
    _write_manifest(out_dir, cfg, started_at, [csv_path, json_path], f"closed_loop_{args.method}")
    return 0


def cmd_monte_carlo(args, cfg: ExperimentConfig, out_dir: Path, started_at: str) -> int:
    global scheduler_service

    if args.influx and not all([config.INFLUXDB_URL, config.INFLUXDB_TOKEN, config.INFLUXDB_ORG, config.INFLUXDB_BUCKET]):
        raise ConfigError("--influx needs INFLUXDB_URL, INFLUXDB_TOKEN, INFLUXDB_ORG and INFLUXDB_BUCKET")
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {args.jobs}")

    bench = BenchService(cfg, jobs=args.jobs)
    scheduler_service = SchedulerService(bench.completed_records, out_dir / "mc_partial.json",
                                         checkpoint_interval=config.CHECKPOINT_INTERVAL)
    scheduler_service.start()
    try:
        result = bench.run_monte_carlo()
    finally:
        if scheduler_service.running:
            scheduler_service.stop(flush=False)

    outputs = [
        storage.write_json(out_dir / "mc_results.json", storage.mc_result_to_dict(result)),
        storage.write_summary_csv(out_dir / "mc_summary.csv", result.aggregates),
    ]
    for variant, summary in result.aggregates.items():
        path = storage.write_trajectory_stats_csv(out_dir / f"trajectories_{variant.value}.csv", summary)
        if path is not None:
            outputs.append(path)

    if args.influx:
        influxdb_service = InfluxDBService()
        try:
            influxdb_service.export_result(result)
        finally:
            influxdb_service.close()

    _write_manifest(out_dir, cfg, started_at, outputs, "monte_carlo")
    return 0


def cmd_report(args, cfg: ExperimentConfig, out_dir: Path, started_at: str) -> int:
    path = Path(args.results) if args.results else out_dir / "mc_results.json"
    try:
        payload = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read Monte Carlo results {path}: {e}") from e
    records = storage.records_from_dict(payload)
    variants = tuple(dict.fromkeys(r.variant for r in records))
    if not variants:
        raise DataError(f"{path}: no Monte Carlo records")
    report_cfg = dataclasses.replace(cfg, variants=variants)
    aggregates = summarize(McResult(config=report_cfg, records=records))

    print(storage.format_summary(aggregates))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "sensitivity": cmd_sensitivity,
    "closed-loop": cmd_closed_loop,
    "monte-carlo": cmd_monte_carlo,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entrypoint function; returns the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging()

    try:
        signal.signal(signal.SIGINT, signal_handler)
        signal.signal(signal.SIGTERM, signal_handler)

        cfg = _load_config(args)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out_dir, _now())

    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return EXIT_INTERRUPTED
    except DdpcError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Critical error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
