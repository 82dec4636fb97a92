"""
CSV and JSON persistence for trajectories, estimates, Monte Carlo results and run manifests.

Floats are written with 17 significant digits so every file round-trips exactly.
"""
import csv
import json
import logging
import os
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from ddpc_lab.exceptions import DataError
from ddpc_lab.models import (
    ClosedLoopRun,
    McResult,
    PosteriorEstimate,
    RunManifest,
    RunRecord,
    Trajectory,
    Variant,
    VariantSummary,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SUMMARY_COLUMNS = ["variant", "mean_J", "std_J", "median_J", "q25", "q75", "mean_trace", "std_trace",
                   "valid_runs"]


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not np.isfinite(value):
        return None
    return float(value)


def write_atomic(path: PathLike, text: str):
    """Write through a temporary file in the target directory and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def write_json(path: PathLike, payload) -> Path:
    write_atomic(path, json.dumps(payload, indent=2, default=_json_default) + "\n")
    logger.debug(f"Wrote {path}")
    return Path(path)


def _write_rows(path: PathLike, header: List[str], rows: Iterable[List]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    logger.debug(f"Wrote {path}")
    return path


def _channel_names(prefix: str, count: int) -> List[str]:
    return [f"{prefix}_{i}" for i in range(1, count + 1)]


def write_trajectory_csv(path: PathLike, traj: Trajectory) -> Path:
    header = ["t"] + _channel_names("u", traj.n_u) + _channel_names("y", traj.n_y)
    if traj.r is not None:
        header += _channel_names("r", traj.r.shape[1])
    rows = []
    for k in range(len(traj)):
        row = [traj.t0 + k] + list(traj.u[k]) + list(traj.y[k])
        if traj.r is not None:
            row += list(traj.r[k])
        rows.append(row)
    return _write_rows(path, header, rows)


def read_trajectory_csv(path: PathLike) -> Trajectory:
    """Parse a trajectory CSV.

    Raises:
        DataError: for a missing file, a bad header or a malformed row (the row number is reported)
    """
    path = Path(path)
    try:
        with open(path, newline="") as f:
            lines = list(csv.reader(f))
    except OSError as e:
        raise DataError(f"Cannot read trajectory file {path}: {e}") from e
    if not lines:
        raise DataError(f"{path}: empty trajectory file")

    header = [name.strip() for name in lines[0]]
    if not header or header[0] != "t":
        raise DataError(f"{path}: header must start with 't', got {header[:1]}")
    groups = {prefix: [i for i, name in enumerate(header) if name.startswith(f"{prefix}_")]
              for prefix in ("u", "y", "r")}
    if not groups["u"] or not groups["y"]:
        raise DataError(f"{path}: header needs u_* and y_* columns")

    values = []
    for row_number, row in enumerate(lines[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {row_number} has {len(row)} fields, expected {len(header)}")
        try:
            values.append([float(v) for v in row])
        except ValueError:
            raise DataError(f"{path}: row {row_number} contains a non-numeric value") from None
    if not values:
        raise DataError(f"{path}: no data rows")

    data = np.array(values)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite values in trajectory")
    return Trajectory(
        u=data[:, groups["u"]],
        y=data[:, groups["y"]],
        r=data[:, groups["r"]] if groups["r"] else None,
        t0=int(data[0, 0]),
    )


def write_closed_loop_csv(path: PathLike, run: ClosedLoopRun) -> Path:
    n_u, n_y = run.u.shape[1], run.y.shape[1]
    header = (["t"] + _channel_names("u", n_u) + _channel_names("y", n_y) + _channel_names("r", run.r.shape[1])
              + ["qp_iters", "kkt_residual", "slack_usage"])
    rows = ([t] + list(run.u[t]) + list(run.y[t]) + list(run.r[t])
            + [int(run.qp_iters[t]), run.kkt_residual[t], run.slack_usage[t]]
            for t in range(run.n_steps))
    return _write_rows(path, header, rows)


def closed_loop_summary(run: ClosedLoopRun) -> Dict:
    return {"cost_J": run.cost, "valid": run.valid, "n_steps": run.n_steps}


def posterior_to_dict(est: PosteriorEstimate) -> Dict:
    kernel = est.kernel.to_dict() if est.kernel is not None else None
    return {
        "method": est.method.value,
        "theta": est.theta_bar.values.tolist(),
        "sigma2": est.sigma2,
        "trace_sigma_theta": est.trace_sigma_theta,
        "kernel": kernel,
        "sigma_theta": est.sigma_theta.tolist(),
        "residual_rms": _finite_or_none(est.residual_rms),
        "ridge_fallback": est.ridge_fallback,
    }


def w_bar_to_dict(W_bar: np.ndarray, n_tasks: int, normalized: bool) -> Dict:
    return {"n_tasks": n_tasks, "normalized": normalized, "trace": float(np.trace(W_bar)),
            "W_bar": np.asarray(W_bar).tolist()}


def read_w_bar(path: PathLike) -> np.ndarray:
    try:
        payload = json.loads(Path(path).read_text())
        W_bar = np.array(payload["W_bar"], dtype=float)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"Cannot read sensitivity matrix from {path}: {e}") from e
    if W_bar.ndim != 2 or W_bar.shape[0] != W_bar.shape[1]:
        raise DataError(f"{path}: W_bar must be a square matrix, got shape {W_bar.shape}")
    return W_bar


def _summary_to_dict(summary: VariantSummary) -> Dict:
    return {
        "mean_J": _finite_or_none(summary.mean_J),
        "std_J": _finite_or_none(summary.std_J),
        "median_J": _finite_or_none(summary.median_J),
        "q25": _finite_or_none(summary.q25),
        "q75": _finite_or_none(summary.q75),
        "mean_trace": summary.mean_trace,
        "std_trace": summary.std_trace,
        "valid_runs": summary.valid_runs,
        "total_runs": summary.total_runs,
    }


def mc_result_to_dict(res: McResult) -> Dict:
    return {
        "config": res.config.to_dict(),
        "records": [r.to_dict() for r in res.records],
        "aggregates": {v.value: _summary_to_dict(s) for v, s in res.aggregates.items()},
    }


def records_from_dict(payload: Dict) -> List[RunRecord]:
    """Rebuild per-run records from a Monte Carlo JSON document."""
    try:
        return [
            RunRecord(
                variant=Variant(item["variant"]),
                run_id=int(item["run_id"]),
                seed=int(item["seed"]),
                cost_J=float("nan") if item["cost_J"] is None else float(item["cost_J"]),
                trace_sigma_theta=item["trace_sigma_theta"],
                valid=bool(item["valid"]),
                error=item.get("error"),
            )
            for item in payload["records"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Malformed Monte Carlo record: {e}") from e


def _summary_rows(aggregates: Dict[Variant, VariantSummary]) -> List[List]:
    return [[s.variant.value, s.mean_J, s.std_J, s.median_J, s.q25, s.q75, s.mean_trace, s.std_trace, s.valid_runs]
            for s in aggregates.values()]


def write_summary_csv(path: PathLike, aggregates: Dict[Variant, VariantSummary]) -> Path:
    return _write_rows(path, SUMMARY_COLUMNS, _summary_rows(aggregates))


def format_summary(aggregates: Dict[Variant, VariantSummary]) -> str:
    """Summary table in the same CSV layout as ``write_summary_csv``."""
    lines = [",".join(SUMMARY_COLUMNS)]
    lines += [",".join(fmt(v) for v in row) for row in _summary_rows(aggregates)]
    return "\n".join(lines)


def write_trajectory_stats_csv(path: PathLike, summary: VariantSummary) -> Optional[Path]:
    """Pointwise mean/std of the closed-loop trajectories across valid runs."""
    if summary.y_mean is None:
        return None
    n_y, n_u = summary.y_mean.shape[1], summary.u_mean.shape[1]
    header = (["t"] + _channel_names("y_mean", n_y) + _channel_names("y_std", n_y)
              + _channel_names("u_mean", n_u) + _channel_names("u_std", n_u))
    rows = ([t] + list(summary.y_mean[t]) + list(summary.y_std[t]) + list(summary.u_mean[t])
            + list(summary.u_std[t]) for t in range(len(summary.y_mean)))
    return _write_rows(path, header, rows)


def write_manifest(path: PathLike, manifest: RunManifest) -> Path:
    return write_json(path, asdict(manifest))
