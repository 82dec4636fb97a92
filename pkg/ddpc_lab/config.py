import hashlib
import io
import json
import os
from pathlib import Path
from typing import Callable, Dict, Optional, Union

from dotenv import dotenv_values, load_dotenv

from ddpc_lab.exceptions import ConfigError
from ddpc_lab.models import (
    ArxStructure,
    BENCHMARK_A,
    BENCHMARK_B,
    BENCHMARK_C,
    BENCHMARK_D,
    ConstraintMode,
    ExperimentConfig,
    Horizons,
    KernelFamily,
    LtiSystem,
    MpcConfig,
    Regime,
    Variant,
)

load_dotenv()

# Logging configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# Default number of worker processes for Monte Carlo runs
DDPC_JOBS = int(os.getenv("DDPC_JOBS", 1))

# Default output directory for all artifacts
DDPC_OUT_DIR = os.getenv("DDPC_OUT_DIR", "results")

# Seconds between partial Monte Carlo checkpoints
CHECKPOINT_INTERVAL = int(os.getenv("CHECKPOINT_INTERVAL", 30))

# InfluxDB Configuration (optional export)
INFLUXDB_URL = os.getenv("INFLUXDB_URL")
INFLUXDB_TOKEN = os.getenv("INFLUXDB_TOKEN")
INFLUXDB_ORG = os.getenv("INFLUXDB_ORG")
INFLUXDB_BUCKET = os.getenv("INFLUXDB_BUCKET")


def _parse_float(value: str) -> float:
    return float(value)


def _parse_int(value: str) -> int:
    return int(value)


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(value)


def _parse_matrix(value: str):
    """``"a,b;c,d"`` -> ``[[a, b], [c, d]]``."""
    rows = [[float(entry) for entry in row.split(",")] for row in value.split(";") if row.strip()]
    if not rows or len({len(row) for row in rows}) != 1:
        raise ValueError(value)
    return rows


def _parse_variants(value: str):
    return tuple(Variant(name.strip()) for name in value.split(",") if name.strip())


# key -> (parser, expected type shown in diagnostics)
CONFIG_KEYS: Dict[str, tuple] = {
    "SYSTEM_A": (_parse_matrix, "matrix 'a,b;c,d'"),
    "SYSTEM_B": (_parse_matrix, "matrix 'a,b;c,d'"),
    "SYSTEM_C": (_parse_matrix, "matrix 'a,b;c,d'"),
    "SYSTEM_D": (_parse_matrix, "matrix 'a,b;c,d'"),
    "NOISE_SIGMA_W2": (_parse_float, "float"),
    "NOISE_SIGMA_V2": (_parse_float, "float"),
    "HORIZONS_LP": (_parse_int, "integer"),
    "HORIZONS_LF": (_parse_int, "integer"),
    "ARX_NA": (_parse_int, "integer"),
    "ARX_NB": (_parse_int, "integer"),
    "ARX_FEEDTHROUGH": (_parse_bool, "boolean"),
    "KERNEL_FAMILY": (KernelFamily, "one of TC, SS"),
    "MPC_Q": (_parse_float, "float"),
    "MPC_R": (_parse_float, "float"),
    "MPC_U_MIN": (_parse_float, "float"),
    "MPC_U_MAX": (_parse_float, "float"),
    "MPC_Y_MIN": (_parse_float, "float"),
    "MPC_Y_MAX": (_parse_float, "float"),
    "MPC_OUTPUT_CONSTRAINTS": (ConstraintMode, "one of hard, soft"),
    "MPC_SOFT_PENALTY": (_parse_float, "float"),
    "EXPERIMENT_REGIME": (Regime, "one of informative, weak"),
    "EXPERIMENT_VARIANTS": (_parse_variants, "comma-separated list of OLS, FCE, SS, SSW, OracleKF"),
    "EXPERIMENT_N_TRAIN": (_parse_int, "integer"),
    "EXPERIMENT_N_TEST": (_parse_int, "integer"),
    "EXPERIMENT_N_MC": (_parse_int, "integer"),
    "EXPERIMENT_MU": (_parse_float, "float"),
    "EXPERIMENT_NORMALIZE_W": (_parse_bool, "boolean"),
    "EXPERIMENT_BASE_SEED": (_parse_int, "integer"),
}


def _line_numbers(text: str) -> Dict[str, int]:
    """Map each key to the line it is assigned on; lines that assign nothing are errors."""
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("export "):
            line = line[len("export "):].lstrip()
        key, sep, _ = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Line {lineno}: expected KEY=value, got {raw.strip()!r}")
        lines[key.strip()] = lineno
    return lines


def _parse_values(text: str) -> Dict[str, object]:
    lines = _line_numbers(text)
    raw_values = dotenv_values(stream=io.StringIO(text))
    parsed = {}
    for key, value in raw_values.items():
        lineno = lines.get(key, "?")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"Line {lineno}: unknown config key {key!r}")
        parser, expected = CONFIG_KEYS[key]
        if value is None:
            raise ConfigError(f"Line {lineno}: key {key!r} has no value, expected {expected}")
        try:
            parsed[key] = parser(value)
        except ValueError:
            raise ConfigError(f"Line {lineno}: invalid value {value!r} for {key!r}, expected {expected}") from None
    return parsed


def experiment_config_from_text(text: str) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from a dotenv-style document; absent keys keep their defaults."""
    values = _parse_values(text)
    get: Callable = values.get

    try:
        system = LtiSystem(
            A=get("SYSTEM_A", BENCHMARK_A),
            B=get("SYSTEM_B", BENCHMARK_B),
            C=get("SYSTEM_C", BENCHMARK_C),
            D=get("SYSTEM_D", BENCHMARK_D),
            sigma_w2=get("NOISE_SIGMA_W2", 0.01),
            sigma_v2=get("NOISE_SIGMA_V2", 0.01),
        )
        horizons = Horizons(Lp=get("HORIZONS_LP", 10), Lf=get("HORIZONS_LF", 15))
        arx = ArxStructure(na=get("ARX_NA", 10), nb=get("ARX_NB", 10),
                           include_feedthrough=get("ARX_FEEDTHROUGH", True),
                           n_y=system.n_y, n_u=system.n_u)
        mpc = MpcConfig(
            horizons=horizons,
            Q_weight=get("MPC_Q", 1.0),
            R_weight=get("MPC_R", 0.01),
            u_bounds=(get("MPC_U_MIN", -2.0), get("MPC_U_MAX", 2.0)),
            y_bounds=(get("MPC_Y_MIN", -2.0), get("MPC_Y_MAX", 2.0)),
            output_constraint_mode=get("MPC_OUTPUT_CONSTRAINTS", ConstraintMode.SOFT),
            soft_penalty=get("MPC_SOFT_PENALTY", 1e4),
        )
        config = ExperimentConfig(
            system=system,
            mpc=mpc,
            arx=arx,
            kernel_family=get("KERNEL_FAMILY", KernelFamily.SS),
            regime=get("EXPERIMENT_REGIME", Regime.WEAK),
            variants=get("EXPERIMENT_VARIANTS", tuple(Variant)),
            N_train=get("EXPERIMENT_N_TRAIN", 150),
            N_test=get("EXPERIMENT_N_TEST", 150),
            N_MC=get("EXPERIMENT_N_MC", 500),
            mu=get("EXPERIMENT_MU", 1.0),
            normalize_w=get("EXPERIMENT_NORMALIZE_W", False),
            base_seed=get("EXPERIMENT_BASE_SEED", 0),
        )
    except ValueError as e:
        raise ConfigError(f"Invalid experiment configuration: {e}") from e

    if arx.na > horizons.Lp or arx.nb > horizons.Lp:
        raise ConfigError(f"ARX orders na={arx.na}, nb={arx.nb} must not exceed HORIZONS_LP={horizons.Lp}")
    if mpc.soft_penalty <= 0:
        raise ConfigError("MPC_SOFT_PENALTY must be positive")
    return config


def load_experiment_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Read the experiment config document; ``None`` gives the benchmark defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    return experiment_config_from_text(text)


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the resolved configuration."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
