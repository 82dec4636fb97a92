from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import List, Dict, Optional, Tuple, NamedTuple

import numpy as np

from ddpc_lab.exceptions import DimensionMismatch


class Regime(str, Enum):
    INFORMATIVE = "informative"
    WEAK = "weak"


class KernelFamily(str, Enum):
    TC = "TC"
    SS = "SS"


class Method(str, Enum):
    OLS = "OLS"
    SS = "SS"
    TC = "TC"
    SSW = "SS+W"
    ORACLE = "Oracle"


class Variant(str, Enum):
    OLS = "OLS"
    FCE = "FCE"
    SS = "SS"
    SSW = "SSW"
    ORACLE_KF = "OracleKF"


class ConstraintMode(str, Enum):
    HARD = "hard"
    SOFT = "soft"


class QpStatus(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


# Second-order benchmark plant, stable with DC gain close to one
BENCHMARK_A = [[0.7326, -0.0861], [0.1722, 0.9909]]
BENCHMARK_B = [[0.0609], [0.0064]]
BENCHMARK_C = [[0.0, 1.4142]]
BENCHMARK_D = [[0.0]]


@dataclass
class LtiSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    sigma_w2: float = 0.01
    sigma_v2: float = 0.01

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n \
                or self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise DimensionMismatch("Inconsistent state-space matrix dimensions")
        if self.sigma_w2 < 0 or self.sigma_v2 < 0:
            raise ValueError("Noise variances must be non-negative")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @classmethod
    def benchmark(cls, sigma_w2: float = 0.01, sigma_v2: float = 0.01) -> "LtiSystem":
        return cls(A=BENCHMARK_A, B=BENCHMARK_B, C=BENCHMARK_C, D=BENCHMARK_D,
                   sigma_w2=sigma_w2, sigma_v2=sigma_v2)


@dataclass
class Trajectory:
    """Input/output record; rows are time steps."""
    u: np.ndarray
    y: np.ndarray
    r: Optional[np.ndarray] = None
    t0: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(len(self.u), -1)
        self.y = np.asarray(self.y, dtype=float).reshape(len(self.y), -1)
        if self.r is not None:
            self.r = np.asarray(self.r, dtype=float).reshape(len(self.r), -1)
            if len(self.r) != len(self.u):
                raise DimensionMismatch("Reference length differs from input length")
        if len(self.u) != len(self.y):
            raise DimensionMismatch("Input and output sequences differ in length")

    def __len__(self) -> int:
        return len(self.u)

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]


@dataclass
class KalmanGain:
    K: np.ndarray
    P: np.ndarray


class Coordinate(NamedTuple):
    """One scalar entry of the ARX coefficient vector."""
    family: str  # "y" or "u"
    lag: int
    row: int
    col: int


@dataclass(frozen=True)
class ArxStructure:
    na: int
    nb: int
    include_feedthrough: bool = True
    n_y: int = 1
    n_u: int = 1

    def __post_init__(self):
        if self.na < 1 or self.nb < 0:
            raise ValueError(f"Invalid ARX orders na={self.na}, nb={self.nb}")

    @property
    def first_input_lag(self) -> int:
        return 0 if self.include_feedthrough else 1

    @property
    def n_theta_y(self) -> int:
        return self.n_y * self.n_y * self.na

    @property
    def n_theta(self) -> int:
        n_input_lags = self.nb + 1 - self.first_input_lag
        return self.n_theta_y + self.n_y * self.n_u * n_input_lags

    @property
    def max_lag(self) -> int:
        return max(self.na, self.nb)

    def coordinates(self) -> List[Coordinate]:
        """Coordinates in theta order: output lags first, each matrix vectorized column-major."""
        coords = []
        for lag in range(1, self.na + 1):
            for col in range(self.n_y):
                for row in range(self.n_y):
                    coords.append(Coordinate("y", lag, row, col))
        for lag in range(self.first_input_lag, self.nb + 1):
            for col in range(self.n_u):
                for row in range(self.n_y):
                    coords.append(Coordinate("u", lag, row, col))
        return coords


@dataclass
class PredictorTheta:
    structure: ArxStructure
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.shape[0] != self.structure.n_theta:
            raise DimensionMismatch(
                f"Theta has {self.values.shape[0]} entries, structure needs {self.structure.n_theta}")

    def phi_y(self, lag: int) -> np.ndarray:
        s = self.structure
        start = (lag - 1) * s.n_y * s.n_y
        return self.values[start:start + s.n_y * s.n_y].reshape((s.n_y, s.n_y), order="F")

    def phi_u(self, lag: int) -> np.ndarray:
        s = self.structure
        if lag < s.first_input_lag:
            return np.zeros((s.n_y, s.n_u))
        start = s.n_theta_y + (lag - s.first_input_lag) * s.n_y * s.n_u
        return self.values[start:start + s.n_y * s.n_u].reshape((s.n_y, s.n_u), order="F")

    @classmethod
    def from_coefficients(cls, structure: ArxStructure, phi_y: List[np.ndarray],
                          phi_u: List[np.ndarray]) -> "PredictorTheta":
        """Build theta from ``phi_y = [phi_y^1..phi_y^na]`` and ``phi_u = [phi_u^first..phi_u^nb]``."""
        parts = [np.atleast_2d(m).ravel(order="F") for m in phi_y]
        parts += [np.atleast_2d(m).ravel(order="F") for m in phi_u]
        return cls(structure=structure, values=np.concatenate(parts) if parts else np.zeros(0))


@dataclass
class RegressionProblem:
    H: np.ndarray
    yvec: np.ndarray
    structure: ArxStructure

    @property
    def rows(self) -> int:
        return self.H.shape[0]


@dataclass
class KernelConfig:
    family: KernelFamily
    c_y: float
    lambda_y: float
    c_u: float
    lambda_u: float

    C_BOUNDS = (1e-8, 1e4)
    LAMBDA_BOUNDS = (0.5, 0.999)

    def __post_init__(self):
        self.family = KernelFamily(self.family)
        if self.c_y <= 0 or self.c_u <= 0:
            raise ValueError("Kernel scales must be positive")
        if not (0 < self.lambda_y < 1 and 0 < self.lambda_u < 1):
            raise ValueError("Kernel decay rates must lie in (0, 1)")

    def to_dict(self) -> Dict:
        return {"family": self.family.value, "c_y": self.c_y, "lambda_y": self.lambda_y,
                "c_u": self.c_u, "lambda_u": self.lambda_u}


@dataclass
class PosteriorEstimate:
    theta_bar: PredictorTheta
    sigma_theta: np.ndarray
    sigma2: float
    method: Method
    kernel: Optional[KernelConfig] = None
    ridge_fallback: bool = False
    residual_rms: float = float("nan")

    @property
    def trace_sigma_theta(self) -> float:
        return float(np.trace(self.sigma_theta))


@dataclass(frozen=True)
class Horizons:
    Lp: int
    Lf: int

    def __post_init__(self):
        if self.Lp < 1 or self.Lf < 1:
            raise ValueError(f"Horizons must be positive, got Lp={self.Lp}, Lf={self.Lf}")

    @property
    def n_lags(self) -> int:
        """Number of padded lag slots, covering lags 0..Lp+Lf-1."""
        return self.Lp + self.Lf


@dataclass
class PaddedTheta:
    """Zero-padded coefficients; ``phi_y[0]`` is unused and always zero."""
    phi_y: np.ndarray  # (Lp+Lf, n_y, n_y)
    phi_u: np.ndarray  # (Lp+Lf, n_y, n_u)
    embed: np.ndarray
    horizons: Horizons

    @property
    def values(self) -> np.ndarray:
        y_part = [self.phi_y[lag].ravel(order="F") for lag in range(1, self.horizons.n_lags)]
        u_part = [self.phi_u[lag].ravel(order="F") for lag in range(self.horizons.n_lags)]
        return np.concatenate(y_part + u_part)


@dataclass
class LiftedPredictor:
    Psi_u: np.ndarray
    Psi_y: np.ndarray
    Phi_u: np.ndarray
    Phi_y: np.ndarray
    A: np.ndarray
    horizons: Horizons
    n_y: int
    n_u: int


@dataclass
class PlacementEntry:
    """Block positions ``(block_row, block_col)`` of one coordinate in each lifted matrix."""
    coordinate: Coordinate
    positions: Dict[str, np.ndarray]


@dataclass
class PlacementIndex:
    structure: ArxStructure
    horizons: Horizons
    entries: List[PlacementEntry]


@dataclass
class TaskPoint:
    u_p: np.ndarray
    y_p: np.ndarray
    u_f: np.ndarray


@dataclass
class SensitivityBundle:
    """Columnwise affine Jacobian pieces, ``J_i(u_f) = J0[:, i] + J1[i] @ u_f``."""
    J0: np.ndarray  # (n_y Lf, n_theta)
    J1: np.ndarray  # (n_theta, n_y Lf, n_u Lf)
    theta_bar: PredictorTheta
    u_p: np.ndarray
    y_p: np.ndarray

    def jacobian_at(self, u_f: np.ndarray) -> np.ndarray:
        u_f = np.asarray(u_f, dtype=float).ravel()
        if u_f.shape[0] != self.J1.shape[2]:
            raise DimensionMismatch(f"u_f has {u_f.shape[0]} entries, expected {self.J1.shape[2]}")
        return self.J0 + np.einsum("imp,p->mi", self.J1, u_f)


@dataclass
class MpcConfig:
    horizons: Horizons = field(default_factory=lambda: Horizons(10, 15))
    Q_weight: float = 1.0
    R_weight: float = 0.01
    u_bounds: Tuple[float, float] = (-2.0, 2.0)
    y_bounds: Tuple[float, float] = (-2.0, 2.0)
    output_constraint_mode: ConstraintMode = ConstraintMode.SOFT
    soft_penalty: float = 1e4
    fce_enabled: bool = False

    def __post_init__(self):
        self.output_constraint_mode = ConstraintMode(self.output_constraint_mode)
        if self.Q_weight < 0 or self.R_weight <= 0:
            raise ValueError("MPC weights require Q >= 0 and R > 0")
        for lo, hi in (self.u_bounds, self.y_bounds):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"Invalid bounds ({lo}, {hi})")


@dataclass
class QpProblem:
    """``min 1/2 z'Pz + q'z  s.t.  lower <= G z <= upper``; the first ``n_inputs`` entries of z are inputs."""
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_inputs: int

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def n_slack(self) -> int:
        return self.n - self.n_inputs


@dataclass
class QpSolution:
    z: np.ndarray
    duals: np.ndarray
    kkt_residual: float
    status: QpStatus
    iterations: int = 0
    slack_usage: float = 0.0


@dataclass
class StepDiagnostics:
    status: QpStatus
    qp_iters: int
    kkt_residual: float
    slack_usage: float


@dataclass
class ClosedLoopRun:
    u: np.ndarray
    y: np.ndarray
    r: np.ndarray
    qp_iters: np.ndarray
    kkt_residual: np.ndarray
    slack_usage: np.ndarray
    cost: float
    valid: bool = True
    task_points: List[TaskPoint] = field(default_factory=list, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.u)


@dataclass
class ExperimentConfig:
    system: LtiSystem = field(default_factory=LtiSystem.benchmark)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    arx: ArxStructure = field(default_factory=lambda: ArxStructure(na=10, nb=10))
    kernel_family: KernelFamily = KernelFamily.SS
    regime: Regime = Regime.WEAK
    variants: Tuple[Variant, ...] = tuple(Variant)
    N_train: int = 150
    N_test: int = 150
    N_MC: int = 500
    mu: float = 1.0
    normalize_w: bool = False
    base_seed: int = 0

    def __post_init__(self):
        self.regime = Regime(self.regime)
        self.kernel_family = KernelFamily(self.kernel_family)
        self.variants = tuple(Variant(v) for v in self.variants)
        if self.N_MC < 1 or self.N_train < 1 or self.N_test < 1:
            raise ValueError("N_MC, N_train and N_test must be positive")
        if not self.variants:
            raise ValueError("At least one controller variant is required")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")

    def to_dict(self) -> Dict:
        return {
            "system": {"A": self.system.A.tolist(), "B": self.system.B.tolist(),
                       "C": self.system.C.tolist(), "D": self.system.D.tolist()},
            "noise": {"sigma_w2": self.system.sigma_w2, "sigma_v2": self.system.sigma_v2},
            "horizons": {"Lp": self.mpc.horizons.Lp, "Lf": self.mpc.horizons.Lf},
            "arx": asdict(self.arx),
            "kernel": {"family": self.kernel_family.value},
            "mpc": {"Q": self.mpc.Q_weight, "R": self.mpc.R_weight,
                    "u_bounds": list(self.mpc.u_bounds), "y_bounds": list(self.mpc.y_bounds),
                    "output_constraints": self.mpc.output_constraint_mode.value,
                    "soft_penalty": self.mpc.soft_penalty},
            "experiment": {"regime": self.regime.value, "variants": [v.value for v in self.variants],
                           "N_train": self.N_train, "N_test": self.N_test, "N_MC": self.N_MC,
                           "mu": self.mu, "normalize_w": self.normalize_w, "base_seed": self.base_seed},
        }


@dataclass
class RunRecord:
    variant: Variant
    run_id: int
    seed: int
    cost_J: float
    trace_sigma_theta: Optional[float]
    valid: bool
    y: Optional[np.ndarray] = field(default=None, repr=False)
    u: Optional[np.ndarray] = field(default=None, repr=False)
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        return {"variant": self.variant.value, "run_id": self.run_id, "seed": self.seed,
                "cost_J": self.cost_J if self.valid else None,
                "trace_sigma_theta": self.trace_sigma_theta,
                "valid": self.valid, "error": self.error}


@dataclass
class VariantSummary:
    variant: Variant
    mean_J: float
    std_J: float
    median_J: float
    q25: float
    q75: float
    mean_trace: Optional[float]
    std_trace: Optional[float]
    valid_runs: int
    total_runs: int
    y_mean: Optional[np.ndarray] = field(default=None, repr=False)
    y_std: Optional[np.ndarray] = field(default=None, repr=False)
    u_mean: Optional[np.ndarray] = field(default=None, repr=False)
    u_std: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class McResult:
    config: ExperimentConfig
    records: List[RunRecord]
    aggregates: Dict[Variant, VariantSummary] = field(default_factory=dict)

    def records_for(self, variant: Variant) -> List[RunRecord]:
        return [r for r in self.records if r.variant == variant]


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    started_at: str
    finished_at: str
    outputs: List[str]
    base_seed: int
