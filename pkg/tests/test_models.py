import numpy as np
import pytest

from ddpc_lab.exceptions import DimensionMismatch
from ddpc_lab.models import (
    ArxStructure,
    ExperimentConfig,
    Horizons,
    KernelConfig,
    KernelFamily,
    LtiSystem,
    MpcConfig,
    PredictorTheta,
    RunRecord,
    Trajectory,
    Variant,
)


def test_benchmark_system():
    sys = LtiSystem.benchmark()
    assert (sys.n, sys.n_u, sys.n_y) == (2, 1, 1)
    np.testing.assert_array_equal(sys.A, [[0.7326, -0.0861], [0.1722, 0.9909]])
    np.testing.assert_array_equal(sys.B, [[0.0609], [0.0064]])
    np.testing.assert_array_equal(sys.C, [[0.0, 1.4142]])
    np.testing.assert_array_equal(sys.D, [[0.0]])
    assert sys.sigma_w2 == sys.sigma_v2 == 0.01


def test_system_dimension_check():
    with pytest.raises(DimensionMismatch):
        LtiSystem(A=np.eye(2), B=np.ones((3, 1)), C=np.ones((1, 2)), D=np.zeros((1, 1)))
    with pytest.raises(ValueError):
        LtiSystem.benchmark(sigma_w2=-1.0)


def test_trajectory_lengths_must_agree():
    traj = Trajectory(u=[1.0, 2.0, 3.0], y=[0.0, 0.0, 0.0])
    assert len(traj) == 3
    assert (traj.n_u, traj.n_y) == (1, 1)
    with pytest.raises(DimensionMismatch):
        Trajectory(u=[1.0, 2.0], y=[0.0])
    with pytest.raises(DimensionMismatch):
        Trajectory(u=[1.0, 2.0], y=[0.0, 0.0], r=[1.0])


class TestArxStructure:
    """Tests for the ARX coefficient layout."""

    def test_parameter_count(self):
        assert ArxStructure(na=10, nb=10).n_theta == 21
        assert ArxStructure(na=10, nb=10, include_feedthrough=False).n_theta == 20
        assert ArxStructure(na=2, nb=1, n_y=2, n_u=3).n_theta == 2 * 2 * 2 + 2 * 3 * 2

    def test_invalid_orders(self):
        with pytest.raises(ValueError):
            ArxStructure(na=0, nb=1)
        with pytest.raises(ValueError):
            ArxStructure(na=1, nb=-1)

    def test_coordinates_are_column_major(self):
        coords = ArxStructure(na=1, nb=0, n_y=2, n_u=1).coordinates()
        assert [(c.family, c.lag, c.row, c.col) for c in coords] == [
            ("y", 1, 0, 0), ("y", 1, 1, 0), ("y", 1, 0, 1), ("y", 1, 1, 1),
            ("u", 0, 0, 0), ("u", 0, 1, 0),
        ]


class TestPredictorTheta:
    """Tests for PredictorTheta accessors."""

    def test_coefficient_round_trip(self, rng):
        structure = ArxStructure(na=2, nb=1, n_y=2, n_u=1)
        phi_y = [rng.standard_normal((2, 2)) for _ in range(2)]
        phi_u = [rng.standard_normal((2, 1)) for _ in range(2)]
        theta = PredictorTheta.from_coefficients(structure, phi_y, phi_u)
        np.testing.assert_array_equal(theta.phi_y(2), phi_y[1])
        np.testing.assert_array_equal(theta.phi_u(0), phi_u[0])
        np.testing.assert_array_equal(theta.values[:4], phi_y[0].ravel(order="F"))

    def test_missing_feedthrough_reads_as_zero(self):
        structure = ArxStructure(na=1, nb=1, include_feedthrough=False)
        theta = PredictorTheta(structure, [0.5, 2.0])
        np.testing.assert_array_equal(theta.phi_u(0), [[0.0]])
        np.testing.assert_array_equal(theta.phi_u(1), [[2.0]])

    def test_length_is_checked(self):
        with pytest.raises(DimensionMismatch):
            PredictorTheta(ArxStructure(na=1, nb=1), np.zeros(5))


def test_kernel_config_validation():
    KernelConfig(KernelFamily.TC, 1.0, 0.9, 1.0, 0.9)
    with pytest.raises(ValueError):
        KernelConfig(KernelFamily.TC, 0.0, 0.9, 1.0, 0.9)
    with pytest.raises(ValueError):
        KernelConfig(KernelFamily.SS, 1.0, 1.0, 1.0, 0.9)


def test_horizons_and_mpc_validation():
    with pytest.raises(ValueError):
        Horizons(Lp=0, Lf=5)
    with pytest.raises(ValueError):
        MpcConfig(R_weight=0.0)
    with pytest.raises(ValueError):
        MpcConfig(u_bounds=(1.0, -1.0))
    cfg = MpcConfig(output_constraint_mode="hard")
    assert cfg.output_constraint_mode.value == "hard"


def test_experiment_defaults():
    cfg = ExperimentConfig()
    assert (cfg.N_train, cfg.N_test, cfg.N_MC) == (150, 150, 500)
    assert (cfg.mpc.horizons.Lp, cfg.mpc.horizons.Lf) == (10, 15)
    assert cfg.mu == 1.0
    assert cfg.variants == tuple(Variant)
    with pytest.raises(ValueError):
        ExperimentConfig(variants=())
    with pytest.raises(ValueError):
        ExperimentConfig(N_MC=0)


def test_invalid_run_record_hides_cost():
    record = RunRecord(variant=Variant.OLS, run_id=1, seed=8, cost_J=float("nan"),
                       trace_sigma_theta=None, valid=False, error="RunInvalid: x")
    assert record.to_dict() == {"variant": "OLS", "run_id": 1, "seed": 8, "cost_J": None,
                                "trace_sigma_theta": None, "valid": False, "error": "RunInvalid: x"}
