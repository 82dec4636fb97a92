#!/usr/bin/env python
import code

import numpy as np

from ddpc_lab import ident, lifted, mpc, plant, qp, sensitivity
from ddpc_lab.config import load_experiment_config
from ddpc_lab.models import ArxStructure, Horizons, LtiSystem, Regime, Variant
from ddpc_lab.numerics import RngState
from ddpc_lab.services.bench_service import BenchService

system = LtiSystem.benchmark()
experiment = load_experiment_config()
bench = BenchService(experiment)

namespace = {
    "np": np,
    "ident": ident,
    "lifted": lifted,
    "mpc": mpc,
    "plant": plant,
    "qp": qp,
    "sensitivity": sensitivity,
    "ArxStructure": ArxStructure,
    "Horizons": Horizons,
    "LtiSystem": LtiSystem,
    "Regime": Regime,
    "Variant": Variant,
    "RngState": RngState,
    "system": system,
    "experiment": experiment,
    "bench": bench,
}
code.interact(
    banner="Python console with the benchmark plant as 'system' and a BenchService as 'bench'",
    local=namespace
)
