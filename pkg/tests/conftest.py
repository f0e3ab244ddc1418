from __future__ import annotations

import numpy as np
import pytest

from tems.config import benchmark_config
from tems.experiment import build_experiment
from tems.model import ModelSpec, UncertaintyDecl


def _gain_f(x, u, d):
    return d * x


def gain_model(bounds=(0.0, 2.0), nominal=1.0) -> tuple[ModelSpec, UncertaintyDecl]:
    """Scalar ``x+ = d x``; the input is ignored."""
    model = ModelSpec("gain", 1, 1, 1, _gain_f, input_bounds=[(-1.0, 1.0)])
    decl = UncertaintyDecl([nominal], [bounds[0]], [bounds[1]], [True])
    return model, decl


def _shift_f(x, u, d):
    return 0.0 * x + d


def shift_model(bounds=(0.0, 1.0), nominal=0.5) -> tuple[ModelSpec, UncertaintyDecl]:
    """Scalar ``x+ = d``."""
    model = ModelSpec("shift", 1, 1, 1, _shift_f, input_bounds=[(-1.0, 1.0)])
    decl = UncertaintyDecl([nominal], [bounds[0]], [bounds[1]], [True])
    return model, decl


@pytest.fixture(scope="session")
def benchmark_experiment():
    return build_experiment(benchmark_config())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
