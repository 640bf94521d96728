"""Pytest configuration and fixtures."""
import tempfile

import mlflow
import numpy as np
import pytest

from arsam.datasets import make_two_moons
from arsam.objectives import QuadraticOracle, QuadraticSpec
from arsam.params import ParamVector
from train.config import build_config


def pytest_configure(config):
    """Point MLflow at a throwaway sqlite store before running tests."""
    tracking_dir = tempfile.mkdtemp()
    mlflow.set_tracking_uri(f"sqlite:///{tracking_dir}/mlflow.db")

    try:
        mlflow.create_experiment("test-experiment")
    except mlflow.exceptions.MlflowException:
        # Experiment already exists
        pass

    mlflow.set_experiment("test-experiment")


@pytest.fixture(autouse=True)
def output_dir(tmp_path, monkeypatch):
    """Every test writes run outputs under its own temporary directory."""
    monkeypatch.setenv("ARSAM_OUTPUT_DIR", str(tmp_path))
    monkeypatch.delenv("MLFLOW_TRACKING_URI", raising=False)
    return tmp_path


@pytest.fixture
def quadratic():
    """Spectrum (1, 4), no rotation: H = diag(1, 4)."""
    return QuadraticOracle(QuadraticSpec(eigenvalues=(1.0, 4.0)))


@pytest.fixture
def w_fixture(quadratic):
    return ParamVector([2.0, 1.0], quadratic.layout())


@pytest.fixture
def moons():
    return make_two_moons(200, 0.2, seed=7)


@pytest.fixture
def tiny_mlp_config():
    """A seconds-scale MLP run with deterministic telemetry."""
    def factory(**sections):
        data = {
            "seed": 0,
            "iterations": 120,
            "batch_size": 32,
            "objective": {"kind": "mlp", "hidden": [8]},
            "data": {"n": 200, "noise_std": 0.2},
            "optimizer": {"variant": "arsam", "eta": 0.1, "rho": 0.05},
            "schedule": {"segment_length": 10, "alpha": 0.4},
            "telemetry": {"clock": "logical"},
        }
        for key, value in sections.items():
            if isinstance(value, dict):
                data.setdefault(key, {}).update(value)
            else:
                data[key] = value
        return build_config(data)
    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
