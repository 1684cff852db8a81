from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from influence_loo.data import load_iris
from influence_loo.linalg import RngStream
from influence_loo.loo import prepare_split
from influence_loo.mlp import ArchSpec, build_mlp
from influence_loo.training import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]
IRIS = ROOT / "data" / "iris.csv"
MNIST = ROOT / "data" / "mnist"

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def iris():
    return load_iris(IRIS)


@pytest.fixture(scope="session")
def iris_split(iris):
    return prepare_split(iris, 0.2, 0)


@pytest.fixture(scope="session")
def trained_small(iris_split):
    """Depth-1 width-5 Iris model (43 parameters), briefly trained with weight decay."""
    tr, te = iris_split
    model = build_mlp(ArchSpec(4, 1, 5, 3), RngStream(3))
    model, _ = train(model, tr, TrainConfig(weight_decay=0.005, epochs=3000))
    return model, tr, te


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
