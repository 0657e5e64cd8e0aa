import numpy as np
import pytest
import yaml

from evomoe import numerics as nx
from evomoe.config import Config

GRAD_EPS = 1e-6
GRAD_FLOOR = 1e-4


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the multi-thousand-step desk runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped unless --runslow is given")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_raw(**model):
    """A model small enough to train for a few dozen steps inside a unit test."""
    base = {
        "layers": 2,
        "d_model": 16,
        "d_ff": 32,
        "heads": 2,
        "vocab": 16,
        "context": 8,
        "n_experts": 4,
        "shared_iters": 5,
        "total_iters": 20,
        "seed": 0,
    }
    base.update(model)
    return {
        "model": base,
        "optim": {"warmup_iters": 2},
        "data": {"kind": "mixture", "size": 4000, "n_languages": 4, "batch_size": 4},
        "logging": {"log_every": 10, "trace_every": 5, "tracked_tokens": [0, 5]},
    }


@pytest.fixture
def make_config():
    def _make(**model):
        return Config.from_dict(tiny_raw(**model))

    return _make


@pytest.fixture
def write_config(tmp_path):
    """Writes a tiny config as YAML and returns its path."""

    def _write(name="tiny.yaml", **model):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(tiny_raw(**model)))
        return path

    return _write


def check_gradients(build, params, samples=20, seed=0):
    """Worst relative error between backward() and central differences at random entries.

    ``build`` must be a deterministic function returning a scalar Tensor.
    """
    for p in params:
        p.grad = None
    nx.backward(build())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        which = int(rng.integers(len(params)))
        param = params[which]
        index = tuple(int(rng.integers(n)) for n in param.shape)
        base = param.numpy()
        shifted = base.copy()
        shifted[index] += GRAD_EPS
        param.assign(shifted)
        up = build().item()
        shifted[index] -= 2 * GRAD_EPS
        param.assign(shifted)
        down = build().item()
        param.assign(base)
        numeric = (up - down) / (2 * GRAD_EPS)
        exact = analytic[which][index]
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), GRAD_FLOOR))
    return worst


@pytest.fixture
def gradcheck():
    return check_gradients
