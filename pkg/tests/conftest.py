import time

import numpy as np
import pytest

from varproto import kernels
from varproto.episodes import standard_benchmark
from varproto.train import TrainConfig, train


@pytest.fixture(params=sorted(kernels.available()))
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    mod = kernels.available()[request.param]
    monkeypatch.setattr(kernels, "_backend", mod)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def benchmark_splits():
    return standard_benchmark()


@pytest.fixture(scope="session")
def trained(benchmark_splits):
    """The paper-default configuration trained on the standard benchmark (data seed 7, train seed 0)."""
    return _timed_train(benchmark_splits, TrainConfig())


@pytest.fixture(scope="session")
def trained_unreg(benchmark_splits):
    return _timed_train(benchmark_splits, TrainConfig(lam=0.0))


def _timed_train(splits, cfg):
    tr, va = splits
    start = time.perf_counter()
    res = train([tr], va, cfg)
    res.elapsed = time.perf_counter() - start
    return res
