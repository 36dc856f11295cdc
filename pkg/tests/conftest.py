import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "backend"))

from expr import ExprBackend, parse  # noqa: E402
from game_core import BaselineVector, GameSpec, TableGame  # noqa: E402
from settings import DEFAULT_SETTINGS  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_table_game(rng: np.random.Generator, n: int, settings=DEFAULT_SETTINGS) -> TableGame:
    """Coalition values drawn i.i.d. uniform on [-1, 1]."""
    return TableGame(rng.uniform(-1.0, 1.0, size=1 << n), settings)


def expr_game(source: str, x, b, bounds=None, transform: str = "identity", settings=DEFAULT_SETTINGS,
              memoize: bool = False) -> GameSpec:
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    bounds = np.tile([0.0, 1.0], (x.size, 1)) if bounds is None else np.asarray(bounds, dtype=float)
    return GameSpec(ExprBackend(parse(source), x.size), x, BaselineVector(b, bounds), transform,
                    memoize=memoize, settings=settings)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_expr_game():
    return expr_game


@pytest.fixture
def make_table_game():
    return random_table_game


@pytest.fixture
def and2():
    return expr_game("x1*x2", [1, 1], [0, 0])


@pytest.fixture
def and3():
    return expr_game("x1*x2*x3", [1, 1, 1], [0, 0, 0])


@pytest.fixture
def additive():
    return expr_game("2*x1+3*x2", [1, 1], [0, 0], bounds=[[0, 3], [0, 3]])
