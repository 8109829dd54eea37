from __future__ import annotations

import json

import numpy as np
import pytest

from alphafair.model import linear_network_spec, make_spec, matrix_rank, single_link_spec

ALPHAS = (0.5, 1.0, 2.0)


def mm1(alpha: float = 1.0):
    return single_link_spec([0.8], mu=[1.0], alpha=alpha)


def two_route(alpha: float = 1.0):
    return single_link_spec([0.4, 0.4], mu=[1.0, 1.0], alpha=alpha)


def skewed_two_route(alpha: float = 1.0):
    return single_link_spec([0.2, 0.3], mu=[1.0, 1.0], kappa=[1.0, 4.0], alpha=alpha)


def linear_three_route(alpha: float = 1.0):
    return linear_network_spec(2, nu=[0.2, 0.3, 0.25], mu=[1.0, 1.0, 1.0], alpha=alpha)


def battery(alpha: float):
    """Small underloaded networks shared by the drift and tail checks."""
    return {"mm1": mm1(alpha), "two_route": two_route(alpha), "skewed": skewed_two_route(alpha)}


def random_three_link(rng: np.random.Generator, alpha: float):
    while True:
        inc = (rng.random((3, 4)) < 0.5).astype(float)
        if inc.sum(axis=0).min() == 0 or matrix_rank(inc) < 3:
            continue
        cap = rng.uniform(0.5, 2.0, 3)
        mu = rng.uniform(0.5, 2.0, 4)
        rho = rng.uniform(0.1, 1.0, 4)
        rho *= 0.8 / (inc @ rho / cap).max()
        kappa = rng.uniform(0.5, 3.0, 4)
        return make_spec(inc, cap, kappa, alpha, rho * mu, mu)


def write_spec(path, spec):
    path.write_text(json.dumps(spec.to_dict()))
    return path


@pytest.fixture
def spec_file(tmp_path):
    def make(spec, name="spec.json"):
        return write_spec(tmp_path / name, spec)
    return make


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
