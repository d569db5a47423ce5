import numpy as np
import pytest

import dualgrad as dg

# Small seeded instances shared across test modules; references are
# expensive, so they are computed once per session on first use.
_cache = {}


def small_instance(seed=0, gamma=False, m=6, n=3, omega=2):
    key = ("inst", m, n, omega, gamma, seed)
    if key not in _cache:
        problem = dg.generate(m, n, omega, gamma, seed)
        weights, consts = dg.compute_weights(problem)
        _cache[key] = (problem, weights, consts)
    return _cache[key]


def small_reference(seed=0, gamma=False, m=6, n=3, omega=2):
    key = ("ref", m, n, omega, gamma, seed)
    if key not in _cache:
        problem, weights, _ = small_instance(seed, gamma, m, n, omega)
        _cache[key] = dg.solve_reference(problem, weights=weights)
    return _cache[key]


@pytest.fixture
def scalar_problem():
    return dg.scalar_demo_problem()


@pytest.fixture
def scalar_weights(scalar_problem):
    weights, _ = dg.compute_weights(scalar_problem)
    return weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
