import sys

import numpy as np
import pytest

from bisirl.envs import random_environment, random_game
from bisirl.game import MarkovGame


def chain_game(n_states: int, horizon: int, discount: float = 1.0) -> MarkovGame:
    """Deterministic chain s -> min(s + 1, S - 1) with one action per agent."""
    transition = np.zeros((n_states, 1, 1, n_states))
    for s in range(n_states):
        transition[s, 0, 0, min(s + 1, n_states - 1)] = 1.0
    initial = np.zeros(n_states)
    initial[0] = 1.0
    return MarkovGame(transition, horizon, discount, initial)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_game(rng):
    return random_game(3, 2, 2, 4, 0.9, rng)


@pytest.fixture
def small_env(rng):
    return random_environment(3, 2, 2, 4, 0.9, rng)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[criterion])
