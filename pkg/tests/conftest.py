import copy

import numpy as np
import pytest

from thermoisaacs.problem import problem_from_dict

BASE = {
    "dims": {"n": 1, "m": 1},
    "thresholds": {"rho": [-0.5, 0.5], "eta": [-0.5, 0.5]},
    "lambda": 1.0,
    "controls": {"A": [-1, 0, 1], "B": [-1, 0, 1]},
    "cube": {"Qx": [[-1, 1]], "Qy": [[-1, 1]]},
    "dynamics": {"f": ["a*min(1, max(0, 4*(1 - a*x1)))"], "g": ["b*min(1, max(0, 4*(1 - b*y1)))"]},
    "cost": {"ell1": "(w+1)/2", "ell2": "0"},
    "grid": {"nx": [21], "ny": [21], "h": 0.05},
}


def make_dict(**changes):
    """Copy of a small saturated two-player problem with nested keys replaced.

    Keys use ``__`` for nesting, e.g. ``cost__ell1="1"``.
    """
    d = copy.deepcopy(BASE)
    for key, val in changes.items():
        parts = key.split("__")
        tgt = d
        for p in parts[:-1]:
            tgt = tgt.setdefault(p, {})
        tgt[parts[-1]] = val
    return d


def make_problem(**changes):
    return problem_from_dict(make_dict(**changes))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Verdict lines of the acceptance suite, repeated in the terminal summary so
# they are visible without ``-s``.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
