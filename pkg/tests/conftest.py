import functools
import warnings

import numpy as np
import pytest

from tcshadow.dual_solver import dual_value, extract_deflator
from tcshadow.event_tree import random_market
from tcshadow.portfolio import LogUtility, PowerUtility
from tcshadow.primal_solver import solve_frictional

SUITE_SEEDS = tuple(range(10))
UTILITIES = {"log": LogUtility(), "power:0.5": PowerUtility(0.5)}

_CRITERIA: dict[int, tuple[bool, str]] = {}


def suite_market(seed: int):
    rng = np.random.default_rng(1000 + seed)
    horizon = 1 + seed % 3
    lam = float(rng.uniform(0.01, 0.05))
    return random_market(rng, horizon=horizon, max_branching=3, lam=lam)


@functools.lru_cache(maxsize=None)
def suite_case(seed: int, utility: str):
    """(market, utility, primal, extracted deflator, dual solution) for a suite tree."""
    market = suite_market(seed)
    u = UTILITIES[utility]
    primal = solve_frictional(market, u, 1.0)
    defl = extract_deflator(market, u, primal)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dual = dual_value(market, u, defl.y, yhat=defl.y)
    return market, u, primal, defl, dual


def suite_cases():
    return [(s, name) for s in SUITE_SEEDS for name in UTILITIES]


@pytest.fixture
def record_criterion():
    def _record(k: int, ok: bool, detail: str):
        _CRITERIA[k] = (bool(ok), detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
