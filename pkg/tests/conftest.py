import logging
import warnings

import numpy as np
import pytest
from hypothesis import settings

from dercoord.conic import SolverSettings

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")

TIGHT = SolverSettings(eps_abs=1e-9, eps_rel=1e-9, max_iters=200_000)


@pytest.fixture
def tight():
    return TIGHT


@pytest.fixture(autouse=True)
def _quiet():
    logging.getLogger("dercoord").setLevel(logging.ERROR)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        yield


def rng(seed=0):
    return np.random.default_rng(seed)


# acceptance lines, echoed again at the end of the session
ACCEPTANCE: list = []


@pytest.fixture
def report(request):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
