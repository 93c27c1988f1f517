import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from srmcomm import experiments as ex  # noqa: E402
from srmcomm.gp import load_gp  # noqa: E402
from srmcomm.motor import default_model  # noqa: E402
from srmcomm.ripple import assemble, solve  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def default_problem(model):
    return assemble(model, 150, 15, 1000.0, 1e-3)


@pytest.fixture(scope="session")
def default_solutions(default_problem):
    pos = solve(default_problem)
    return pos, solve(default_problem.with_target(-1.0))


@pytest.fixture(scope="session")
def synth_run(tmp_path_factory):
    """One default synthesis shared by every test that needs the fitted GP."""
    out = tmp_path_factory.mktemp("synth")
    t0 = time.perf_counter()
    ex.cmd_synth(ex.ExperimentConfig(), out)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def fitted_gp(synth_run):
    return load_gp(synth_run[0] / "gp_model.txt")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
