import numpy as np
import pytest

from rareflow.flow import make_flow

ACCEPTANCE_LINES = {}


def record(criterion, ok, detail):
    """Register (and print) the pass/fail line of one acceptance criterion."""
    line = f"CRITERION {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def random_flow(dim, n_layers=4, hidden=(16, 16), seed=0, spread=0.3):
    """Flow with every parameter redrawn so no coupling is the identity."""
    flow = make_flow(dim, n_layers, hidden, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for p in flow.parameters():
        p[...] = rng.normal(0.0, spread, p.shape)
    return flow


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
