import numpy as np
import pytest

from bifinfer import models
from bifinfer.continuation import TraceSettings


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture(scope="session")
def saddle():
    return models.saddle_node()


@pytest.fixture(scope="session")
def pitch():
    return models.pitchfork()


@pytest.fixture(scope="session")
def toggle():
    return models.toggle_switch()


def builtin_models():
    """(model, theta) pairs covering every built-in at a reference point."""
    return [
        (models.saddle_node(), np.array([2.5, -1.0])),
        (models.pitchfork(), np.array([0.5, -1.0])),
        (models.toggle_switch(), np.array(models.TOGGLE_REF)),
        (models.scaling_chain(3, 4), np.full(4, 0.5)),
        (models.degenerate_pair(), np.array([2.5, -1.0])),
        (models.linear(), np.zeros(0)),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


FAST = TraceSettings(step=0.05)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, line = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {line}")
