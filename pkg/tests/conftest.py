import numpy as np
import pytest

from swakv.engine import ModelShape, ToyModel
from swakv.mathops import make_rng


@pytest.fixture
def shape():
    return ModelShape(layers=2, heads=2, head_dim=8, vocab=64)


@pytest.fixture
def model(shape):
    return ToyModel(shape, seed=0)


@pytest.fixture
def prompt():
    return [int(t) for t in make_rng(7).integers(0, 64, 8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[str, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    _ACCEPTANCE[item.nodeid] = (marker.args[0], "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_ACCEPTANCE.values()):
        terminalreporter.write_line(f"{status} {label}" + (f" ({detail})" if detail else ""))
