import numpy as np
import pytest

from dynsr.grid import build_grid
from dynsr.solver import PhysicalConstants

# criterion number -> list of (passed, test name, measured values)
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        detail = "; ".join(getattr(item, "measured", []))
        _CRITERIA.setdefault(marker.args[0], []).append((rep.passed, item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        verdict = "PASS" if all(ok for ok, _, _ in results) else "FAIL"
        details = " | ".join(f"{name}: {d}" if d else name for _, name, d in results)
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  ({details})")


@pytest.fixture
def measured(request):
    """Record measured values so the summary line shows them."""
    request.node.measured = []

    def record(text):
        request.node.measured.append(text)
        print(text)
    return record


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(16, 32)


@pytest.fixture(scope="session")
def consts():
    return PhysicalConstants()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
