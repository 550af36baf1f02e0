import numpy as np
import pytest

from lobeseg.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def onehot_from_labels(labels: np.ndarray, n: int) -> np.ndarray:
    """(N, D, H, W) ints -> (N, n, D, H, W) float one-hot, built independently of the package."""
    return np.moveaxis(np.eye(n)[labels], -1, 1)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per criterion; printed in the terminal summary."""

    def record(key: str, passed: bool, detail: str) -> bool:
        line = f"{key} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE[key] = line
        with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(_ACCEPTANCE[key])
