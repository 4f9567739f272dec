import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("flowvar", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("flowvar")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pd(rng, d, lo=0.2, hi=3.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return Q @ np.diag(rng.uniform(lo, hi, d)) @ Q.T


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """``record(k, passed, detail)`` stores one summary line per acceptance criterion."""
    def record(k: int, passed: bool, detail: str):
        _ACCEPTANCE[k] = f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[k])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
