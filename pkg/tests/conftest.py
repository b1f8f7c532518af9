import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from risfusion.autodiff import set_default_dtype

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _float64_default():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record and assert one acceptance criterion; the verdicts are summarised at the end of the run."""
    def record(number: int, checks: dict[str, bool], detail: str = ""):
        failed = [name for name, ok in checks.items() if not ok]
        _ACCEPTANCE[number] = (not failed, detail if not failed else f"{detail} failed: {', '.join(failed)}")
        print(f"criterion {number}: {'PASS' if not failed else 'FAIL'} {_ACCEPTANCE[number][1]}")
        assert not failed, f"criterion {number}: {failed} ({detail})"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
