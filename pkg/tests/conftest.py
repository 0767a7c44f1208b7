import numpy as np
import pytest

from sdc_concepts import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    impl = kernels.backends()[request.param]
    for name in ("column_dots", "lasso_cd", "perplexity_search"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion and assert it."""

    def record(criterion, ok, detail):
        _ACCEPTANCE.append((criterion, bool(ok), detail))
        assert ok, f"criterion {criterion} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
