import logging

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

CRITERIA = {
    1: "lifetime recovery within 0.05 ns for three solvents",
    2: "reduced chi-square in [0.90, 1.10]",
    3: "uncertainty scaling exponent",
    4: "photon budget at N=200",
    5: "minimum-lifetime bias knee",
    6: "convolution vs closed-form EMG",
    7: "detector and counting invariants",
    8: "objective gradient vs finite differences",
    9: "byte-identical CLI outputs",
}

_results = {}


def record_criterion(number, passed, detail):
    """Store the outcome of an acceptance check; several calls AND together."""
    prev = _results.get(number)
    if prev is not None:
        passed = passed and prev[0]
        detail = f"{prev[1]}; {detail}"
    _results[number] = (bool(passed), detail)


@pytest.fixture
def criterion():
    def check(number, passed, detail):
        record_criterion(number, passed, detail)
        assert passed, f"criterion {number}: {detail}"

    return check


@pytest.fixture(autouse=True)
def _quiet_fit_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="tcspc")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} [NOT RUN] {title}")
