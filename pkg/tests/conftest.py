import logging

import numpy as np
import pytest

from cornerspace.model import ModelParams


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("cornerspace").setLevel(logging.ERROR)
    yield


@pytest.fixture
def hardcore():
    return ModelParams.hard_core(5.0, 1.0, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_hermitian(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return 0.5 * (a + a.conj().T)


def random_density(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    r = a @ a.conj().T
    return r / np.trace(r).real


ACCEPTANCE_LINES = {}


def acceptance_report(number: int, ok: bool, detail: str) -> None:
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
