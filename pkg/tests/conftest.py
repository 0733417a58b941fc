import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from ddpm_forensics.schedule import desk_schedule, make_linear_schedule  # noqa: E402


ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains desk-scale models (minutes)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def accept():
    """``accept(criterion, ok, detail)`` records one PASS/FAIL line and returns ``ok``."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return ok

    return record


@pytest.fixture(scope="session")
def sched200():
    return desk_schedule(200)


@pytest.fixture(scope="session")
def sched1000():
    return make_linear_schedule(1000)


@pytest.fixture(scope="session")
def small_sched():
    return make_linear_schedule(20, 1e-3, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def cache_dir():
    """Persistent zoo cache shared by the slow tests (override with DDPM_FORENSICS_CACHE)."""
    path = os.environ.get("DDPM_FORENSICS_CACHE") or os.path.join(os.path.dirname(__file__), "..", ".cache")
    os.makedirs(path, exist_ok=True)
    return os.path.abspath(path)
