import numpy as np
import pytest

from slatebias.core import RngHandle, build_catalog, partition_users
from slatebias.models import random_nests
from slatebias.oracle import sample_population

# Collected acceptance-criterion verdicts, printed in the terminal summary
# so that every pass/fail line is visible even for passing tests.
CRITERION_RESULTS: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, description: str, ok: bool, detail: str = "") -> None:
    CRITERION_RESULTS.append((number, description, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, ok, detail in sorted(CRITERION_RESULTS):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} [{status}] {description}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_world():
    """A small catalog/split/population/nests fixture shared by fast tests."""
    rng = RngHandle(11)
    catalog = build_catalog(12, 6, 2, rng.child(0))
    split = partition_users(6, 0.5, rng.child(1))
    pop = sample_population(6, 12, 3, rng.child(2))
    nests = random_nests(12, 3, rng.child(3))
    return catalog, split, pop, nests


@pytest.fixture(scope="session")
def desk_world():
    """Default-sized catalog/split/population/nests (no training)."""
    rng = RngHandle(7)
    catalog = build_catalog(100, 50, 5, rng.child(0))
    split = partition_users(300, 1.0 / 3.0, rng.child(1))
    pop = sample_population(300, 100, 8, rng.child(2))
    nests = random_nests(100, 10, rng.child(3))
    return catalog, split, pop, nests


@pytest.fixture()
def gen():
    return np.random.default_rng(123)
