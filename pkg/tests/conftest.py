import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adabn import benchmark  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def affine_bench():
    """Trained source model plus shifted target on the default benchmark (shared, read-only)."""
    return benchmark.prepare()


_acceptance_key = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one acceptance-criterion line, shown in the terminal summary."""
    lines = request.config.stash.setdefault(_acceptance_key, [])

    def record(number: int, title: str, passed: bool, detail: str, elapsed: float, budget: float) -> None:
        within = elapsed <= budget
        status = "PASS" if passed and within else "FAIL"
        line = f"[{status}] criterion {number:>2}: {title} | {detail} | {elapsed:.2f}s (limit {budget:g}s)"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
