import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Three trained desk-scale runs (seeds 0, 1, 2), built lazily once."""
    from desk import desk_run

    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = desk_run(tmp_path_factory.mktemp(f"desk{seed}"), seed)
        return cache[seed]

    return get


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
