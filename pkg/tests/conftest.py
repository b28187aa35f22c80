from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import settings

from hmoe.harness.train import RunConfig
from hmoe.routing import Strategy

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []

SEEDS = (0, 1, 2, 3, 4)


def default_run(strategy: Strategy, **overrides) -> RunConfig:
    """Default-budget run config for ``strategy``; overrides use ``a__b`` for ``a.b``."""
    run = RunConfig()
    run.model.moe.strategy = strategy
    return run.copy(**overrides)


@pytest.fixture(scope="session")
def run_cache() -> Path:
    """Trained-run cache shared across test modules (and sessions)."""
    default = Path(__file__).resolve().parents[1] / ".cache" / "runs"
    return Path(os.environ.get("HMOE_CACHE_DIR", default))


@pytest.fixture
def report_line():
    def emit(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
