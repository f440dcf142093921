import numpy as np
import pytest

from ranmtl.models import ArchitectureConfig
from ranmtl.scenario import PRESETS, build_datasets, with_overrides

ALL_TASKS = ("SC", "PS", "IN", "LOS")


@pytest.fixture(scope="session")
def desk_nodes():
    return build_datasets(PRESETS["desk"], 0)


@pytest.fixture(scope="session")
def tiny_nodes():
    """Twelve nodes of a few dozen samples each, for fast training tests."""
    return build_datasets(with_overrides(PRESETS["desk"], ues_per_snapshot=4), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_arch(kind: str, tasks=ALL_TASKS, width: int = 16, **kw) -> ArchitectureConfig:
    return ArchitectureConfig(kind, tuple(tasks), shared_width=width, **kw)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
