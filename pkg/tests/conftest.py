import numpy as np
import pytest

from tailfuse.il_trainer import ILConfig, run_il
from tailfuse.latent_store import SynthConfig, partition_head_tail, synth_longtail

# criterion lines collected by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_manifest():
    return synth_longtail(SynthConfig(), 0)


@pytest.fixture(scope="session")
def default_partition(default_manifest):
    return partition_head_tail(default_manifest, threshold=100)


@pytest.fixture(scope="session")
def trained(default_manifest, default_partition):
    """IL checkpoint set for the default synthetic dataset and default config."""
    return run_il(ILConfig(), default_manifest, default_partition)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
