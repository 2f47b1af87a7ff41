import os

os.environ.setdefault("ELASTICDIT_CHECK_FINITE", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from elasticdit import numerics as nx  # noqa: E402
from elasticdit.checks import tiny_config  # noqa: E402
from elasticdit.model import ModelConfig, init_params  # noqa: E402

# criterion lines collected by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_config()


@pytest.fixture
def tiny_store(tiny_cfg):
    with nx.precision("float64"):
        return init_params(tiny_cfg, nx.Rng(0, stream=1), random_all=True)


@pytest.fixture
def rng():
    return nx.Rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def randn(rng: nx.Rng, *shape, dtype=np.float64) -> np.ndarray:
    return rng.normal(shape, 1.0, dtype=dtype)
