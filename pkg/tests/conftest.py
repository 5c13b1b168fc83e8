import numpy as np
import pytest

from adapformer import numkit as nk
from adapformer.encoder import ModelConfig


@pytest.fixture(autouse=True)
def _reset_mode():
    nk.set_training(True)
    yield
    nk.set_training(True)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(lookback=8, horizon=4, n_channels=4, d_model=8, rank=2, topk=2,
                       n_heads=2, n_layers=1, d_ff=16, dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
