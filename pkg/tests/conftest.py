import numpy as np
import pytest

from infodeficit.model import ModelParams


@pytest.fixture
def tiny_params():
    """All dims 2, small vocab; heads initialised nonzero."""
    return ModelParams.init(vocab_size=8, embed_dim=2, char_embed_dim=2, hidden_dim=2,
                            seed=3, scale=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from harness import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
