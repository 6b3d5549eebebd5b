import numpy as np
import pytest
from hypothesis import settings

from latentbnn import engine
from latentbnn.config import load_config
from latentbnn.data import load_digits

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

DIGITS_OVERRIDES = ["model.input_shape=1,8,8", "batch_size=32", "augment.pad=1", "data.kind=digits"]

# one-line verdicts collected by the acceptance module
VERDICTS = {}


def digits_config(*overrides):
    return load_config(None, DIGITS_OVERRIDES + list(overrides))


@pytest.fixture(scope="session")
def digits():
    return load_digits("train"), load_digits("test")


@pytest.fixture(scope="session")
def small_trained(digits):
    """A tiny label_aware model trained for two epochs on digits."""
    cfg = digits_config("epochs=2", "model.stage_widths=8,16", "model.blocks_per_stage=1", "projection=true")
    return engine.train(cfg, *digits)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])
