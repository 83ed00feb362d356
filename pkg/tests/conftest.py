import numpy as np
import pytest

from fedmim import data, vit
from fedmim.fed import FedConfig

TINY_VIT = vit.ViTConfig(image_size=32, patch_size=8, enc_dim=16, enc_depth=2, enc_heads=2,
                         dec_dim=8, dec_depth=1, dec_heads=2)
FAST_FED = FedConfig(num_rounds=2, local_steps=2, batch_size=4, seed=0)


@pytest.fixture(scope="session")
def corpus():
    """The six tiny-scale datasets, generated once."""
    return [data.generate(s) for s in data.default_corpus("tiny", 0)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
