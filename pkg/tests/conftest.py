import numpy as np
import pytest

from attrobf.model import ForkedClassifier
from attrobf.rng import Rng


def tiny_model(seed=0, dtype="float64", n_hidden=3, n_public=2):
    """A 16x16 forked classifier small enough for element-wise finite differences."""
    m = ForkedClassifier(trunk_widths=(2, 3, 4), public_width=3, hidden_units=5, public_units=4,
                         n_hidden_classes=n_hidden, n_public_classes=n_public, image_size=16, seed=seed,
                         dtype=dtype)
    m.initialize()
    # nonzero biases so ReLU and pooling see generic inputs
    rng = Rng(seed + 1000)
    for k, v in m.params_.items():
        if k.endswith(".bias"):
            v[...] = rng.normal(v.shape) * 0.1
    return m


def random_images(n, size=16, seed=0):
    return Rng(seed).random((n, 3, size, size))


@pytest.fixture
def tiny():
    return tiny_model()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
