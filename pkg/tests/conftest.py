import numpy as np
import pytest

from gradleak.gradmatch import GradTarget, ImageShape
from gradleak.harness.data import SyntheticParams, gen_synthetic
from gradleak.smallnet import NetSpec, Sample, init_weights, train_sgd
from gradleak.tensorcore import SeededRng


@pytest.fixture(scope="session")
def blobs():
    return gen_synthetic(SyntheticParams(count=40), SeededRng(11))


@pytest.fixture(scope="session")
def default_net(blobs):
    """64-32-4 tanh net, a couple of epochs on synthetic blobs."""
    return train_sgd(NetSpec((64, 32, 4)), blobs, 2, 0.05, SeededRng(5))


@pytest.fixture(scope="session")
def linear_net():
    """Softmax regression on 8x8 inputs (one weight layer)."""
    return init_weights(NetSpec((64, 4)), SeededRng(3))


@pytest.fixture
def shape8():
    return ImageShape(8, 8)


def make_sample(seed, d=64, n_classes=4):
    rng = SeededRng(seed)
    return Sample(rng.uniform(size=d), int(rng.integers(0, n_classes)))


def target_of(w, s):
    return GradTarget.from_sample(w, s)


# acceptance criteria report one line each; collected here and printed at the end
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
