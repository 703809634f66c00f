import numpy as np
import pytest

from nnwm.core import Conv2D, Dense, Model, ReLU, AvgPool, SoftmaxOutput


def small_net(seed=0, input_shape=(4, 4, 2), classes=3, filters=3):
    layers = [
        Conv2D("conv1", 3, input_shape[2], filters), ReLU("relu1"),
        Conv2D("conv2", 3, filters, filters), ReLU("relu2"), AvgPool("pool", 2),
        Dense("fc", (input_shape[0] // 2) * (input_shape[1] // 2) * filters, classes), SoftmaxOutput("out"),
    ]
    m = Model(layers, input_shape, "conv2")
    m.init(seed)
    # nonzero biases so their gradients are exercised too
    rng = np.random.default_rng(seed + 1)
    for layer in m.layers:
        if "b" in layer.params:
            layer.params["b"] = 0.1 * rng.standard_normal(layer.params["b"].shape)
    return m


@pytest.fixture
def net():
    return small_net()


@pytest.fixture
def batch():
    rng = np.random.default_rng(7)
    return rng.standard_normal((5, 4, 4, 2)), rng.integers(0, 3, size=5)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
