import numpy as np
import pytest

from midccnn.tensor import Tensor, backward, no_grad, set_debug
from midccnn.tensor import sum as tsum


@pytest.fixture(autouse=True)
def debug_mode():
    set_debug(True)
    yield
    set_debug(False)


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar f() w.r.t. every entry of arr (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        up = f()
        arr[i] = orig - h
        down = f()
        arr[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(fn, inputs, h=1e-5, weights=None):
    """Compare tape gradients of sum(w * fn(*inputs)) with central differences.

    Returns the worst relative error over every input entry.
    """
    rng = np.random.default_rng(123)
    out = fn(*inputs)
    w = Tensor(rng.standard_normal(out.shape) if weights is None else weights)
    for t in inputs:
        t.grad = None
    backward(tsum(out * w))

    def value():
        with no_grad():
            return float(np.sum(fn(*inputs).data * w.data))

    worst = 0.0
    for t in inputs:
        num = numeric_grad(value, t.data, h)
        worst = max(worst, max_rel_err(t.grad, num))
    return worst


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
