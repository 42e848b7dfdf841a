import numpy as np
import pytest

from pnnunet import gradcore as gc


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar f() w.r.t. every element of arr (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def analytic_grad(build, tensors):
    with gc.Tape():
        loss = build()
    gc.backward(loss, tensors)
    return [t.grad for t in tensors]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
