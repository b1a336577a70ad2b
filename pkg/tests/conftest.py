import numpy as np
import pytest

from klflow import autodiff as ad
from klflow.autodiff import Tape, Tensor


def finite_difference(f, x0, h=1e-5):
    """Central finite differences of a scalar function of a flat array."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0.ravel())
    flat = x0.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * h)
    return grad.reshape(x0.shape)


def grad_of(f, x0):
    """Reverse-mode gradient of scalar f built from autodiff ops."""
    x = Tensor(np.asarray(x0, dtype=float), requires_grad=True)
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    return out.data, (np.zeros_like(x.data) if x.grad is None else x.grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
