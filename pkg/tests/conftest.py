import numpy as np
import pytest

from mno.autograd import Tensor


def numeric_grad(fn, arrays, h=1e-6):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(*a.shape):
            old = a[idx]
            a[idx] = old + h
            up = fn(*arrays)
            a[idx] = old - h
            down = fn(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build, arrays, tol=1e-6, h=1e-6):
    """Compare reverse-mode and finite-difference gradients of ``build``.

    ``build`` maps Tensors to a Tensor; the scalar objective is a fixed
    random projection of its output so every entry matters.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(123).normal(size=out.shape)
    (out * w).sum().backward()

    def value(*arrs):
        return float((build(*[Tensor(a) for a in arrs]).data * w).sum())

    expected = numeric_grad(value, arrays, h)
    for t, e in zip(tensors, expected):
        got = t.grad if t.grad is not None else np.zeros_like(e)
        err = np.abs(got - e) / np.maximum(np.maximum(np.abs(got), np.abs(e)), 1e-6)
        assert err.max() < tol, f"max rel err {err.max()}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
