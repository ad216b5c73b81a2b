import numpy as np
import pytest

from crossutt import tensor_ops as ops
from crossutt.training import relative_error


def numeric_grad(f, x: np.ndarray, eps=1e-6, probe=None):
    """Central differences of ``f()`` w.r.t. ``x`` (perturbed in place).

    With ``probe`` the output differences are contracted with it after the
    subtraction, so untouched outputs cancel exactly.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = np.asarray(f())
        flat[i] = orig - eps
        down = np.asarray(f())
        flat[i] = orig
        diff = up - down
        gflat[i] = (diff if probe is None else (diff * probe).sum()) / (2 * eps)
    return g


def grad_errors(fn, *arrays, seed=0):
    """Max relative error per input between tape gradients of ``<fn(*ts), R>`` and FD."""
    rng = np.random.default_rng(seed)
    tensors = [ops.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ops.Tape() as tape:
        out = fn(*tensors)
    probe = rng.standard_normal(out.shape)
    tape.backward(out, seed=probe)
    errs = []
    for t in tensors:
        num = numeric_grad(lambda: fn(*[ops.Tensor(s.data) for s in tensors]).data, t.data,
                           probe=probe)
        errs.append(float(relative_error(t.grad, num).max()))
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
