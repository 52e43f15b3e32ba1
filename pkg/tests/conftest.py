import numpy as np
import pytest

from egnn.numerics import backward, default_dtype, reset_tape


@pytest.fixture
def f64():
    """Run the test body with 64-bit tensors."""
    with default_dtype("float64"):
        yield


def central_diff(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every array (modified in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = fn()
            flat[k] = orig - h
            down = fn()
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(build, tensors):
    """Run ``build()`` (returns a scalar Tensor) on a fresh tape and backprop."""
    for t in tensors:
        t.grad = None
    reset_tape()
    backward(build())
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]


def assert_grads_close(build, tensors, rtol=1e-3, atol=1e-6, h=1e-5):
    got = analytic_grads(build, tensors)

    def value():
        reset_tape()
        return float(build().data)

    want = central_diff(value, [t.data for t in tensors], h=h)
    for t, g, w in zip(tensors, got, want):
        np.testing.assert_allclose(g, w, rtol=rtol, atol=atol, err_msg=t.name or "")


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """``record(number, passed, detail)``: store one criterion verdict for the summary."""
    def record(number: int, passed: bool, detail: str) -> None:
        request.config.stash.setdefault(ACCEPTANCE_KEY, {})[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
