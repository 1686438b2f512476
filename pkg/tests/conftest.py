import numpy as np
import pytest

FD_EPS = 1e-5


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def central_difference(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = f()
        flat[i] = orig - eps
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    assert analytic.shape == numeric.shape
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    worst = np.abs(analytic - numeric) - bound
    assert np.all(worst <= 0), f"max excess {worst.max():.3e}"


@pytest.fixture
def numgrad():
    return central_difference


@pytest.fixture
def grad_close():
    return assert_grad_close
