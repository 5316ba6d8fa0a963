import numpy as np
import pytest

from fedtype import _kernels


def finite_diff_grad(f, params, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. a flat parameter vector (mutated in place)."""
    g = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + h
        fp = f()
        params[i] = old - h
        fm = f()
        params[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numpy", "numba"])
def backend(request, monkeypatch):
    """Run a test once against each kernel implementation."""
    suffix = "_np" if request.param == "numpy" else "_nb"
    if suffix == "_nb" and not _kernels.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    for name in ("dense_forward", "dense_backward", "adam_update", "raps_label_scores", "raps_set_mask"):
        monkeypatch.setattr(_kernels, name, getattr(_kernels, name + suffix))
    return request.param
