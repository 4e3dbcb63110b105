import numpy as np
import pytest

from freg import tensor as tc


@pytest.fixture(autouse=True)
def _fresh_graph():
    tc.clear_graph()
    yield
    tc.clear_graph()


def finite_difference(f, tensors, h=1e-3):
    """Central finite differences of scalar f(*tensors) w.r.t. each tensor.

    Differences are accumulated in float64; the forward itself runs in the
    engine's float32. Returns one float64 array per input tensor.
    """
    grads = []
    for t in tensors:
        g = np.zeros(t.data.shape, np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with tc.no_grad():
                hi = float(f(*tensors).data)
            flat[i] = orig - h
            with tc.no_grad():
                lo = float(f(*tensors).data)
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(f, tensors, h=1e-3, rtol=1e-3):
    """Autodiff vs central finite differences at relative tolerance rtol."""
    tc.clear_graph()
    for t in tensors:
        t.grad = None
    loss = f(*tensors)
    tc.backward(loss)
    fd = finite_difference(f, tensors, h=h)
    for t, ref in zip(tensors, fd):
        got = np.asarray(t.grad, np.float64)
        denom = np.maximum(1.0, np.maximum(np.abs(ref), np.abs(got)))
        err = np.abs(got - ref) / denom
        assert err.max() <= rtol, f"gradcheck failed: max rel err {err.max():.2e}"
