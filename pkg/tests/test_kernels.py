"""Compiled kernels against the numpy fallback on random instances."""

import numpy as np
import pytest

from freg.kernels import BACKEND_NAME, numpy_backend

compiled = pytest.importorskip("freg.kernels._compiled",
                               reason="compiled kernel core not built")


def test_compiled_backend_selected_by_default():
    assert BACKEND_NAME == "compiled"


@pytest.mark.parametrize("n,c,k,h,w", [(1, 1, 1, 4, 4), (2, 3, 5, 8, 6),
                                       (8, 16, 32, 16, 16), (3, 7, 2, 5, 9)])
def test_conv_forward_parity(n, c, k, h, w):
    rng = np.random.default_rng(c * k)
    xp = rng.standard_normal((n, c, h + 2, w + 2)).astype(np.float32)
    kern = rng.standard_normal((k, c, 3, 3)).astype(np.float32)
    bias = rng.standard_normal(k).astype(np.float32)
    a = compiled.conv3x3_forward(xp, kern, bias)
    b = numpy_backend.conv3x3_forward(xp, kern, bias)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("n,c,k,h,w", [(2, 3, 5, 8, 6), (8, 16, 32, 16, 16)])
def test_conv_kernel_grad_parity(n, c, k, h, w):
    rng = np.random.default_rng(n * h)
    xp = rng.standard_normal((n, c, h + 2, w + 2)).astype(np.float32)
    gout = rng.standard_normal((n, k, h, w)).astype(np.float32)
    a = compiled.conv3x3_kernel_grad(xp, gout)
    b = numpy_backend.conv3x3_kernel_grad(xp, gout)
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)


def test_affinity_apply_parity():
    from freg.affinity import AffinityParams, build_affinity
    rng = np.random.default_rng(5)
    img = rng.random((3, 12, 12), dtype=np.float64).astype(np.float32)
    m = build_affinity(img, AffinityParams(radius=4.0))
    s = rng.standard_normal((12, 12)).astype(np.float32)
    a = compiled.affinity_apply(m.planes, m.offsets, s)
    b = numpy_backend.affinity_apply(m.planes, m.offsets, s)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


def test_affinity_apply_empty_offsets():
    planes = np.zeros((0, 4, 4), np.float32)
    offsets = np.zeros((0, 2), np.int32)
    s = np.ones((4, 4), np.float32)
    assert np.all(compiled.affinity_apply(planes, offsets, s) == 0.0)
    assert np.all(numpy_backend.affinity_apply(planes, offsets, s) == 0.0)


def test_conv_forward_deterministic():
    rng = np.random.default_rng(6)
    xp = rng.standard_normal((4, 8, 18, 18)).astype(np.float32)
    kern = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    bias = rng.standard_normal(16).astype(np.float32)
    a = compiled.conv3x3_forward(xp, kern, bias)
    b = compiled.conv3x3_forward(xp, kern, bias)
    assert a.tobytes() == b.tobytes()
