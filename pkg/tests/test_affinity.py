import math

import numpy as np
import pytest

from freg import tensor as tc
from freg.affinity import AffinityMatrix, AffinityParams, apply_batch, build_affinity
from freg.tensor import Tensor


def dense_oracle(image, params):
    """O(n^2) reference: full symmetric matrix from the pairwise formula."""
    img = np.asarray(image, np.float64)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    n = h * w
    mat = np.zeros((n, n), np.float64)
    for i in range(n):
        yi, xi = divmod(i, w)
        for j in range(n):
            if i == j:
                continue
            yj, xj = divmod(j, w)
            d2 = (yi - yj) ** 2 + (xi - xj) ** 2
            if math.sqrt(d2) >= params.radius:
                continue
            f2 = float(((img[:, yi, xi] - img[:, yj, xj]) ** 2).sum())
            mat[i, j] = math.exp(-f2 / params.sigma_i ** 2) * math.exp(-d2 / params.sigma_x ** 2)
    return mat


def to_dense(m: AffinityMatrix) -> np.ndarray:
    n = m.n_pixels
    out = np.zeros((n, n), np.float64)
    for e in range(n):
        s = np.zeros(n, np.float32)
        s[e] = 1.0
        out[:, e] = m.apply(s)
    return out


def test_adjacent_pixels_constant_image():
    # equal values, distance 1: w = exp(0) * exp(-1/16)
    m = build_affinity(np.full((1, 3, 3), 0.4, np.float32), AffinityParams())
    idx = [tuple(o) for o in m.offsets.tolist()].index((0, 1))
    expect = math.exp(-1.0 / 16.0)
    assert abs(m.planes[idx, 0, 0] - expect) < 1e-6
    assert abs(expect - 0.9394) < 1e-4


def test_sigma_contrast_at_distance_three():
    # values differing by exactly sigma_i at spatial distance 3
    img = np.zeros((1, 1, 4), np.float32)
    img[0, 0, 3] = 0.075
    m = build_affinity(img, AffinityParams(radius=5.0))
    idx = [tuple(o) for o in m.offsets.tolist()].index((0, 3))
    expect = math.exp(-1.0) * math.exp(-9.0 / 16.0)
    assert abs(m.planes[idx, 0, 0] - expect) < 1e-6
    assert abs(expect - 0.2096) < 1e-4


def test_pairs_at_or_beyond_radius_absent():
    m = build_affinity(np.zeros((1, 8, 8), np.float32), AffinityParams(radius=3.0))
    d = np.sqrt((m.offsets.astype(np.float64) ** 2).sum(axis=1))
    assert d.max() < 3.0
    assert not any(tuple(o) == (3, 0) or tuple(o) == (0, 3) for o in m.offsets.tolist())


@pytest.mark.parametrize("shape,radius", [((8, 8), 3.0), ((10, 9), 5.0), ((12, 12), 19.0)])
def test_matches_dense_oracle(shape, radius):
    rng = np.random.default_rng(int(radius) + shape[0])
    img = rng.random((3, *shape), dtype=np.float64).astype(np.float32)
    params = AffinityParams(radius=radius)
    m = build_affinity(img, params)
    ref = dense_oracle(img, params)
    got = to_dense(m)
    # structural zeros (pairs at or beyond the radius) must match exactly;
    # in-radius weights may underflow float32 when the oracle value is
    # below ~1e-38, so the pattern comparison ignores that regime
    assert np.all(got[ref == 0.0] == 0.0)
    representable = ref > 1e-30
    assert np.all(got[representable] > 0.0)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_apply_zero_and_degree():
    rng = np.random.default_rng(1)
    img = rng.random((1, 6, 6), dtype=np.float64).astype(np.float32)
    m = build_affinity(img, AffinityParams())
    assert np.all(m.apply(np.zeros(36, np.float32)) == 0.0)
    np.testing.assert_array_equal(m.degree(), m.apply(np.ones(36, np.float32)))


def test_degree_center_exceeds_corner():
    m = build_affinity(np.full((3, 3), 0.5, np.float32), AffinityParams(radius=5.0))
    d = m.degree().reshape(3, 3)
    assert d[1, 1] > d[0, 0]


def test_apply_matches_dense_product():
    rng = np.random.default_rng(2)
    img = rng.random((3, 8, 8), dtype=np.float64).astype(np.float32)
    params = AffinityParams()
    m = build_affinity(img, params)
    ref = dense_oracle(img, params)
    s = rng.random(64).astype(np.float32)
    np.testing.assert_allclose(m.apply(s), ref @ s.astype(np.float64), rtol=1e-5, atol=1e-5)


def test_symmetry_inner_product():
    rng = np.random.default_rng(3)
    img = rng.random((1, 7, 7), dtype=np.float64).astype(np.float32)
    m = build_affinity(img, AffinityParams())
    for _ in range(5):
        a = rng.standard_normal(49).astype(np.float32)
        b = rng.standard_normal(49).astype(np.float32)
        lhs = float(np.dot(m.apply(a).astype(np.float64), b))
        rhs = float(np.dot(a, m.apply(b).astype(np.float64)))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


def test_contrast_monotonicity():
    params = AffinityParams()
    base = np.zeros((1, 1, 2), np.float32)
    prev = np.inf
    for delta in np.linspace(0.0, 1.0, 11):
        img = base.copy()
        img[0, 0, 1] = delta
        w = build_affinity(img, params).planes[0, 0, 0]
        assert w <= prev + 1e-9
        prev = w


def test_identical_params_identical_matrices():
    rng = np.random.default_rng(4)
    img = rng.random((3, 6, 6), dtype=np.float64).astype(np.float32)
    a = build_affinity(img, AffinityParams())
    b = build_affinity(img, AffinityParams())
    np.testing.assert_array_equal(a.planes, b.planes)
    np.testing.assert_array_equal(a.offsets, b.offsets)


def test_radius_larger_than_raster_clips():
    img = np.zeros((1, 4, 4), np.float32)
    m = build_affinity(img, AffinityParams(radius=19.0))
    assert np.all(np.abs(m.offsets[:, 0]) < 4)
    assert np.all(np.abs(m.offsets[:, 1]) < 4)
    ref = dense_oracle(img, AffinityParams(radius=19.0))
    np.testing.assert_allclose(to_dense(m), ref, atol=1e-6)


def test_weights_within_unit_interval():
    rng = np.random.default_rng(5)
    img = rng.random((3, 6, 6), dtype=np.float64).astype(np.float32)
    m = build_affinity(img, AffinityParams())
    assert m.planes.min() >= 0.0
    assert m.planes.max() <= 1.0


def test_empty_image_rejected():
    with pytest.raises(ValueError, match="empty"):
        build_affinity(np.zeros((1, 0, 4), np.float32), AffinityParams())


def test_vector_length_mismatch():
    m = build_affinity(np.zeros((4, 4), np.float32), AffinityParams())
    with pytest.raises(ValueError, match="length"):
        m.apply(np.zeros(15, np.float32))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.random((3, 5, 5), dtype=np.float64).astype(np.float32)
    m = build_affinity(img, AffinityParams())
    path = tmp_path / "w.freg"
    m.save(path)
    back = AffinityMatrix.load(path)
    np.testing.assert_array_equal(back.planes, m.planes)
    np.testing.assert_array_equal(back.offsets, m.offsets)
    assert (back.height, back.width) == (m.height, m.width)


def test_apply_batch_autodiff_is_linear_and_symmetric():
    rng = np.random.default_rng(7)
    img = rng.random((3, 6, 6), dtype=np.float64).astype(np.float32)
    m = build_affinity(img, AffinityParams())
    p = Tensor(rng.random((2, 1, 6, 6)), requires_grad=True)
    weights = rng.standard_normal((2, 1, 6, 6)).astype(np.float32)
    out = apply_batch([m, m], p)
    tc.backward(tc.tsum(out * weights))
    for i in range(2):
        expect = m.apply(weights[i, 0].reshape(-1)).reshape(6, 6)
        np.testing.assert_allclose(p.grad[i, 0], expect, rtol=1e-5, atol=1e-6)
