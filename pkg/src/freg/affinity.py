"""Sparse pairwise affinity matrices over image pixels.

A matrix couples every ordered pixel pair closer than a cutoff radius with

    w_ij = exp(-|F(i)-F(j)|^2 / sigma_i^2) * exp(-|X(i)-X(j)|^2 / sigma_x^2)

where F is the pixel value (RGB vector or gray scalar) and X the pixel
coordinates. Self-pairs are excluded. Storage is one H x W weight plane per
canonical displacement (each unordered pair kept once), which keeps the
matrix-vector product cache-friendly and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import serialize
from .kernels import affinity_apply as _apply_kernel
from .tensor import Tensor, record_custom


@dataclass(frozen=True)
class AffinityParams:
    """Bandwidths and cutoff; defaults are the desk-scale working set
    (sigma_i and sigma_x as published, radius 19 at full 256 px scale)."""

    sigma_i: float = 0.075
    sigma_x: float = 4.0
    radius: float = 5.0

    def __post_init__(self):
        if self.sigma_i <= 0 or self.sigma_x <= 0 or self.radius <= 0:
            raise ValueError(f"affinity parameters must be positive: {self}")


@lru_cache(maxsize=8)
def _canonical_offsets(radius: float) -> np.ndarray:
    """Displacements (dy, dx) with 0 < dy^2+dx^2 < r^2, one per unordered pair:
    dy > 0, or dy == 0 and dx > 0."""
    rmax = int(np.ceil(radius))
    out = []
    for dy in range(0, rmax + 1):
        for dx in range(-rmax, rmax + 1):
            if dy == 0 and dx <= 0:
                continue
            if 0 < dy * dy + dx * dx < radius * radius:
                out.append((dy, dx))
    return np.array(out, dtype=np.int32).reshape(-1, 2)


class AffinityMatrix:
    """Symmetric banded pixel-affinity matrix for one image raster."""

    def __init__(self, height: int, width: int, offsets: np.ndarray,
                 planes: np.ndarray, params: AffinityParams):
        self.height = height
        self.width = width
        self.offsets = offsets
        self.planes = planes
        self.params = params
        self._degree: np.ndarray | None = None

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def apply(self, s: np.ndarray) -> np.ndarray:
        """W @ s for a flat vector of length n_pixels."""
        v = np.asarray(s, dtype=np.float32)
        if v.size != self.n_pixels:
            raise ValueError(f"vector length {v.size} != {self.n_pixels} pixels")
        out = _apply_kernel(self.planes, self.offsets,
                            np.ascontiguousarray(v.reshape(self.height, self.width)))
        return out.reshape(-1)

    def degree(self) -> np.ndarray:
        """d = W @ 1, cached."""
        if self._degree is None:
            self._degree = self.apply(np.ones(self.n_pixels, np.float32))
        return self._degree

    def weight_sum(self) -> float:
        """Sum of all ordered-pair weights (each stored pair counts twice)."""
        return float(2.0 * self.planes.sum(dtype=np.float64))

    def save(self, path) -> None:
        """Debug dump in the chunked binary tensor format."""
        serialize.write_tensors(path, {
            "shape": np.array([self.height, self.width], np.float32),
            "params": np.array([self.params.sigma_i, self.params.sigma_x,
                                self.params.radius], np.float32),
            "offsets": self.offsets.astype(np.float32),
            "planes": self.planes,
        })

    @classmethod
    def load(cls, path) -> "AffinityMatrix":
        t = serialize.read_tensors(path)
        h, w = (int(v) for v in t["shape"])
        params = AffinityParams(*(float(v) for v in t["params"]))
        return cls(h, w, t["offsets"].astype(np.int32), t["planes"], params)


def build_affinity(image: np.ndarray, params: AffinityParams) -> AffinityMatrix:
    """Construct the matrix from a (C, H, W) or (H, W) image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (H,W) or (1|3,H,W) image, got {image.shape}")
    _, h, w = img.shape
    if h == 0 or w == 0:
        raise ValueError("empty image")

    offsets = _canonical_offsets(params.radius)
    # displacements larger than the raster contribute nothing
    keep = (np.abs(offsets[:, 0]) < h) & (np.abs(offsets[:, 1]) < w)
    offsets = np.ascontiguousarray(offsets[keep])

    inv_i = 1.0 / (params.sigma_i ** 2)
    inv_x = 1.0 / (params.sigma_x ** 2)
    planes = np.zeros((offsets.shape[0], h, w), np.float32)
    for o, (dy, dx) in enumerate(offsets):
        ys, yt = slice(0, h - dy), slice(dy, h)
        if dx >= 0:
            xs, xt = slice(0, w - dx), slice(dx, w)
        else:
            xs, xt = slice(-dx, w), slice(0, w + dx)
        diff = img[:, ys, xs] - img[:, yt, xt]
        d2 = np.einsum("chw,chw->hw", diff, diff)
        spatial = np.exp(-(float(dy * dy + dx * dx)) * inv_x)
        planes[o, ys, xs] = (np.exp(-d2 * inv_i) * spatial).astype(np.float32)
    return AffinityMatrix(h, w, offsets, planes, params)


def apply_batch(matrices, p: Tensor) -> Tensor:
    """Differentiable per-sample W @ p for p of shape (N, 1, H, W).

    The product is linear and W symmetric, so the backward pass is the same
    kernel applied to the incoming gradient.
    """
    mats = list(matrices)
    n = p.data.shape[0]
    if len(mats) != n:
        raise ValueError(f"{len(mats)} matrices for batch of {n}")
    h, w = p.data.shape[2], p.data.shape[3]
    for m in mats:
        if (m.height, m.width) != (h, w):
            raise ValueError(f"raster mismatch: matrix {m.height}x{m.width}, tensor {h}x{w}")

    def product(arr):
        out = np.empty_like(arr)
        for i, m in enumerate(mats):
            out[i, 0] = _apply_kernel(m.planes, m.offsets, np.ascontiguousarray(arr[i, 0]))
        return out

    return record_custom(product(p.data), (p,), lambda g: (product(np.ascontiguousarray(g)),))
