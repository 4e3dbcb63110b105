"""Pure-numpy implementations of the hot kernels.

Fallback backend: the compiled extension in ``_compiled.pyx`` implements the
same functions with identical semantics. Both operate on float32 C-contiguous
arrays and are deterministic for a fixed BLAS thread count.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def conv3x3_forward(xp: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cross-correlate zero-padded ``xp`` (N,C,H+2,W+2) with ``kernel`` (K,C,3,3)."""
    n, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    k = kernel.shape[0]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))           # (N,C,H,W,3,3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    kmat = kernel.reshape(k, c * 9).T
    out = cols @ kmat                                            # (NHW,K)
    out = np.ascontiguousarray(out.reshape(n, h, w, k).transpose(0, 3, 1, 2))
    out += bias.reshape(1, k, 1, 1)
    return out


def conv3x3_kernel_grad(xp: np.ndarray, gout: np.ndarray) -> np.ndarray:
    """d(loss)/d(kernel) for the same correlation; gout is (N,K,H,W)."""
    n, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    k = gout.shape[1]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    gmat = gout.transpose(0, 2, 3, 1).reshape(n * h * w, k)      # (NHW,K)
    dk = gmat.T @ cols                                           # (K,C9)
    return np.ascontiguousarray(dk.reshape(k, c, 3, 3))


def affinity_apply(planes: np.ndarray, offsets: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Multiply the banded symmetric affinity matrix by image ``s`` (H,W).

    ``planes[o, y, x]`` holds the weight between pixel (y,x) and pixel
    (y+dy, x+dx) for canonical offset (dy, dx) = offsets[o]; each unordered
    pair is stored once, so every plane contributes in both directions.
    """
    h, w = s.shape
    out = np.zeros_like(s)
    for o in range(offsets.shape[0]):
        dy, dx = int(offsets[o, 0]), int(offsets[o, 1])
        ys, yt = slice(0, h - dy), slice(dy, h)
        if dx >= 0:
            xs, xt = slice(0, w - dx), slice(dx, w)
        else:
            xs, xt = slice(-dx, w), slice(0, w + dx)
        p = planes[o, ys, xs]
        out[ys, xs] += p * s[yt, xt]
        out[yt, xt] += p * s[ys, xs]
    return out
