# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel core: im2col packing fused with BLAS sgemm, plus the
banded affinity product. Results match the numpy backend up to float32
summation-order differences."""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from scipy.linalg.cython_blas cimport sgemm

cnp.import_array()


cdef void _pack_cols(const float[:, :, :, ::1] xp, float[:, ::1] cols,
                     Py_ssize_t n, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W) noexcept nogil:
    # cols[(y*W+x), c*9 + dy*3 + dx] = xp[n, c, y+dy, x+dx]
    cdef Py_ssize_t c, y, x, dy, row, base
    for c in range(C):
        base = c * 9
        for y in range(H):
            for dy in range(3):
                row = y * W
                for x in range(W):
                    cols[row + x, base + dy * 3 + 0] = xp[n, c, y + dy, x + 0]
                    cols[row + x, base + dy * 3 + 1] = xp[n, c, y + dy, x + 1]
                    cols[row + x, base + dy * 3 + 2] = xp[n, c, y + dy, x + 2]


def conv3x3_forward(const float[:, :, :, ::1] xp,
                    const float[:, :, :, ::1] kernel,
                    const float[::1] bias):
    """Cross-correlate zero-padded xp (N,C,H+2,W+2) with kernel (K,C,3,3)."""
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t H = xp.shape[2] - 2, W = xp.shape[3] - 2
    cdef Py_ssize_t K = kernel.shape[0], HW = H * W, C9 = C * 9
    out_np = np.empty((N, K, H, W), dtype=np.float32)
    cols_np = np.empty((HW, C9), dtype=np.float32)
    kmat_np = np.ascontiguousarray(np.asarray(kernel).reshape(K, C9))
    cdef float[:, :, :, ::1] out = out_np
    cdef float[:, ::1] cols = cols_np
    cdef float[:, ::1] kmat = kmat_np
    cdef int m = <int> HW, nn = <int> K, kk = <int> C9
    cdef float alpha = 1.0, beta = 0.0
    cdef char tt = b'T', tn = b'N'
    cdef Py_ssize_t n, k, i
    cdef float b
    cdef float* optr
    for n in range(N):
        _pack_cols(xp, cols, n, C, H, W)
        # row-major out_n(K,HW) = kmat(K,C9) @ cols(HW,C9)^T, expressed in
        # column-major BLAS terms as out^T = cols @ kmat^T
        with nogil:
            sgemm(&tt, &tn, &m, &nn, &kk, &alpha,
                  &cols[0, 0], &kk, &kmat[0, 0], &kk, &beta,
                  &out[n, 0, 0, 0], &m)
        optr = &out[n, 0, 0, 0]
        for k in range(K):
            b = bias[k]
            for i in range(HW):
                optr[k * HW + i] += b
    return out_np


def conv3x3_kernel_grad(const float[:, :, :, ::1] xp,
                        const float[:, :, :, ::1] gout):
    """d(loss)/d(kernel): accumulates gout_n(K,HW) @ cols_n(HW,C9) over samples."""
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t H = xp.shape[2] - 2, W = xp.shape[3] - 2
    cdef Py_ssize_t K = gout.shape[1], HW = H * W, C9 = C * 9
    dk_np = np.zeros((K, C9), dtype=np.float32)
    cols_np = np.empty((HW, C9), dtype=np.float32)
    cdef float[:, ::1] dk = dk_np
    cdef float[:, ::1] cols = cols_np
    cdef int m = <int> C9, nn = <int> K, kk = <int> HW
    cdef float alpha = 1.0, beta = 1.0
    cdef char tn = b'N'
    cdef Py_ssize_t n
    for n in range(N):
        _pack_cols(xp, cols, n, C, H, W)
        # row-major dk(K,C9) += gout_n(K,HW) @ cols(HW,C9), column-major
        # dk^T(C9,K) += cols^T(C9,HW) @ gout_n^T(HW,K)
        with nogil:
            sgemm(&tn, &tn, &m, &nn, &kk, &alpha,
                  &cols[0, 0], &m, &gout[n, 0, 0, 0], &kk, &beta,
                  &dk[0, 0], &m)
    return dk_np.reshape(K, C, 3, 3)


def affinity_apply(const float[:, :, ::1] planes,
                   const int[:, ::1] offsets,
                   const float[:, ::1] s):
    """Banded symmetric matrix-vector product; see numpy_backend.affinity_apply."""
    cdef Py_ssize_t H = s.shape[0], W = s.shape[1], P = planes.shape[0]
    out_np = np.zeros((H, W), dtype=np.float32)
    cdef float[:, ::1] out = out_np
    cdef Py_ssize_t o, y, x, dy, dx, x0, x1
    cdef float wgt
    for o in range(P):
        dy = offsets[o, 0]
        dx = offsets[o, 1]
        if dx >= 0:
            x0, x1 = 0, W - dx
        else:
            x0, x1 = -dx, W
        for y in range(H - dy):
            for x in range(x0, x1):
                wgt = planes[o, y, x]
                out[y, x] += wgt * s[y + dy, x + dx]
                out[y + dy, x + dx] += wgt * s[y, x]
    return out_np
