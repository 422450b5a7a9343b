# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP kernels.

Drop-in replacement for ``diffac._kernels_py``. Matrix products go through
BLAS ``dgemm`` (row-major buffers handed over as transposed column-major
views); bias, activation and their derivatives are fused C loops.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

RELU = 0
TANH = 1


cdef inline void _gemm(char ta, char tb, int m, int n, int k,
                       double *a, int lda, double *b, int ldb,
                       double beta, double *c, int ldc) noexcept nogil:
    cdef double alpha = 1.0
    dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def mlp_forward(double[::1] params, long[:, ::1] layout, int act, x):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] h = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] z
    cdef Py_ssize_t n_layers = layout.shape[0]
    cdef Py_ssize_t li, i, j
    cdef int n_in, n_out, batch = <int>h.shape[0]
    cdef long w_off, b_off
    cdef double *zp
    cdef double *pp = &params[0]
    hs = [h]
    for li in range(n_layers):
        n_in = <int>layout[li, 0]
        n_out = <int>layout[li, 1]
        w_off = layout[li, 2]
        b_off = layout[li, 3]
        if h.shape[1] != n_in:
            raise ValueError(f"layer {li}: expected {n_in} inputs, got {h.shape[1]}")
        z = np.empty((batch, n_out), dtype=np.float64)
        if batch == 0:
            if li < n_layers - 1:
                hs.append(z)
            h = z
            continue
        zp = &z[0, 0]
        with nogil:
            _gemm(b'T', b'N', n_out, batch, n_in, pp + w_off, n_in,
                  &h[0, 0], n_in, 0.0, zp, n_out)
            if li < n_layers - 1:
                if act == 0:
                    for i in range(batch):
                        for j in range(n_out):
                            zp[i * n_out + j] += pp[b_off + j]
                            if zp[i * n_out + j] < 0.0:
                                zp[i * n_out + j] = 0.0
                else:
                    for i in range(batch):
                        for j in range(n_out):
                            zp[i * n_out + j] += pp[b_off + j]
            else:
                for i in range(batch):
                    for j in range(n_out):
                        zp[i * n_out + j] += pp[b_off + j]
        if li < n_layers - 1:
            if act != 0:
                # numpy's vectorized tanh beats a scalar libm loop
                np.tanh(z, out=z)
            hs.append(z)
        h = z
    return h, hs


def mlp_backward(double[::1] params, long[:, ::1] layout, int act, list hs, dy):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dparams = np.zeros(params.shape[0], dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] g = np.ascontiguousarray(dy, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] h_in
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] g_next
    cdef Py_ssize_t n_layers = layout.shape[0]
    cdef Py_ssize_t li, i, j
    cdef int n_in, n_out, batch = <int>g.shape[0]
    cdef long w_off, b_off
    cdef double *pp = &params[0]
    cdef double *dp = &dparams[0]
    cdef double *gp
    cdef double *hp
    cdef double *gn
    cdef double hv
    for li in range(n_layers - 1, -1, -1):
        n_in = <int>layout[li, 0]
        n_out = <int>layout[li, 1]
        w_off = layout[li, 2]
        b_off = layout[li, 3]
        h_in = hs[li]
        g_next = np.empty((batch, n_in), dtype=np.float64)
        if batch == 0:
            g = g_next
            continue
        gp = &g[0, 0]
        hp = &h_in[0, 0]
        gn = &g_next[0, 0]
        with nogil:
            _gemm(b'N', b'T', n_in, n_out, batch, hp, n_in, gp, n_out,
                  0.0, dp + w_off, n_in)
            for i in range(batch):
                for j in range(n_out):
                    dp[b_off + j] += gp[i * n_out + j]
            _gemm(b'N', b'N', n_in, batch, n_out, pp + w_off, n_in, gp, n_out,
                  0.0, gn, n_in)
            if li > 0:
                if act == 0:
                    for i in range(batch):
                        for j in range(n_in):
                            if hp[i * n_in + j] <= 0.0:
                                gn[i * n_in + j] = 0.0
                else:
                    for i in range(batch):
                        for j in range(n_in):
                            hv = hp[i * n_in + j]
                            gn[i * n_in + j] *= 1.0 - hv * hv
        g = g_next
    return dparams, g
