# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM sequence kernels.

Same contract as kernels._ref: time-major (T, B, 4H)/(T, B, H) arrays,
gate layout [input, forget, cell, output]. The time loop, the recurrent
matmul (via BLAS) and the gate arithmetic all run without the GIL.
"""

import numpy as np

from libc.math cimport exp, expf, tanh, tanhf
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline real _sigmoid(real x) noexcept nogil:
    if real is float:
        return <real>(1.0 / (1.0 + expf(-x)))
    else:
        return <real>(1.0 / (1.0 + exp(-x)))


cdef inline real _tanh(real x) noexcept nogil:
    if real is float:
        return tanhf(x)
    else:
        return tanh(x)


cdef inline void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                          real alpha, real* a, int lda, real* b, int ldb,
                          real beta, real* c, int ldc) noexcept nogil:
    # Row-major C(m,n) = alpha * op(A) @ op(B) + beta * C, expressed as the
    # column-major product C^T = op(B)^T @ op(A)^T.
    cdef char fa = b'T' if ta else b'N'
    cdef char fb = b'T' if tb else b'N'
    cdef int mm = n
    cdef int nn = m
    cdef int kk = k
    cdef int la = lda
    cdef int lb = ldb
    cdef int lc = ldc
    if real is float:
        sgemm(&fb, &fa, &mm, &nn, &kk, &alpha, b, &lb, a, &la, &beta, c, &lc)
    else:
        dgemm(&fb, &fa, &mm, &nn, &kk, &alpha, b, &lb, a, &la, &beta, c, &lc)


def lstm_seq_forward(real[:, :, ::1] xg, real[:, ::1] h0, real[:, ::1] c0,
                     real[:, ::1] w_h):
    cdef Py_ssize_t T = xg.shape[0]
    cdef Py_ssize_t B = xg.shape[1]
    cdef Py_ssize_t H4 = xg.shape[2]
    cdef Py_ssize_t H = H4 // 4
    dtype = np.float32 if real is float else np.float64
    h_arr = np.empty((T, B, H), dtype=dtype)
    c_arr = np.empty((T, B, H), dtype=dtype)
    g_arr = np.empty((T, B, H4), dtype=dtype)
    pre_arr = np.empty((B, H4), dtype=dtype)
    cdef real[:, :, ::1] h = h_arr
    cdef real[:, :, ::1] c = c_arr
    cdef real[:, :, ::1] gates = g_arr
    cdef real[:, ::1] pre = pre_arr
    cdef real* hp
    cdef real* cp
    cdef Py_ssize_t t, b, j
    cdef real gi, gf, gg, go, cprev, ct

    if T == 0 or B == 0:
        return h_arr, c_arr, g_arr
    with nogil:
        for t in range(T):
            hp = &h0[0, 0] if t == 0 else &h[t - 1, 0, 0]
            # pre = h_prev @ w_h
            _gemm_rm(0, 0, <int>B, <int>H4, <int>H, <real>1.0,
                     hp, <int>H, &w_h[0, 0], <int>H4, <real>0.0,
                     &pre[0, 0], <int>H4)
            cp = &c0[0, 0] if t == 0 else &c[t - 1, 0, 0]
            for b in range(B):
                for j in range(H):
                    gi = _sigmoid(pre[b, j] + xg[t, b, j])
                    gf = _sigmoid(pre[b, H + j] + xg[t, b, H + j])
                    gg = _tanh(pre[b, 2 * H + j] + xg[t, b, 2 * H + j])
                    go = _sigmoid(pre[b, 3 * H + j] + xg[t, b, 3 * H + j])
                    cprev = cp[b * H + j]
                    ct = gf * cprev + gi * gg
                    gates[t, b, j] = gi
                    gates[t, b, H + j] = gf
                    gates[t, b, 2 * H + j] = gg
                    gates[t, b, 3 * H + j] = go
                    c[t, b, j] = ct
                    h[t, b, j] = go * _tanh(ct)
    return h_arr, c_arr, g_arr


def lstm_seq_backward(real[:, :, ::1] gates, real[:, :, ::1] c,
                      real[:, :, ::1] h, real[:, ::1] h0, real[:, ::1] c0,
                      real[:, ::1] w_h, real[:, :, ::1] dh_out):
    cdef Py_ssize_t T = dh_out.shape[0]
    cdef Py_ssize_t B = dh_out.shape[1]
    cdef Py_ssize_t H = dh_out.shape[2]
    cdef Py_ssize_t H4 = 4 * H
    dtype = np.float32 if real is float else np.float64
    dxg_arr = np.empty((T, B, H4), dtype=dtype)
    dwh_arr = np.zeros((H, H4), dtype=dtype)
    dhn_arr = np.zeros((B, H), dtype=dtype)
    dcn_arr = np.zeros((B, H), dtype=dtype)
    cdef real[:, :, ::1] dxg = dxg_arr
    cdef real[:, ::1] dwh = dwh_arr
    cdef real[:, ::1] dhn = dhn_arr
    cdef real[:, ::1] dcn = dcn_arr
    cdef real* hp
    cdef real* cp
    cdef Py_ssize_t t, b, j
    cdef real gi, gf, gg, go, tc, dh, dc, ct, cprev

    if T == 0 or B == 0:
        return dxg_arr, dwh_arr, dhn_arr, dcn_arr
    with nogil:
        for t in range(T - 1, -1, -1):
            hp = &h0[0, 0] if t == 0 else &h[t - 1, 0, 0]
            cp = &c0[0, 0] if t == 0 else &c[t - 1, 0, 0]
            for b in range(B):
                for j in range(H):
                    gi = gates[t, b, j]
                    gf = gates[t, b, H + j]
                    gg = gates[t, b, 2 * H + j]
                    go = gates[t, b, 3 * H + j]
                    ct = c[t, b, j]
                    cprev = cp[b * H + j]
                    tc = _tanh(ct)
                    dh = dh_out[t, b, j] + dhn[b, j]
                    dc = dh * go * (<real>1.0 - tc * tc) + dcn[b, j]
                    dxg[t, b, j] = dc * gg * gi * (<real>1.0 - gi)
                    dxg[t, b, H + j] = dc * cprev * gf * (<real>1.0 - gf)
                    dxg[t, b, 2 * H + j] = dc * gi * (<real>1.0 - gg * gg)
                    dxg[t, b, 3 * H + j] = dh * tc * go * (<real>1.0 - go)
                    dcn[b, j] = dc * gf
            # dw_h += h_prev^T @ dgates
            _gemm_rm(1, 0, <int>H, <int>H4, <int>B, <real>1.0,
                     hp, <int>H, &dxg[t, 0, 0], <int>H4, <real>1.0,
                     &dwh[0, 0], <int>H4)
            # dh_prev = dgates @ w_h^T
            _gemm_rm(0, 1, <int>B, <int>H, <int>H4, <real>1.0,
                     &dxg[t, 0, 0], <int>H4, &w_h[0, 0], <int>H4, <real>0.0,
                     &dhn[0, 0], <int>H)
    return dxg_arr, dwh_arr, dhn_arr, dcn_arr
