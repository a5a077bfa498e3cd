# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled block-sparse attention kernels.

Same contract as kernels/reference.py: per-entry score computation restricted
to each block's allowed pairs, two-pass streaming softmax per row across all
of a row's blocks, no n x n materialization. Scalar loops specialize for
float32/float64 via a fused type.
"""

import numpy as np

cimport cython
from libc.math cimport exp
from libc.stdint cimport int32_t, int64_t, uint8_t


ctypedef fused real:
    float
    double


def attention_forward(real[:, ::1] q, real[:, ::1] k, real[:, ::1] v,
                      plan, double scale):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t dh = q.shape[1]
    cdef Py_ssize_t dv = v.shape[1]

    cdef const int32_t[::1] rows_flat = plan.rows_flat
    cdef const int32_t[::1] cols_flat = plan.cols_flat
    cdef const uint8_t[::1] mask_flat = plan.mask_flat
    cdef const int64_t[::1] blk_rows_off = plan.blk_rows_off
    cdef const int64_t[::1] blk_cols_off = plan.blk_cols_off
    cdef const int64_t[::1] blk_mask_off = plan.blk_mask_off
    cdef const int64_t[::1] blk_tile_off = plan.blk_tile_off
    cdef Py_ssize_t nblk = blk_rows_off.shape[0] - 1

    if q.shape[0] != k.shape[0] or k.shape[0] != v.shape[0]:
        raise ValueError("q, k, v row counts disagree")

    dtype = np.float32 if real is float else np.float64
    m_arr = np.full(n, -np.inf, dtype=dtype)
    z_arr = np.zeros(n, dtype=dtype)
    o_arr = np.zeros((n, dv), dtype=dtype)
    s_arr = np.empty(plan.scratch_size, dtype=dtype)
    cdef real[::1] m = m_arr
    cdef real[::1] z = z_arr
    cdef real[:, ::1] o = o_arr
    cdef real[::1] scores = s_arr

    cdef Py_ssize_t b, r, c, d, nr, nc, row, col
    cdef int64_t r0, c0, t0, moff
    cdef real s, p, sc = <real> scale
    cdef int64_t macs = 0

    # pass 1: scores and row maxima
    for b in range(nblk):
        r0 = blk_rows_off[b]
        c0 = blk_cols_off[b]
        t0 = blk_tile_off[b]
        nr = blk_rows_off[b + 1] - r0
        nc = blk_cols_off[b + 1] - c0
        moff = blk_mask_off[b]
        for r in range(nr):
            row = rows_flat[r0 + r]
            for c in range(nc):
                if moff >= 0 and mask_flat[moff + r * nc + c] == 0:
                    continue
                col = cols_flat[c0 + c]
                s = 0
                for d in range(dh):
                    s += q[row, d] * k[col, d]
                s *= sc
                scores[t0 + r * nc + c] = s
                if s > m[row]:
                    m[row] = s
                macs += dh

    # pass 2: exponentials, denominators, weighted values
    for b in range(nblk):
        r0 = blk_rows_off[b]
        c0 = blk_cols_off[b]
        t0 = blk_tile_off[b]
        nr = blk_rows_off[b + 1] - r0
        nc = blk_cols_off[b + 1] - c0
        moff = blk_mask_off[b]
        for r in range(nr):
            row = rows_flat[r0 + r]
            for c in range(nc):
                if moff >= 0 and mask_flat[moff + r * nc + c] == 0:
                    continue
                col = cols_flat[c0 + c]
                p = <real> exp(scores[t0 + r * nc + c] - m[row])
                z[row] += p
                for d in range(dv):
                    o[row, d] += p * v[col, d]
                macs += dv

    for r in range(n):
        if z[r] > 0:
            for d in range(dv):
                o[r, d] /= z[r]

    return o_arr, m_arr, z_arr, macs


def attention_backward(real[:, ::1] q, real[:, ::1] k, real[:, ::1] v,
                       plan, double scale,
                       real[::1] m, real[::1] z,
                       real[:, ::1] out, real[:, ::1] d_out):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t dh = q.shape[1]
    cdef Py_ssize_t dv = v.shape[1]

    cdef const int32_t[::1] rows_flat = plan.rows_flat
    cdef const int32_t[::1] cols_flat = plan.cols_flat
    cdef const uint8_t[::1] mask_flat = plan.mask_flat
    cdef const int64_t[::1] blk_rows_off = plan.blk_rows_off
    cdef const int64_t[::1] blk_cols_off = plan.blk_cols_off
    cdef const int64_t[::1] blk_mask_off = plan.blk_mask_off
    cdef Py_ssize_t nblk = blk_rows_off.shape[0] - 1

    dtype = np.float32 if real is float else np.float64
    dq_arr = np.zeros((n, dh), dtype=dtype)
    dk_arr = np.zeros((n, dh), dtype=dtype)
    dv_arr = np.zeros((n, dv), dtype=dtype)
    delta_arr = np.zeros(n, dtype=dtype)
    cdef real[:, ::1] dq = dq_arr
    cdef real[:, ::1] dk = dk_arr
    cdef real[:, ::1] dvv = dv_arr
    cdef real[::1] delta = delta_arr

    cdef Py_ssize_t b, r, c, d, nr, nc, row, col
    cdef int64_t r0, c0, moff
    cdef real s, p, dp, ds, sc = <real> scale
    cdef int64_t macs = 0

    for r in range(n):
        s = 0
        for d in range(dv):
            s += d_out[r, d] * out[r, d]
        delta[r] = s

    for b in range(nblk):
        r0 = blk_rows_off[b]
        c0 = blk_cols_off[b]
        nr = blk_rows_off[b + 1] - r0
        nc = blk_cols_off[b + 1] - c0
        moff = blk_mask_off[b]
        for r in range(nr):
            row = rows_flat[r0 + r]
            for c in range(nc):
                if moff >= 0 and mask_flat[moff + r * nc + c] == 0:
                    continue
                col = cols_flat[c0 + c]
                s = 0
                for d in range(dh):
                    s += q[row, d] * k[col, d]
                s *= sc
                p = <real> exp(s - m[row]) / z[row]
                dp = 0
                for d in range(dv):
                    dvv[col, d] += p * d_out[row, d]
                    dp += d_out[row, d] * v[col, d]
                ds = p * (dp - delta[row]) * sc
                for d in range(dh):
                    dq[row, d] += ds * k[col, d]
                    dk[col, d] += ds * q[row, d]
                macs += 3 * dh + 2 * dv

    return dq_arr, dk_arr, dv_arr, macs
