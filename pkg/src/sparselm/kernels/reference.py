"""Pure-numpy block-sparse attention kernels.

Fallback used when the compiled extension is unavailable (and the baseline it
is benchmarked against). Semantics are identical: scores exist only for the
covered entries of each block, softmax normalization spans all covered entries
of a row across its blocks (max pass, then exp-sum/weight pass), and the full
n x n matrix is never materialized. Masked-off entries of a tile are never
computed: dense tiles go through BLAS, partial tiles through gathered
per-entry dot products.

Row and column ids are distinct within any one block, so plain fancy-indexed
accumulation is safe there; the gathered (COO) paths can repeat ids and use
``np.add.at``.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _block_view(plan, k):
    rows = plan.rows_flat[plan.blk_rows_off[k] : plan.blk_rows_off[k + 1]]
    cols = plan.cols_flat[plan.blk_cols_off[k] : plan.blk_cols_off[k + 1]]
    moff = plan.blk_mask_off[k]
    if moff < 0:
        return rows, cols, None, None
    mask = plan.mask_flat[moff : moff + rows.size * cols.size]
    mask = mask.reshape(rows.size, cols.size)
    ri, ci = np.nonzero(mask)
    return rows, cols, ri, ci


def attention_forward(q, k, v, plan, scale):
    """Two-pass streaming softmax-attention over the plan's blocks.

    Returns (out, row_max, row_denom, macs). ``macs`` counts one
    multiply-accumulate per computed score or output element per feature
    dimension: (dh + dv) * covered_pairs for the two matmuls.
    """
    n, dh = q.shape
    dv = v.shape[1]
    nblk = plan.blk_rows_off.size - 1
    m = np.full(n, -np.inf, dtype=q.dtype)
    z = np.zeros(n, dtype=q.dtype)
    out = np.zeros((n, dv), dtype=q.dtype)
    scores = np.empty(plan.scratch_size, dtype=q.dtype)

    for b in range(nblk):
        rows, cols, ri, ci = _block_view(plan, b)
        t0 = plan.blk_tile_off[b]
        if ri is None:
            tile = (q[rows] @ k[cols].T) * scale
            scores[t0 : t0 + tile.size] = tile.ravel()
            m[rows] = np.maximum(m[rows], tile.max(axis=1))
        else:
            vals = np.einsum("ij,ij->i", q[rows[ri]], k[cols[ci]]) * scale
            scores[t0 : t0 + vals.size] = vals
            np.maximum.at(m, rows[ri], vals)

    for b in range(nblk):
        rows, cols, ri, ci = _block_view(plan, b)
        t0 = plan.blk_tile_off[b]
        if ri is None:
            tile = scores[t0 : t0 + rows.size * cols.size].reshape(
                rows.size, cols.size
            )
            p = np.exp(tile - m[rows][:, None])
            z[rows] += p.sum(axis=1)
            out[rows] += p @ v[cols]
        else:
            vals = scores[t0 : t0 + ri.size]
            p = np.exp(vals - m[rows[ri]])
            np.add.at(z, rows[ri], p)
            np.add.at(out, rows[ri], p[:, None] * v[cols[ci]])

    covered = z > 0
    out[covered] /= z[covered, None]
    macs = plan.allowed_entries * (dh + dv)
    return out, m, z, macs


def attention_backward(q, k, v, plan, scale, m, z, out, d_out):
    """Gradients of attention_forward; recomputes scores block by block."""
    dh = q.shape[1]
    dv = v.shape[1]
    nblk = plan.blk_rows_off.size - 1
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dvv = np.zeros_like(v)
    # d(softmax) row correction: sum_j P_ij dP_ij = dO_i . O_i
    delta = np.einsum("ij,ij->i", d_out, out)

    for b in range(nblk):
        rows, cols, ri, ci = _block_view(plan, b)
        if ri is None:
            t = (q[rows] @ k[cols].T) * scale
            p = np.exp(t - m[rows][:, None]) / z[rows][:, None]
            dvv[cols] += p.T @ d_out[rows]
            dp = d_out[rows] @ v[cols].T
            ds = p * (dp - delta[rows][:, None]) * scale
            dq[rows] += ds @ k[cols]
            dk[cols] += ds.T @ q[rows]
        else:
            gr, gc = rows[ri], cols[ci]
            t = np.einsum("ij,ij->i", q[gr], k[gc]) * scale
            p = np.exp(t - m[gr]) / z[gr]
            np.add.at(dvv, gc, p[:, None] * d_out[gr])
            dp = np.einsum("ij,ij->i", d_out[gr], v[gc])
            ds = p * (dp - delta[gr]) * scale
            np.add.at(dq, gr, ds[:, None] * k[gc])
            np.add.at(dk, gc, ds[:, None] * q[gr])

    macs = plan.allowed_entries * (3 * dh + 2 * dv)
    return dq, dk, dvv, macs
