"""Masked reference attention and the block-sparse attention op.

``dense_attention`` is the oracle path: it materializes per-row allowed sets
as a boolean mask and differentiates through ordinary tape ops. It is capped
at a configurable sequence length. ``sparse_attention`` runs the block-sparse
kernel per head as one fused tape op whose backward calls the kernel's
gradient routine; it never materializes the n x n matrix.

Head integration strategies: one factorized head per residual block
(interleaved), a single head over the union of the factorized sets (merged),
or several attention heads split across the factorized heads (multihead).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sparselm import kernels
from sparselm.layout import DEFAULT_BLOCK, compile_block_layout
from sparselm.patterns import FactorizedPattern
from sparselm.tensor import (
    Tensor,
    apply_op,
    concat_cols,
    divide_scalar,
    masked_softmax,
    matmul,
    slice_cols,
    transpose,
)

__all__ = [
    "AttentionParams",
    "HeadStrategy",
    "dense_attention",
    "sparse_attention",
    "attention_core",
    "apply_head_strategy",
    "head_assignment",
    "LayoutCache",
    "allowed_mask",
    "mac_counter",
    "DENSE_ORACLE_LIMIT",
]

DENSE_ORACLE_LIMIT = 4096


class _MacCounter:
    """Running tally of kernel multiply-accumulates, for tests and the bench."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)

    def reset(self):
        self.total = 0


mac_counter = _MacCounter()


@dataclass
class AttentionParams:
    """Projection weights for one attention layer.

    ``w_q``/``w_k`` are d x (n_h * qk_dim) and ``w_v`` is d x (n_h * head_dim),
    with heads occupying consecutive column slices; ``w_p`` is the d x d
    post-attention matrix. The total parameter count is independent of n_h.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_p: Tensor
    n_h: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_h != 0:
            raise ValueError(f"width d={d} not divisible by n_h={self.n_h}")
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k must have the same shape")
        for name, w, width in (
            ("w_v", self.w_v, self.n_h * self.head_dim),
            ("w_p", self.w_p, d),
        ):
            if w.shape != (d, width):
                raise ValueError(f"{name} must be {(d, width)}, got {w.shape}")
        if self.w_q.shape[1] % self.n_h != 0:
            raise ValueError("query width not divisible by n_h")

    @property
    def d(self):
        return self.w_q.shape[0]

    @property
    def head_dim(self):
        return self.d // self.n_h

    @property
    def qk_dim(self):
        return self.w_q.shape[1] // self.n_h

    def head_slices(self, h):
        """(q/k column range, v column range) for attention head h."""
        qk, hd = self.qk_dim, self.head_dim
        return (h * qk, (h + 1) * qk), (h * hd, (h + 1) * hd)


@dataclass(frozen=True)
class HeadStrategy:
    """How factorized heads map onto residual blocks and attention heads."""

    kind: str  # interleaved | merged | multihead
    pattern: FactorizedPattern

    def __post_init__(self):
        if self.kind not in ("interleaved", "merged", "multihead"):
            raise ValueError(f"unknown head strategy '{self.kind}'")


def head_assignment(n_h, p, h):
    """Factorized head used by attention head h under the multihead strategy.

    The first n_h/p attention heads take factorized head 0, the next take
    head 1, and so on; when n_h < p the assignment degenerates to round-robin.
    """
    if n_h >= p:
        return min(p - 1, h * p // n_h)
    return h % p


def apply_head_strategy(layer_index, strategy, n_h):
    """Per-attention-head pattern selectors for one residual block.

    Returns a list of (pattern, head) pairs of length n_h, where head=None
    selects the union of the pattern's factorized heads.
    """
    pat = strategy.pattern
    if strategy.kind == "interleaved":
        sel = (pat, layer_index % pat.p)
        return [sel] * n_h
    if strategy.kind == "merged":
        return [(pat, None)] * n_h
    return [(pat, head_assignment(n_h, pat.p, h)) for h in range(n_h)]


class LayoutCache:
    """Compiled layouts keyed by (pattern identity, head, block size)."""

    def __init__(self, block=DEFAULT_BLOCK):
        self.block = block
        self._cache = {}

    def get(self, pattern, head):
        key = (id(pattern), head, self.block)
        lay = self._cache.get(key)
        if lay is None:
            lay = compile_block_layout(pattern, head=head, block=self.block)
            self._cache[key] = lay
        return lay

    def layouts_for(self, selectors):
        return [self.get(pat, head) for pat, head in selectors]


def allowed_mask(pattern, head=None, n=None):
    """Boolean allowed matrix for one selector, for the dense oracle path."""
    n = pattern.n if n is None else n
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        row = pattern.row_union(i) if head is None else pattern.head_row(head, i)
        mask[i, row] = True
    return mask


def _per_head_masks(allowed, n, n_h):
    """Normalize the allowed argument to one boolean mask per head."""
    if isinstance(allowed, np.ndarray) and allowed.dtype == bool:
        return [allowed] * n_h
    if isinstance(allowed, (list, tuple)) and len(allowed) == n_h and all(
        isinstance(a, np.ndarray) and a.dtype == bool for a in allowed
    ):
        return list(allowed)
    # per-row index sets shared by every head
    mask = np.zeros((n, n), dtype=bool)
    for i, idx in enumerate(allowed):
        mask[i, np.asarray(idx, dtype=np.int64)] = True
    return [mask] * n_h


def dense_attention(x, params, allowed, oracle_limit=DENSE_ORACLE_LIMIT):
    """Reference attention via masked softmax over materialized allowed sets.

    ``allowed`` is a per-row index-set list, one boolean mask, or one mask per
    head. Differentiable through the tape; refuses sequences longer than
    ``oracle_limit``.
    """
    n = x.shape[0]
    if n > oracle_limit:
        raise ValueError(
            f"dense oracle limited to n <= {oracle_limit}, got n={n}"
        )
    masks = _per_head_masks(allowed, n, params.n_h)
    sqrt_qk = math.sqrt(params.qk_dim)
    outs = []
    for h in range(params.n_h):
        (q0, q1), (v0, v1) = params.head_slices(h)
        q = matmul(x, slice_cols(params.w_q, q0, q1))
        k = matmul(x, slice_cols(params.w_k, q0, q1))
        v = matmul(x, slice_cols(params.w_v, v0, v1))
        logits = divide_scalar(matmul(q, transpose(k)), sqrt_qk)
        p = masked_softmax(logits, masks[h])
        outs.append(matmul(p, v))
    merged = outs[0] if len(outs) == 1 else concat_cols(outs)
    return matmul(merged, params.w_p)


def attention_core(q, k, v, layout, impl=None):
    """Fused block-sparse attention over projected q/k/v, as one tape op."""
    plan = layout.plan()
    scale = 1.0 / math.sqrt(q.shape[1])
    out, m, z, macs = kernels.attention_forward(
        q.data, k.data, v.data, plan, scale, impl=impl
    )
    mac_counter.add(macs)

    def vjp(g):
        dq, dk, dv, bmacs = kernels.attention_backward(
            q.data, k.data, v.data, plan, scale, m, z, out, g, impl=impl
        )
        mac_counter.add(bmacs)
        return [dq, dk, dv]

    return apply_op("sparse_attention", (q, k, v), out, vjp, retained=(q, k, v))


def sparse_attention(x, params, layouts, impl=None):
    """Block-sparse attention for one layer.

    ``layouts`` is one BlockSparseLayout per attention head (a single layout
    is broadcast to all heads). Numerically equal to ``dense_attention`` over
    the same allowed sets; computes only covered blocks.
    """
    if not isinstance(layouts, (list, tuple)):
        layouts = [layouts] * params.n_h
    if len(layouts) != params.n_h:
        raise ValueError(
            f"need {params.n_h} layouts (one per head), got {len(layouts)}"
        )
    for lay in layouts:
        if lay.n != x.shape[0]:
            raise ValueError(
                f"layout covers n={lay.n} but input has n={x.shape[0]} rows"
            )
    outs = []
    for h in range(params.n_h):
        (q0, q1), (v0, v1) = params.head_slices(h)
        q = matmul(x, slice_cols(params.w_q, q0, q1))
        k = matmul(x, slice_cols(params.w_k, q0, q1))
        v = matmul(x, slice_cols(params.w_v, v0, v1))
        outs.append(attention_core(q, k, v, layouts[h], impl=impl))
    merged = outs[0] if len(outs) == 1 else concat_cols(outs)
    return matmul(merged, params.w_p)
