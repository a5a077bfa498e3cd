"""Compile factorized patterns into block-level schedules for the kernels.

A layout is a list of blocks; each block names the query rows and key columns
it covers (as explicit index arrays, so remapped schedules are expressible)
plus an optional bit-mask selecting the allowed (row, col) pairs inside the
tile. A ``None`` mask means the whole tile is allowed, which is the fast path.

Strategies:
  local_window      contiguous per-row windows (window heads, block heads,
                    full causal) tiled along the diagonal band
  strided_transpose every-l-th heads, remapped residue-major so each residue
                    class becomes a causal segment of dense tiles
  fixed_columns     summary-column band gathered into compact key tiles, plus
                    diagonal self blocks for rows outside the band
  gather_fallback   one explicit index list per row, no blocking

Coverage is exact: the union of allowed pairs over blocks equals the pattern's
pairs, each exactly once, and never a pair above the diagonal.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = ["Block", "BlockSparseLayout", "KernelPlan", "compile_block_layout"]

DEFAULT_BLOCK = 32


@dataclass
class Block:
    rb: int
    cb: int
    rows: np.ndarray  # int32 global query positions
    cols: np.ndarray  # int32 global key positions
    mask: np.ndarray | None  # uint8 (len(rows), len(cols)); None = dense

    def allowed_count(self):
        if self.mask is None:
            return self.rows.size * self.cols.size
        return int(self.mask.sum())


@dataclass
class KernelPlan:
    """Flat arrays the compiled and reference kernels both consume."""

    n: int
    rows_flat: np.ndarray  # int32
    cols_flat: np.ndarray  # int32
    mask_flat: np.ndarray  # uint8
    blk_rows_off: np.ndarray  # int64, nblk+1
    blk_cols_off: np.ndarray  # int64, nblk+1
    blk_mask_off: np.ndarray  # int64, nblk; -1 for dense blocks
    blk_tile_off: np.ndarray  # int64, nblk+1; offsets into the score scratch
    scratch_size: int
    allowed_entries: int


class BlockSparseLayout:
    """Executable block schedule for one head (or a merged/custom set)."""

    def __init__(self, n, block, head, strategy, blocks):
        self.n = n
        self.block = block
        self.head = head
        self.strategy = strategy
        self.blocks = blocks
        self._plan = None

    def pair_count(self):
        return sum(b.allowed_count() for b in self.blocks)

    def iter_pairs(self):
        """Yield every covered (query, key) pair, block by block."""
        for b in self.blocks:
            if b.mask is None:
                for i in b.rows:
                    for j in b.cols:
                        yield int(i), int(j)
            else:
                ri, ci = np.nonzero(b.mask)
                for r, c in zip(ri, ci):
                    yield int(b.rows[r]), int(b.cols[c])

    def coverage_matrix(self):
        mat = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.iter_pairs():
            mat[i, j] = True
        return mat

    def audit(self, pattern, head=None):
        """Verify exact, duplicate-free, causal coverage against a pattern.

        Raises ValueError on the first violation. ``head=None`` audits against
        the union of the pattern's heads.
        """
        counts = {}
        for i, j in self.iter_pairs():
            if j > i:
                raise ValueError(f"layout covers above-diagonal pair ({i}, {j})")
            counts[(i, j)] = counts.get((i, j), 0) + 1
        dup = [p for p, k in counts.items() if k > 1]
        if dup:
            raise ValueError(f"layout covers pair {dup[0]} {counts[dup[0]]} times")
        expect = set()
        for i in range(pattern.n):
            row = pattern.row_union(i) if head is None else pattern.head_row(head, i)
            expect.update((i, int(j)) for j in row)
        got = set(counts)
        if got != expect:
            missing = expect - got
            extra = got - expect
            raise ValueError(
                f"layout/pattern coverage mismatch: {len(missing)} missing "
                f"(e.g. {next(iter(missing), None)}), {len(extra)} extra "
                f"(e.g. {next(iter(extra), None)})"
            )

    def plan(self):
        """Flatten to the array form the kernels execute (cached)."""
        if self._plan is not None:
            return self._plan
        nblk = len(self.blocks)
        rows_parts, cols_parts, mask_parts = [], [], []
        blk_rows_off = np.zeros(nblk + 1, dtype=np.int64)
        blk_cols_off = np.zeros(nblk + 1, dtype=np.int64)
        blk_mask_off = np.full(nblk, -1, dtype=np.int64)
        blk_tile_off = np.zeros(nblk + 1, dtype=np.int64)
        mask_total = 0
        allowed = 0
        for k, b in enumerate(self.blocks):
            rows_parts.append(b.rows.astype(np.int32, copy=False))
            cols_parts.append(b.cols.astype(np.int32, copy=False))
            blk_rows_off[k + 1] = blk_rows_off[k] + b.rows.size
            blk_cols_off[k + 1] = blk_cols_off[k] + b.cols.size
            blk_tile_off[k + 1] = blk_tile_off[k] + b.rows.size * b.cols.size
            if b.mask is not None:
                blk_mask_off[k] = mask_total
                flat = np.ascontiguousarray(b.mask, dtype=np.uint8).ravel()
                mask_parts.append(flat)
                mask_total += flat.size
            allowed += b.allowed_count()
        self._plan = KernelPlan(
            n=self.n,
            rows_flat=_cat(rows_parts, np.int32),
            cols_flat=_cat(cols_parts, np.int32),
            mask_flat=_cat(mask_parts, np.uint8),
            blk_rows_off=blk_rows_off,
            blk_cols_off=blk_cols_off,
            blk_mask_off=blk_mask_off,
            blk_tile_off=blk_tile_off,
            scratch_size=int(blk_tile_off[-1]),
            allowed_entries=allowed,
        )
        return self._plan

    def __repr__(self):
        return (
            f"BlockSparseLayout(strategy={self.strategy}, n={self.n}, "
            f"b={self.block}, blocks={len(self.blocks)}, "
            f"pairs={self.pair_count()})"
        )


def _cat(parts, dtype):
    if not parts:
        return np.zeros(0, dtype=dtype)
    return np.ascontiguousarray(np.concatenate(parts), dtype=dtype)


def _mask_or_none(mask):
    return None if mask.all() else mask.astype(np.uint8)


def _window_start_fn(pattern, head):
    """Per-row window start for heads whose rows are contiguous ranges."""
    kind, l = pattern.kind, pattern.l
    if kind == "full":
        return lambda i: 0
    if kind in ("strided", "local_only") and head == 0:
        return lambda i: max(0, i - l)
    if kind == "fixed" and head == 0:
        return lambda i: (i // l) * l
    return None


def _compile_local_window(pattern, head, b, start_fn):
    n = pattern.n
    blocks = []
    for rb in range((n + b - 1) // b):
        r0, r1 = rb * b, min((rb + 1) * b, n)
        rows = np.arange(r0, r1, dtype=np.int32)
        starts = np.array([start_fn(int(i)) for i in rows])
        c_lo, c_hi = int(starts.min()), int(rows[-1])
        for cb in range(c_lo // b, c_hi // b + 1):
            c0, c1 = cb * b, min((cb + 1) * b, n)
            cols = np.arange(c0, c1, dtype=np.int32)
            mask = (cols[None, :] >= starts[:, None]) & (
                cols[None, :] <= rows[:, None]
            )
            if mask.any():
                blocks.append(Block(rb, cb, rows, cols, _mask_or_none(mask)))
    return blocks


def _compile_strided_transpose(pattern, b):
    """Residue-major remap: same-residue attention becomes causal segments."""
    n, l = pattern.n, pattern.l
    pos = np.arange(n, dtype=np.int64)
    perm = np.lexsort((pos // l, pos % l))  # residue-major, quotient ascending
    residue = (perm % l).astype(np.int64)
    blocks = []
    for rb in range((n + b - 1) // b):
        r0, r1 = rb * b, min((rb + 1) * b, n)
        rows = perm[r0:r1].astype(np.int32)
        for cb in range(rb + 1):
            c0, c1 = cb * b, min((cb + 1) * b, n)
            cols = perm[c0:c1].astype(np.int32)
            same = residue[r0:r1, None] == residue[None, c0:c1]
            causal = cols[None, :] <= rows[:, None]
            mask = same & causal
            if mask.any():
                blocks.append(Block(rb, cb, rows, cols, _mask_or_none(mask)))
    return blocks


def _compile_fixed_columns(pattern, b):
    """Gather the summary-column band; add diagonal blocks for self pairs."""
    n, l, c = pattern.n, pattern.l, pattern.c
    pos = np.arange(n, dtype=np.int64)
    stripe = pos % l >= l - c
    gathered = pos[stripe].astype(np.int32)
    n_col_blocks = (gathered.size + b - 1) // b
    blocks = []
    for rb in range((n + b - 1) // b):
        r0, r1 = rb * b, min((rb + 1) * b, n)
        rows = np.arange(r0, r1, dtype=np.int32)
        for cb in range(n_col_blocks):
            cols = gathered[cb * b : (cb + 1) * b]
            mask = cols[None, :] <= rows[:, None]
            if mask.any():
                blocks.append(Block(rb, cb, rows, cols, _mask_or_none(mask)))
        # self pairs for rows outside the band (the D1 inclusion)
        extra = rows[~stripe[r0:r1]]
        if extra.size:
            mask = np.eye(extra.size, dtype=bool)
            blocks.append(Block(rb, n_col_blocks + rb, extra, extra, _mask_or_none(mask)))
    return blocks


def _compile_gather(pattern, head, b):
    """One explicit index list per row; correct for any pattern."""
    blocks = []
    for i in range(pattern.n):
        row = pattern.row_union(i) if head is None else pattern.head_row(head, i)
        blocks.append(
            Block(
                i,
                0,
                np.array([i], dtype=np.int32),
                row.astype(np.int32),
                None,
            )
        )
    return blocks


AUDIT_ON_COMPILE = os.environ.get("SPARSELM_AUDIT_LAYOUTS", "") not in ("", "0")


def compile_block_layout(pattern, head=None, block=DEFAULT_BLOCK, audit=None):
    """Compile one head of a pattern (or its union) into a block schedule.

    ``head`` is a 0-based factorized head index, or None for the union of all
    heads. Strategy selection: contiguous-window heads tile as a local window;
    the strided every-l-th head uses the residue-major remap when the stride
    is a multiple of the block size; the fixed summary band gathers its
    columns; anything else falls back to per-row index lists.

    ``audit=True`` (or SPARSELM_AUDIT_LAYOUTS=1, the debug mode) re-checks the
    compiled schedule against the pattern pair by pair before returning it.
    """
    b = int(block)
    if b < 1:
        raise ValueError("block size must be >= 1")
    if head is not None and not 0 <= head < pattern.p:
        raise IndexError(f"head {head} out of range for p={pattern.p}")

    if head is None and pattern.p > 1:
        strategy, blocks = "gather_fallback", _compile_gather(pattern, None, b)
    else:
        h = 0 if head is None else head
        start_fn = _window_start_fn(pattern, h)
        if start_fn is not None:
            strategy, blocks = "local_window", _compile_local_window(
                pattern, h, b, start_fn
            )
        elif pattern.kind == "strided" and h == 1 and pattern.l % b == 0:
            strategy, blocks = "strided_transpose", _compile_strided_transpose(
                pattern, b
            )
        elif pattern.kind == "fixed" and h == 1:
            strategy, blocks = "fixed_columns", _compile_fixed_columns(pattern, b)
        else:
            strategy, blocks = "gather_fallback", _compile_gather(pattern, h, b)

    layout = BlockSparseLayout(pattern.n, b, head, strategy, blocks)
    if audit or (audit is None and AUDIT_ON_COMPILE):
        layout.audit(pattern, head=head)
    return layout
