"""Block layout compilation: exact coverage, strategy choice, plan packing."""

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

import oracles
from sparselm.layout import Block, BlockSparseLayout, compile_block_layout
from sparselm.patterns import (
    fixed_pattern,
    full_pattern,
    local_only_pattern,
    merge_heads,
    strided_pattern,
)


def pairs_of(layout):
    return set(layout.iter_pairs())


def pattern_pairs(pat, head=None):
    out = set()
    for i in range(pat.n):
        row = pat.row_union(i) if head is None else pat.head_row(head, i)
        out.update((i, int(j)) for j in row)
    return out


class TestLocalWindow:
    def test_spec_block_grid(self):
        lay = compile_block_layout(local_only_pattern(8, 4), head=0, block=4)
        assert lay.strategy == "local_window"
        assert [(b.rb, b.cb) for b in lay.blocks] == [(0, 0), (1, 0), (1, 1)]
        # masks equal window intersected with the lower triangle
        heads, _ = oracles.pattern_sets("local_only", 8, l=4)
        assert pairs_of(lay) == {
            (i, j) for i in range(8) for j in heads[i][0]
        }

    def test_full_pattern_no_block_above_diagonal(self):
        lay = compile_block_layout(full_pattern(8), head=0, block=4)
        assert all(b.cb <= b.rb for b in lay.blocks)
        lay.audit(full_pattern(8), head=0)

    def test_window_coverage_with_ragged_tail(self):
        pat = strided_pattern(37, 5)
        lay = compile_block_layout(pat, head=0, block=8)
        assert lay.strategy == "local_window"
        lay.audit(pat, head=0)


class TestStridedTranspose:
    def test_remapped_coverage_equals_residue_classes(self):
        pat = strided_pattern(64, 8)
        lay = compile_block_layout(pat, head=1, block=8)
        assert lay.strategy == "strided_transpose"
        heads, _ = oracles.pattern_sets("strided", 64, l=8)
        assert pairs_of(lay) == {(i, j) for i in range(64) for j in heads[i][1]}

    def test_ragged_length(self):
        pat = strided_pattern(50, 8)
        lay = compile_block_layout(pat, head=1, block=4)
        assert lay.strategy == "strided_transpose"
        lay.audit(pat, head=1)

    def test_falls_back_when_stride_not_divisible(self):
        pat = strided_pattern(36, 6)
        lay = compile_block_layout(pat, head=1, block=4)
        assert lay.strategy == "gather_fallback"
        lay.audit(pat, head=1)


class TestFixedColumns:
    def test_column_band_coverage(self):
        pat = fixed_pattern(64, 8, 2)
        lay = compile_block_layout(pat, head=1, block=8)
        assert lay.strategy == "fixed_columns"
        heads, _ = oracles.pattern_sets("fixed", 64, l=8, c=2)
        assert pairs_of(lay) == {(i, j) for i in range(64) for j in heads[i][1]}

    def test_self_diagonal_included(self):
        pat = fixed_pattern(24, 6, 1)
        lay = compile_block_layout(pat, head=1, block=4)
        got = pairs_of(lay)
        for i in range(24):
            assert (i, i) in got


class TestGatherFallback:
    def test_merged_union(self):
        pat = strided_pattern(36, 6)
        lay = compile_block_layout(pat, head=None, block=8)
        assert lay.strategy == "gather_fallback"
        assert pairs_of(lay) == pattern_pairs(pat)

    def test_merged_custom_pattern(self):
        merged = merge_heads(fixed_pattern(40, 8, 2))
        lay = compile_block_layout(merged, head=0, block=8)
        lay.audit(merged, head=0)


GRID = [
    ("strided", dict(n=48, l=8), 0, 8),
    ("strided", dict(n=48, l=8), 1, 8),
    ("strided", dict(n=48, l=8), None, 8),
    ("strided", dict(n=65, l=9), 0, 16),
    ("strided", dict(n=65, l=9), 1, 16),
    ("fixed", dict(n=48, l=8, c=3), 0, 8),
    ("fixed", dict(n=48, l=8, c=3), 1, 8),
    ("fixed", dict(n=48, l=8, c=3), None, 8),
    ("fixed", dict(n=70, l=16, c=5), 1, 32),
    ("full", dict(n=40), 0, 16),
    ("local_only", dict(n=52, l=7), 0, 8),
]


def _build(kind, kw):
    if kind == "strided":
        return strided_pattern(kw["n"], kw["l"])
    if kind == "fixed":
        return fixed_pattern(kw["n"], kw["l"], kw["c"])
    if kind == "full":
        return full_pattern(kw["n"])
    return local_only_pattern(kw["n"], kw["l"])


@pytest.mark.parametrize("kind,kw,head,b", GRID)
def test_exhaustive_coverage_equality(kind, kw, head, b):
    """Lossless and addition-free: block pairs == pattern pairs, each once."""
    pat = _build(kind, kw)
    lay = compile_block_layout(pat, head=head, block=b)
    lay.audit(pat, head=head)
    # duplicate-free by multiset size
    pairs = list(lay.iter_pairs())
    assert len(pairs) == len(set(pairs)) == lay.pair_count()
    assert all(j <= i for i, j in pairs)


def test_coverage_equality_large_strided():
    pat = strided_pattern(4096, 64)
    for head in (0, 1):
        lay = compile_block_layout(pat, head=head, block=32)
        assert pairs_of(lay) == pattern_pairs(pat, head)


def test_block_count_scaling():
    # block count stays O(n * sqrt(n) / b^2) for the factorized heads
    n, l, b = 1024, 32, 32
    pat = strided_pattern(n, l)
    for head in (0, 1):
        lay = compile_block_layout(pat, head=head, block=b)
        bound = 4 * n * l / (b * b) + 2 * n / b
        assert len(lay.blocks) <= bound


class TestPlan:
    def test_flat_arrays_consistent(self):
        pat = fixed_pattern(40, 8, 2)
        lay = compile_block_layout(pat, head=1, block=8)
        plan = lay.plan()
        nblk = len(lay.blocks)
        assert plan.blk_rows_off.shape == (nblk + 1,)
        assert plan.blk_cols_off.shape == (nblk + 1,)
        assert plan.allowed_entries == lay.pair_count()
        assert plan.scratch_size == int(
            sum(b.rows.size * b.cols.size for b in lay.blocks)
        )
        assert plan is lay.plan()  # cached

    def test_dense_blocks_marked(self):
        # residue segments of length 32 span four 8-tiles; the sub-diagonal
        # tiles inside a segment are fully allowed and need no mask
        lay = compile_block_layout(strided_pattern(256, 8), head=1, block=8)
        plan = lay.plan()
        dense = (plan.blk_mask_off < 0).sum()
        assert dense >= 1
        lay.audit(strided_pattern(256, 8), head=1)


def test_block_size_validation():
    with pytest.raises(ValueError):
        compile_block_layout(full_pattern(8), head=0, block=0)
    with pytest.raises(IndexError):
        compile_block_layout(full_pattern(8), head=3)


def test_audit_on_compile_flag():
    # debug mode re-checks coverage during compilation
    lay = compile_block_layout(strided_pattern(32, 8), head=1, block=8, audit=True)
    assert lay.strategy == "strided_transpose"


@hyp_settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 96),
    b=st.integers(1, 48),
    kind=st.sampled_from(["strided", "fixed", "full", "local_only"]),
    head=st.sampled_from([0, 1, None]),
    data=st.data(),
)
def test_fuzz_every_strategy_covers_exactly(n, b, kind, head, data):
    """Random shapes: compilation always yields exact, causal, unique coverage."""
    if kind == "full":
        pat = full_pattern(n)
    elif kind == "local_only":
        pat = local_only_pattern(n, data.draw(st.integers(1, n)))
    elif kind == "strided":
        pat = strided_pattern(n, data.draw(st.integers(1, n)))
    else:
        l = data.draw(st.integers(1, n))
        pat = fixed_pattern(n, l, data.draw(st.integers(1, l)))
    if head == 1 and pat.p == 1:
        head = 0
    lay = compile_block_layout(pat, head=head, block=b)
    lay.audit(pat, head=head)


def test_audit_catches_violations():
    pat = full_pattern(4)
    rows = np.array([1], dtype=np.int32)
    cols = np.array([2], dtype=np.int32)
    bad = BlockSparseLayout(4, 1, 0, "local_window", [Block(0, 0, rows, cols, None)])
    with pytest.raises(ValueError, match="above-diagonal"):
        bad.audit(pat, head=0)
    incomplete = BlockSparseLayout(
        4, 1, 0, "local_window",
        [Block(0, 0, np.array([0], np.int32), np.array([0], np.int32), None)],
    )
    with pytest.raises(ValueError, match="mismatch"):
        incomplete.audit(pat, head=0)
