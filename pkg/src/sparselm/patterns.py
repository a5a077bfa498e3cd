"""Factorized attention connectivity patterns.

A pattern assigns each position ``i`` and head ``m`` a sorted index set
``A_i^(m)`` of earlier positions (plus ``i`` itself) that ``i`` may attend to.
Rows are computed on demand from closed forms, so large sequence lengths never
materialize their full index sets. The ``strided`` kind pairs a sliding window
with an every-l-th-position head; the ``fixed`` kind pairs a within-block
window with a band of summary columns at the tail of each block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FactorizedPattern",
    "ValidityReport",
    "strided_pattern",
    "fixed_pattern",
    "full_pattern",
    "local_only_pattern",
    "merge_heads",
    "verify_validity",
    "pattern_stats",
    "render_pattern",
    "parse_pattern_spec",
]

KINDS = ("strided", "fixed", "full", "local_only", "custom")


class FactorizedPattern:
    """Per-head attention index sets for a sequence of length n.

    ``head_row(m, i)`` returns the sorted indices of ``A_i^(m)``; every row
    contains ``i`` itself and nothing greater.
    """

    def __init__(self, kind, n, p, l=None, c=None, rows_fn=None, head_rows_fn=None):
        if kind not in KINDS:
            raise ValueError(f"unknown pattern kind '{kind}'")
        if n < 1:
            raise ValueError("sequence length must be positive")
        self.kind = kind
        self.n = int(n)
        self.p = int(p)
        self.l = None if l is None else int(l)
        self.c = None if c is None else int(c)
        self._rows_fn = rows_fn
        self._head_rows_fn = head_rows_fn

    def head_row(self, m, i):
        """Sorted index set A_i^(m), 0-based head index m < p."""
        if not 0 <= m < self.p:
            raise IndexError(f"head {m} out of range for p={self.p}")
        if not 0 <= i < self.n:
            raise IndexError(f"position {i} out of range for n={self.n}")
        return self._head_rows_fn(m, i)

    def row_union(self, i):
        """Sorted union of all heads' sets at position i."""
        if self._rows_fn is not None:
            return self._rows_fn(i)
        if self.p == 1:
            return self.head_row(0, i)
        return np.union1d(self.head_row(0, i), self.head_row(1, i))

    def head_row_sizes(self, m):
        """|A_i^(m)| for all i, vectorized where a closed form exists."""
        return np.array(
            [self.head_row(m, i).size for i in range(self.n)], dtype=np.int64
        )

    def union_sizes(self):
        """|union over heads of A_i| for all i, without materializing rows."""
        i = np.arange(self.n, dtype=np.int64)
        if self.kind == "full":
            return i + 1
        if self.kind == "local_only":
            return np.minimum(i, self.l) + 1
        if self.kind == "strided":
            # window of l+1 entries plus residue-class members below it
            return np.minimum(i, self.l) + 1 + np.maximum(0, i // self.l - 1)
        if self.kind == "fixed":
            # in-block window plus c summary columns per completed block
            return i - (i // self.l) * self.l + 1 + (i // self.l) * self.c
        return np.array([self.row_union(j).size for j in range(self.n)], dtype=np.int64)

    def __repr__(self):
        bits = [f"kind={self.kind}", f"n={self.n}", f"p={self.p}"]
        if self.l is not None:
            bits.append(f"l={self.l}")
        if self.c is not None:
            bits.append(f"c={self.c}")
        return f"FactorizedPattern({', '.join(bits)})"


def _check_stride(n, l):
    if not 1 <= l <= n:
        raise ValueError(f"stride l={l} out of range [1, {n}]")


def strided_pattern(n, l):
    """Window head {max(0, i-l)..i} plus every-l-th head {j <= i : (i-j) % l == 0}."""
    _check_stride(n, l)

    def head_rows(m, i):
        if m == 0:
            return np.arange(max(0, i - l), i + 1, dtype=np.int64)
        return np.arange(i % l, i + 1, l, dtype=np.int64)

    return FactorizedPattern("strided", n, p=2, l=l, head_rows_fn=head_rows)


def fixed_pattern(n, l, c):
    """Within-block head plus summary columns {j : j % l in [l-c, l)}, and self."""
    _check_stride(n, l)
    if not 1 <= c <= l:
        raise ValueError(f"summary width c={c} out of range [1, {l}]")

    def head_rows(m, i):
        if m == 0:
            return np.arange((i // l) * l, i + 1, dtype=np.int64)
        # summary columns of every block, clipped to <= i, plus i itself
        blocks = np.arange(0, i // l + 1, dtype=np.int64)
        cols = (blocks[:, None] * l + np.arange(l - c, l, dtype=np.int64)).ravel()
        cols = cols[cols <= i]
        if cols.size == 0 or cols[-1] != i:
            cols = np.append(cols, i)
        return cols

    return FactorizedPattern("fixed", n, p=2, l=l, c=c, head_rows_fn=head_rows)


def full_pattern(n):
    """Single head attending to every position up to and including i."""

    def head_rows(m, i):
        return np.arange(0, i + 1, dtype=np.int64)

    return FactorizedPattern("full", n, p=1, head_rows_fn=head_rows)


def local_only_pattern(n, l):
    """Only the window head of the strided pair; invalid beyond short ranges."""
    _check_stride(n, l)

    def head_rows(m, i):
        return np.arange(max(0, i - l), i + 1, dtype=np.int64)

    return FactorizedPattern("local_only", n, p=1, l=l, head_rows_fn=head_rows)


def merge_heads(pat):
    """Single-head pattern attending to the union of all heads' sets."""
    if pat.p == 1:
        src = pat

        def head_rows(m, i):
            return src.head_row(0, i)

        merged = FactorizedPattern(
            "custom", pat.n, p=1, l=pat.l, c=pat.c, head_rows_fn=head_rows
        )
        return merged

    src = pat

    def head_rows(m, i):
        return src.row_union(i)

    return FactorizedPattern(
        "custom", pat.n, p=1, l=pat.l, c=pat.c, head_rows_fn=head_rows
    )


@dataclass
class ValidityReport:
    valid: bool
    p_used: int
    witness: tuple[int, int] | None
    max_path_length: int | float

    def __str__(self):
        if self.valid:
            return (
                f"valid: every pair connected within {self.p_used} steps "
                f"(longest shortest path = {self.max_path_length})"
            )
        w = self.witness
        return (
            f"invalid at p={self.p_used}: position {w[1]} cannot reach {w[0]} "
            f"within {self.p_used} steps (longest shortest path = "
            f"{self.max_path_length})"
        )


def _packed_adjacency(pat):
    """Row i as a bitset over positions, packed into uint64 words."""
    n = pat.n
    words = (n + 63) // 64
    bits = np.zeros((n, words), dtype=np.uint64)
    one = np.uint64(1)
    for i in range(n):
        row = pat.row_union(i)
        np.bitwise_or.at(bits[i], row >> 6, one << (row & 63).astype(np.uint64))
    return bits


def verify_validity(pat, p_allowed, max_steps=None):
    """Check that every earlier position is reachable within ``p_allowed`` edges.

    The graph has an edge i -> j for every j in the union of i's head sets.
    Reachability is propagated as packed bitsets: after step s, row i holds
    everything reachable from i by at most s edges. The report's
    ``max_path_length`` is the first step count at which all pairs j <= i are
    covered (the longest shortest path), searched up to ``max_steps``.
    """
    n = pat.n
    if max_steps is None:
        max_steps = max(p_allowed, n)
    bits = _packed_adjacency(pat)
    words = bits.shape[1]
    one = np.uint64(1)

    # lower[i] = bitset of {0..i}
    lower = np.zeros((n, words), dtype=np.uint64)
    full = np.uint64(0xFFFFFFFFFFFFFFFF)
    for i in range(n):
        w = i >> 6
        lower[i, :w] = full
        r = (i & 63) + 1
        lower[i, w] = full if r == 64 else (one << np.uint64(r)) - one

    reach = bits.copy()
    covered_at = None
    witness = None
    valid = None
    step = 1
    while True:
        missing = lower & ~reach
        if not missing.any():
            covered_at = step
            break
        if step == p_allowed:
            bad_rows = np.nonzero(missing.any(axis=1))[0]
            i = int(bad_rows[0])
            w = int(np.nonzero(missing[i])[0][0])
            word = int(missing[i, w])
            j = w * 64 + (word & -word).bit_length() - 1
            witness = (j, i)
            valid = False
        if step >= max_steps:
            break
        # one more hop: reach_i |= union of reach_a over direct targets a
        nxt = np.empty_like(reach)
        for i in range(n):
            row = pat.row_union(i)
            nxt[i] = np.bitwise_or.reduce(reach[row], axis=0)
        reach = nxt
        step += 1

    if valid is None:
        valid = covered_at is not None and covered_at <= p_allowed
    max_path = covered_at if covered_at is not None else math.inf
    return ValidityReport(
        valid=valid, p_used=p_allowed, witness=witness, max_path_length=max_path
    )


def pattern_stats(pat):
    """Exact attended-pair counts: total, max row size, per-position curve."""
    sizes = pat.union_sizes()
    return {
        "total_pairs": int(sizes.sum()),
        "max_row_size": int(sizes.max()),
        "pairs_per_position_curve": sizes,
    }


def connectivity_matrix(pat):
    """Dense boolean n x n matrix of the union pattern (visualization sizes)."""
    n = pat.n
    mat = np.zeros((n, n), dtype=bool)
    for i in range(n):
        mat[i, pat.row_union(i)] = True
    return mat


def render_pattern(obj, path):
    """Write the connectivity matrix as an ASCII P2 portable graymap.

    White pixels mark attended (query, key) pairs, black pixels masked ones.
    Accepts a FactorizedPattern or anything exposing ``coverage_matrix()``
    (block layouts do).
    """
    if isinstance(obj, FactorizedPattern):
        mat = connectivity_matrix(obj)
    else:
        mat = obj.coverage_matrix()
    n_rows, n_cols = mat.shape
    lines = [f"P2\n{n_cols} {n_rows}\n255\n"]
    for row in mat:
        lines.append(" ".join("255" if v else "0" for v in row))
        lines.append("\n")
    with open(path, "w") as fh:
        fh.write("".join(lines))


def parse_pattern_spec(spec):
    """Build a pattern from a "kind:n:l[:c]" string, e.g. "strided:1024:32"."""
    parts = spec.split(":")
    kind = parts[0]
    try:
        args = [int(x) for x in parts[1:]]
    except ValueError as exc:
        raise ValueError(f"malformed pattern spec '{spec}'") from exc
    if kind == "full" and len(args) == 1:
        return full_pattern(args[0])
    if kind == "strided" and len(args) == 2:
        return strided_pattern(args[0], args[1])
    if kind == "fixed" and len(args) == 3:
        return fixed_pattern(args[0], args[1], args[2])
    if kind in ("local", "local_only") and len(args) == 2:
        return local_only_pattern(args[0], args[1])
    raise ValueError(
        f"malformed pattern spec '{spec}' (expected full:N, strided:N:L, "
        f"fixed:N:L:C, or local:N:L)"
    )
