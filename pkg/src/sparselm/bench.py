"""Forward-pass benchmark: dense attention vs the sparse kernels.

Times one attention layer at a given (n, d) for three implementations: the
dense masked reference over full causal sets, the compiled block-sparse
kernel, and the pure-python kernel. Before any timing, the sparse path is
cross-checked against the dense oracle on the benchmark pattern (at the full
size when memory allows, else at a reduced size); a failed check aborts the
benchmark. MAC counts report the multiply-accumulates each implementation
performs, so the dense/sparse ratio is hardware-independent.
"""

from __future__ import annotations

import time

import numpy as np

from sparselm import kernels
from sparselm.attention import (
    AttentionParams,
    HeadStrategy,
    LayoutCache,
    allowed_mask,
    apply_head_strategy,
    dense_attention,
    mac_counter,
    sparse_attention,
)
from sparselm.patterns import full_pattern, parse_pattern_spec
from sparselm.tensor import Tape, Tensor, recording, tensor_sum

__all__ = ["run_bench", "BenchError"]

DENSE_BYTES_LIMIT = 4 << 30  # refuse the dense timing above ~4 GiB of temps
CHECK_TOL = 1e-3  # float32 cross-check gate


class BenchError(RuntimeError):
    pass


def _bench_params(rng, d, n_h, dtype):
    std = 0.125 / np.sqrt(d)
    mk = lambda shape: Tensor(rng.normal(0.0, std, size=shape).astype(dtype))
    return AttentionParams(
        w_q=mk((d, d)), w_k=mk((d, d)), w_v=mk((d, d)), w_p=mk((d, d)), n_h=n_h
    )


def _dense_bytes(n, dtype):
    # mask + logits + probabilities, the dominant n x n temporaries
    return n * n * (1 + 2 * np.dtype(dtype).itemsize)


def run_bench(
    pattern_spec,
    d=256,
    n_h=4,
    repeats=3,
    strategy="multihead",
    dtype="float32",
    seed=0,
    include_backward=False,
    dense_limit_bytes=DENSE_BYTES_LIMIT,
    check_n=512,
    log=print,
):
    """Run the benchmark; returns a list of row dicts {impl, n, d, ms, mac_count}.

    One row per (implementation, repeat). Raises BenchError if the pre-timing
    correctness cross-check fails.
    """
    pat = parse_pattern_spec(pattern_spec)
    n = pat.n
    dt = np.dtype(dtype).type
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((n, d)).astype(dt))
    params = _bench_params(rng, d, n_h, dt)
    strat = HeadStrategy(strategy, pat)
    selectors = apply_head_strategy(0, strat, n_h)
    cache = LayoutCache()
    layouts = cache.layouts_for(selectors)

    dense_ok = _dense_bytes(n, dt) <= dense_limit_bytes

    # correctness gate: sparse vs the dense masked oracle on this pattern
    if dense_ok and n <= 8192:
        _cross_check(x, params, selectors, layouts, CHECK_TOL)
    else:
        _cross_check_small(
            pattern_spec, d, n_h, strategy, dt, seed, min(check_n, n)
        )
    if kernels.HAVE_EXTENSION:
        _backend_check(x, params, layouts)

    impls = []
    if dense_ok:
        full_mask = allowed_mask(full_pattern(n))
        impls.append(("dense", lambda: dense_attention(x, params, full_mask, oracle_limit=n)))
    else:
        log(f"# dense timing skipped: would need ~{_dense_bytes(n, dt) / 2**30:.1f} GiB")
    if kernels.HAVE_EXTENSION:
        impls.append(
            ("sparse[cython]", lambda: sparse_attention(x, params, layouts, impl="cython"))
        )
    impls.append(
        ("sparse[python]", lambda: sparse_attention(x, params, layouts, impl="python"))
    )

    def run(fn):
        if not include_backward:
            fn()
            return
        tape = Tape()
        with recording(tape):
            out = fn()
            loss = tensor_sum(out)
        tape.backward(loss)

    qk_dim, head_dim = params.qk_dim, params.head_dim
    dense_macs = n_h * n * n * (qk_dim + head_dim)
    if include_backward:
        dense_macs *= 3  # matmul backward costs ~2x its forward, plus the forward
    rows = []
    for name, fn in impls:
        run(fn)  # warmup
        for _ in range(repeats):
            mac_counter.reset()
            t0 = time.perf_counter()
            run(fn)
            ms = (time.perf_counter() - t0) * 1e3
            macs = dense_macs if name == "dense" else mac_counter.total
            row = {"impl": name, "n": n, "d": d, "ms": ms, "mac_count": int(macs)}
            rows.append(row)
            log(
                f"{name:16s} n={n} d={d} {ms:10.2f} ms  mac_count={macs}"
            )
    return rows


def _cross_check(x, params, selectors, layouts, tol):
    masks = [allowed_mask(pat, head) for pat, head in selectors]
    want = dense_attention(x, params, masks, oracle_limit=x.shape[0]).data
    got = sparse_attention(x, params, layouts).data
    err = float(np.abs(want - got).max())
    if err > tol:
        raise BenchError(
            f"refusing to time: sparse/dense cross-check failed "
            f"(max abs diff {err:.3e} > {tol})"
        )


def _cross_check_small(pattern_spec, d, n_h, strategy, dt, seed, n_small):
    """Reduced-size gate when the full dense oracle would not fit in memory."""
    kind = pattern_spec.split(":")[0]
    pat_full = parse_pattern_spec(pattern_spec)
    spec = f"{kind}:{n_small}"
    if pat_full.l is not None:
        spec += f":{min(pat_full.l, n_small)}"
    if pat_full.c is not None:
        spec += f":{min(pat_full.c, min(pat_full.l, n_small))}"
    pat = parse_pattern_spec(spec)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((n_small, d)).astype(dt))
    params = _bench_params(rng, d, n_h, dt)
    selectors = apply_head_strategy(0, HeadStrategy(strategy, pat), n_h)
    layouts = LayoutCache().layouts_for(selectors)
    _cross_check(x, params, selectors, layouts, CHECK_TOL)


def _backend_check(x, params, layouts):
    a = sparse_attention(x, params, layouts, impl="cython").data
    b = sparse_attention(x, params, layouts, impl="python").data
    err = float(np.abs(a - b).max())
    if err > CHECK_TOL:
        raise BenchError(
            f"refusing to time: kernel backends disagree (max abs diff {err:.3e})"
        )
