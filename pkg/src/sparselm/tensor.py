"""Dense tensor arithmetic with a reverse-mode tape.

Tensors wrap contiguous numpy float arrays (float32 for training, float64 for
gradient checking). Ops compute eagerly; when a Tape is active they also record
a node with a VJP closure so ``backward`` can run the chain rule in reverse.
Segments wrapped in ``checkpoint_segment`` record a single node and are re-run
during the backward pass instead of retaining their intermediate activations.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "TapeError",
    "CheckpointReplayError",
    "settings",
    "recording",
    "tensor",
    "apply_op",
    "add",
    "sub",
    "mul",
    "neg",
    "divide_scalar",
    "matmul",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "gelu",
    "layer_norm",
    "masked_softmax",
    "dropout",
    "gather_rows",
    "slice_cols",
    "concat_cols",
    "backward",
    "checkpoint_segment",
    "finite_diff_grad",
    "instrumentation",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf, or a non-finite gradient reached the optimizer."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, tensor not on tape, reuse)."""


class CheckpointReplayError(RuntimeError):
    """Checkpointed segment did not reproduce its forward output on replay."""


class _Settings:
    """Process-wide numeric policy.

    deterministic: checkpointed segments verify bitwise replay; reductions keep
    a fixed order. check_finite: assert finiteness after every forward op
    (slow; meant for tests and debugging).
    """

    def __init__(self):
        self.deterministic = True
        self.check_finite = False


settings = _Settings()


class _Instrumentation:
    """Counts tensor values retained for backward, across all live tapes."""

    def __init__(self):
        self.retained = 0
        self.peak_retained = 0

    def reset(self):
        self.retained = 0
        self.peak_retained = 0

    def _grow(self, k):
        self.retained += k
        if self.retained > self.peak_retained:
            self.peak_retained = self.retained

    def _shrink(self, k):
        self.retained -= k


instrumentation = _Instrumentation()

_ids = itertools.count(1)

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """Dense array with a unique id for tape participation."""

    __slots__ = ("data", "id")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def copy(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape}, dtype={self.data.dtype})"

    # Arithmetic sugar; the named ops below are the real surface.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a tape op")
        return divide_scalar(self, other)


def tensor(data, dtype=None):
    return Tensor(data, dtype=dtype)


class _Node:
    __slots__ = ("op", "input_ids", "output_id", "vjp", "is_checkpoint")

    def __init__(self, op, input_ids, output_id, vjp, is_checkpoint=False):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.vjp = vjp
        self.is_checkpoint = is_checkpoint


class Tape:
    """Ordered record of executed ops for one forward/backward pair.

    ``saved`` is the set of tensor ids whose values are retained for the
    backward pass; its size is the memory-accounting quantity the
    checkpointing tests compare.
    """

    def __init__(self):
        self.nodes = []
        self.saved = set()
        self.output_ids = set()
        self._consumed = False
        self._released = False

    def record(self, op, inputs, output, vjp, retained=(), is_checkpoint=False):
        self.nodes.append(
            _Node(op, [t.id for t in inputs], output.id, vjp, is_checkpoint)
        )
        self.output_ids.add(output.id)
        new = {t.id for t in retained} - self.saved
        self.saved |= new
        instrumentation._grow(len(new))

    def retained_count(self):
        return len(self.saved)

    def release(self):
        if not self._released:
            instrumentation._shrink(len(self.saved))
            self._released = True

    def backward(self, loss):
        """Run reverse-mode accumulation from a scalar loss on this tape.

        Returns a dict mapping tensor id -> gradient ndarray for every leaf
        that received a gradient (parameters and segment inputs).
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.id not in self.output_ids:
            raise TapeError("loss tensor was not produced on this tape")
        return self._backprop(loss, np.ones_like(loss.data))

    def _backprop(self, output, seed_grad):
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")
        self._consumed = True
        grads = {output.id: seed_grad}
        try:
            for node in reversed(self.nodes):
                g = grads.pop(node.output_id, None)
                if g is None:
                    continue
                if node.is_checkpoint:
                    for iid, gi in node.vjp(g).items():
                        _accumulate(grads, iid, gi)
                else:
                    for iid, gi in zip(node.input_ids, node.vjp(g)):
                        if gi is not None:
                            _accumulate(grads, iid, gi)
        finally:
            self.release()
        return grads


def _accumulate(grads, tid, g):
    prev = grads.get(tid)
    grads[tid] = g if prev is None else prev + g


_ACTIVE_TAPE: Tape | None = None


@contextmanager
def recording(tape):
    """Make ``tape`` the active recording target within the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def active_tape():
    return _ACTIVE_TAPE


def backward(tape, loss):
    """Module-level alias for ``tape.backward(loss)``."""
    return tape.backward(loss)


def apply_op(op, inputs, out_data, vjp, retained=()):
    """Create the output tensor of a (possibly fused) op and record it.

    ``vjp(grad_out) -> list`` must return one gradient array (or None) per
    input, in order. ``retained`` lists the tensors whose values the closure
    keeps alive; it feeds the memory accounting.
    """
    if settings.check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor(out_data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(op, inputs, out, vjp, retained=retained)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x, True
    return Tensor(np.asarray(x, dtype=like.data.dtype)), False


def add(a, b):
    b, b_is_tensor = _coerce(b, a)
    out = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape)
        gb = _unbroadcast(g, b.data.shape) if b_is_tensor else None
        return [ga, gb]

    return apply_op("add", (a, b), out, vjp)


def sub(a, b):
    b, b_is_tensor = _coerce(b, a)
    out = a.data - b.data

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape)
        gb = _unbroadcast(-g, b.data.shape) if b_is_tensor else None
        return [ga, gb]

    return apply_op("sub", (a, b), out, vjp)


def mul(a, b):
    b, b_is_tensor = _coerce(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape)
        gb = _unbroadcast(g * ad, bd.shape) if b_is_tensor else None
        return [ga, gb]

    return apply_op("mul", (a, b), out, vjp, retained=(a, b))


def neg(a):
    return apply_op("neg", (a,), -a.data, lambda g: [-g])


def divide_scalar(a, s):
    """a / s with a python scalar, kept as a literal division for exactness."""
    s = float(s)
    out = a.data / s

    def vjp(g):
        return [g / s]

    return apply_op("divide_scalar", (a,), out, vjp)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return [g @ bd.T, ad.T @ g]

    return apply_op("matmul", (a, b), out, vjp, retained=(a, b))


def transpose(a):
    out = np.ascontiguousarray(a.data.T)

    def vjp(g):
        return [np.ascontiguousarray(g.T)]

    return apply_op("transpose", (a,), out, vjp)


def tensor_sum(a):
    out = a.data.sum()
    shape, dt = a.data.shape, a.data.dtype

    def vjp(g):
        return [np.broadcast_to(g, shape).astype(dt, copy=True)]

    return apply_op("sum", (a,), out, vjp)


def tensor_mean(a):
    out = a.data.mean()
    shape, dt, n = a.data.shape, a.data.dtype, a.data.size

    def vjp(g):
        return [np.broadcast_to(g / n, shape).astype(dt, copy=True)]

    return apply_op("mean", (a,), out, vjp)


def gelu(a):
    """x * sigmoid(1.702 x), the sigmoid-approximation form."""
    x = a.data
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-1.702 * x))
    out = x * s

    def vjp(g):
        return [g * (s + 1.702 * x * s * (1.0 - s))]

    return apply_op("gelu", (a,), out, vjp, retained=(a,))


_LN_EPS = 1e-5


def layer_norm(a, gain, bias, eps=_LN_EPS):
    """Row-wise normalization to mean 0 / variance 1, then affine."""
    x = a.data
    if x.ndim != 2:
        raise ValueError(f"layer_norm expects n x d input, got {a.shape}")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data
    d = x.shape[1]

    def vjp(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / d
        )
        return [dx, dgain, dbias]

    return apply_op("layer_norm", (a, gain, bias), out, vjp, retained=(a, gain))


def _as_bool_mask(allowed, shape):
    """Accept a bool matrix or a per-row list of index arrays."""
    if isinstance(allowed, np.ndarray) and allowed.dtype == bool:
        if allowed.shape != shape:
            raise ValueError("mask shape mismatch")
        return allowed
    mask = np.zeros(shape, dtype=bool)
    for i, idx in enumerate(allowed):
        mask[i, np.asarray(idx, dtype=np.int64)] = True
    return mask


def masked_softmax(a, allowed):
    """Row-wise softmax over the allowed entries only.

    Entries outside the allowed set are exactly zero in the output; each row
    is stabilized by subtracting its max over the allowed set. Every row must
    allow at least one entry.
    """
    x = a.data
    if x.ndim != 2:
        raise ValueError(f"masked_softmax expects 2-D logits, got {a.shape}")
    mask = _as_bool_mask(allowed, x.shape)
    row_ok = mask.any(axis=1)
    if not row_ok.all():
        bad = int(np.nonzero(~row_ok)[0][0])
        raise ValueError(f"masked_softmax: row {bad} has an empty allowed set")
    neg_inf = np.array(-np.inf, dtype=x.dtype)
    shifted = np.where(mask, x, neg_inf)
    m = shifted.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.where(mask, np.exp(shifted - m), 0.0)
    z = e.sum(axis=1, keepdims=True)
    p = e / z

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return [p * (g - dot)]

    return apply_op("masked_softmax", (a,), p, vjp, retained=(a,))


def dropout(a, rate, seed):
    """Inverted dropout with an explicit per-call seed.

    The seed makes the mask reproducible when a checkpointed segment replays
    the op during backward.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return apply_op("dropout", (a,), a.data.copy(), lambda g: [g])
    rng = np.random.Generator(np.random.Philox(seed))
    keep = rng.random(a.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep.astype(a.data.dtype) * scale
    out = a.data * mask

    def vjp(g):
        return [g * mask]

    return apply_op("dropout", (a,), out, vjp)


def gather_rows(w, idx):
    """w[idx] for an integer index vector; gradient scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= w.shape[0]):
        raise IndexError(
            f"gather index out of range [0, {w.shape[0]}): "
            f"[{idx.min()}, {idx.max()}]"
        )
    out = w.data[idx]
    wshape, wdtype = w.data.shape, w.data.dtype

    def vjp(g):
        gw = np.zeros(wshape, dtype=wdtype)
        np.add.at(gw, idx, g)
        return [gw]

    return apply_op("gather_rows", (w,), out, vjp)


def slice_cols(a, j0, j1):
    out = np.ascontiguousarray(a.data[:, j0:j1])
    shape, dt = a.data.shape, a.data.dtype

    def vjp(g):
        ga = np.zeros(shape, dtype=dt)
        ga[:, j0:j1] = g
        return [ga]

    return apply_op("slice_cols", (a,), out, vjp)


def concat_cols(parts):
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def vjp(g):
        outs = []
        j = 0
        for w in widths:
            outs.append(np.ascontiguousarray(g[:, j : j + w]))
            j += w
        return outs

    return apply_op("concat_cols", tuple(parts), out, vjp)


def checkpoint_segment(f, *inputs):
    """Run ``f(*inputs)`` without retaining its internal activations.

    The forward value is computed with recording suspended; a single tape node
    holds only the segment inputs. During backward the segment is re-executed
    on a fresh local tape, differentiated, and its leaf gradients (segment
    inputs and any parameters closed over by ``f``) are merged into the outer
    accumulation. ``f`` must be deterministic given its inputs; ops with
    randomness must carry an explicit seed. In deterministic mode a replay
    that fails to reproduce the stored output bitwise is rejected.
    """
    global _ACTIVE_TAPE
    tape = _ACTIVE_TAPE
    if tape is None:
        return f(*inputs)

    _ACTIVE_TAPE = None
    try:
        out = f(*inputs)
    finally:
        _ACTIVE_TAPE = tape
    out_data = out.data

    def vjp_multi(g):
        local = Tape()
        with recording(local):
            replay = f(*inputs)
        if settings.deterministic and not np.array_equal(replay.data, out_data):
            local.release()
            raise CheckpointReplayError(
                "segment replay does not match its recorded forward output; "
                "the segment function is not deterministic"
            )
        return local._backprop(replay, g)

    if settings.check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("checkpoint segment produced non-finite values")
    result = Tensor(out_data)
    tape.record(
        "checkpoint", inputs, result, vjp_multi, retained=inputs, is_checkpoint=True
    )
    return result


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function, as a test oracle.

    ``f`` receives a Tensor and must return a scalar Tensor; it runs with
    recording suspended. Intended for float64 inputs.
    """
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        base = x.data.astype(np.float64, copy=True)
        grad = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(Tensor(base)).data)
            flat[i] = orig - eps
            f_minus = float(f(Tensor(base)).data)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        return grad
    finally:
        _ACTIVE_TAPE = prev
