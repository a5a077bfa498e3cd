"""The residual attention network over raw bytes.

Pre-activation residual blocks: each block adds an attention branch and a
feed-forward branch to a pure additive trunk, with layer normalization applied
to branch inputs. Position information enters once, at the embedding, either
from data coordinates (row, column, channel of an image byte) or from the
(i // l, i % l) coordinates induced by the attention stride. The output head
is a zero-initialized d x vocab matrix, so a fresh model predicts the uniform
distribution (8 bits per byte at vocab 256).

Input convention: ``forward(tokens)`` scores tokens[i] at position i; the
network consumes a BOS byte 0 followed by tokens[:-1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from sparselm import seeding
from sparselm.attention import (
    AttentionParams,
    HeadStrategy,
    LayoutCache,
    allowed_mask,
    apply_head_strategy,
    dense_attention,
    sparse_attention,
)
from sparselm.patterns import (
    fixed_pattern,
    full_pattern,
    local_only_pattern,
    strided_pattern,
)
from sparselm.tensor import (
    Tensor,
    add,
    apply_op,
    checkpoint_segment,
    dropout,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
)

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Model",
    "init_params",
    "embed",
    "resblock",
    "forward",
    "loss_bits_per_byte",
    "build_pattern",
]

BOS_BYTE = 0


@dataclass
class ModelConfig:
    n_layers: int
    d: int
    n_h: int
    n_ctx: int
    vocab: int = 256
    pattern_kind: str = "strided"  # strided | fixed | full | local_only
    stride: int | None = None
    summary: int | None = None  # fixed-pattern summary width c
    head_strategy: str = "interleaved"
    pos_mode: str = "attention"  # attention | data
    data_shape: tuple[int, int, int] | None = None
    ff_mult: float = 4.0
    dropout: float = 0.0
    half_qk: bool = False
    block: int = 32
    checkpoint: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        if self.ff_mult not in (2.0, 4.0):
            raise ValueError("ff_mult must be 2.0 or 4.0")
        if self.d % self.n_h != 0:
            raise ValueError(f"d={self.d} not divisible by n_h={self.n_h}")
        if self.pattern_kind in ("strided", "fixed", "local_only"):
            if self.stride is None:
                raise ValueError(f"{self.pattern_kind} pattern needs a stride")
        if self.pattern_kind == "fixed" and self.summary is None:
            raise ValueError("fixed pattern needs a summary width")
        if self.pos_mode == "attention" and self.stride is None:
            raise ValueError("attention-mode positions need a stride")
        if self.pos_mode == "data":
            if self.data_shape is None:
                raise ValueError("data-mode positions need data_shape")
            if int(np.prod(self.data_shape)) < self.n_ctx:
                raise ValueError("data_shape too small for the context length")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.half_qk and (self.d // self.n_h) % 2 != 0:
            raise ValueError("half_qk needs an even head dim")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def n_emb(self):
        return 3 if self.pos_mode == "data" else 2

    @property
    def ff_dim(self):
        return int(self.ff_mult * self.d)

    @property
    def qk_width(self):
        w = self.d // (2 if self.half_qk else 1)
        return w

    def pos_table_sizes(self):
        if self.pos_mode == "data":
            return tuple(int(s) for s in self.data_shape)
        return (-(-self.n_ctx // self.stride), self.stride)

    def position_coords(self, length):
        """Per-position coordinate indices into each positional table."""
        i = np.arange(length, dtype=np.int64)
        if self.pos_mode == "data":
            rows_n, cols_n, ch_n = self.data_shape
            ch = i % ch_n
            pix = i // ch_n
            col = pix % cols_n
            row = pix // cols_n
            if row.max(initial=0) >= rows_n:
                raise ValueError("sequence exceeds the data grid")
            return [row, col, ch]
        return [i // self.stride, i % self.stride]

    def to_dict(self):
        out = asdict(self)
        if out["data_shape"] is not None:
            out["data_shape"] = list(out["data_shape"])
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("data_shape") is not None:
            d["data_shape"] = tuple(d["data_shape"])
        return cls(**d)


def build_pattern(config):
    kind = config.pattern_kind
    if kind == "strided":
        return strided_pattern(config.n_ctx, config.stride)
    if kind == "fixed":
        return fixed_pattern(config.n_ctx, config.stride, config.summary)
    if kind == "full":
        return full_pattern(config.n_ctx)
    if kind == "local_only":
        return local_only_pattern(config.n_ctx, config.stride)
    raise ValueError(f"unknown pattern kind '{kind}'")


class ModelParams:
    """Named parameter tensors in a fixed, checkpoint-stable order."""

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def arrays(self):
        return {name: t.data for name, t in self._tensors.items()}

    def grads_by_name(self, grad_map):
        """Map a tape gradient dict (by tensor id) to parameter names."""
        return {
            name: grad_map[t.id]
            for name, t in self._tensors.items()
            if t.id in grad_map
        }

    def attention_params(self, layer, n_h):
        pref = f"layer{layer}.attn."
        return AttentionParams(
            w_q=self[pref + "w_q"],
            w_k=self[pref + "w_k"],
            w_v=self[pref + "w_v"],
            w_p=self[pref + "w_p"],
            n_h=n_h,
        )


def init_params(config, rng_seed):
    """Draw all weights for one model.

    Token embedding N(0, 0.125/sqrt(d)); positional tables
    N(0, 0.125/sqrt(d * n_emb)); attention/feed-forward weights
    N(0, 0.125/sqrt(fan_in)) with the second feed-forward matrix and the
    post-attention matrix additionally scaled by 1/sqrt(2 N); biases and the
    output matrix start at zero. The same seed reproduces the same bits.
    """
    rng = seeding.generator(rng_seed, "init")
    dt = config.np_dtype
    d, v = config.d, config.vocab
    resid_scale = 1.0 / math.sqrt(2 * config.n_layers)

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dt))

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dt))

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dt))

    tensors = {}
    tensors["w_e"] = normal((v, d), 0.125 / math.sqrt(d))
    pos_std = 0.125 / math.sqrt(d * config.n_emb)
    for j, size in enumerate(config.pos_table_sizes()):
        tensors[f"pos_{j}"] = normal((size, d), pos_std)
    fan_d = 0.125 / math.sqrt(d)
    for layer in range(config.n_layers):
        pref = f"layer{layer}."
        tensors[pref + "norm1.gain"] = ones(d)
        tensors[pref + "norm1.bias"] = zeros(d)
        tensors[pref + "attn.w_q"] = normal((d, config.qk_width), fan_d)
        tensors[pref + "attn.w_k"] = normal((d, config.qk_width), fan_d)
        tensors[pref + "attn.w_v"] = normal((d, d), fan_d)
        tensors[pref + "attn.w_p"] = normal((d, d), fan_d * resid_scale)
        tensors[pref + "norm2.gain"] = ones(d)
        tensors[pref + "norm2.bias"] = zeros(d)
        tensors[pref + "ff.w_1"] = normal((d, config.ff_dim), fan_d)
        tensors[pref + "ff.b_1"] = zeros(config.ff_dim)
        tensors[pref + "ff.w_2"] = normal(
            (config.ff_dim, d), 0.125 / math.sqrt(config.ff_dim) * resid_scale
        )
        tensors[pref + "ff.b_2"] = zeros(d)
    tensors["final_norm.gain"] = ones(d)
    tensors["final_norm.bias"] = zeros(d)
    tensors["w_out"] = zeros((d, v))
    return ModelParams(tensors)


def embed(tokens, params, config):
    """Token embedding plus every positional embedding, per position."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
        raise ValueError(
            f"token out of range [0, {config.vocab}): "
            f"[{tokens.min()}, {tokens.max()}]"
        )
    if tokens.size > config.n_ctx:
        raise ValueError(
            f"sequence length {tokens.size} exceeds context {config.n_ctx}"
        )
    h = gather_rows(params["w_e"], tokens)
    for j, coords in enumerate(config.position_coords(tokens.size)):
        h = add(h, gather_rows(params[f"pos_{j}"], coords))
    return h


def _ff(x, params, pref):
    hidden = gelu(add(matmul(x, params[pref + "ff.w_1"]), params[pref + "ff.b_1"]))
    return add(matmul(hidden, params[pref + "ff.w_2"]), params[pref + "ff.b_2"])


def resblock(
    h,
    params,
    config,
    layer,
    attend,
    drop_rate=0.0,
    drop_seeds=None,
    return_branches=False,
):
    """One pre-activation residual block: H + a(H) + b(H).

    ``attend`` maps the normalized input to the attention output for this
    layer (dense or sparse; the head strategy is already bound). Dropout is
    applied only at the two branch outputs.
    """
    pref = f"layer{layer}."
    a = attend(layer_norm(h, params[pref + "norm1.gain"], params[pref + "norm1.bias"]))
    if drop_rate > 0.0:
        a = dropout(a, drop_rate, drop_seeds[0])
    ha = add(h, a)
    b = _ff(
        layer_norm(ha, params[pref + "norm2.gain"], params[pref + "norm2.bias"]),
        params,
        pref,
    )
    if drop_rate > 0.0:
        b = dropout(b, drop_rate, drop_seeds[1])
    out = add(ha, b)
    if return_branches:
        return out, a, b
    return out


class Model:
    """Config + params + compiled layouts, with the forward conveniences."""

    def __init__(self, config, params, use_sparse=True, kernel_impl=None):
        self.config = config
        self.params = params
        self.pattern = build_pattern(config)
        self.strategy = HeadStrategy(config.head_strategy, self.pattern)
        self.layouts = LayoutCache(block=config.block)
        self.use_sparse = use_sparse
        self.kernel_impl = kernel_impl
        self._masks = {}
        # selectors only depend on layer index mod p
        self._selectors = {
            r: apply_head_strategy(r, self.strategy, config.n_h)
            for r in range(min(config.n_layers, self.pattern.p))
        }

    def _layer_selectors(self, layer):
        return self._selectors[layer % self.pattern.p]

    def _dense_masks(self, layer, n):
        key = (layer % self.pattern.p, n)
        masks = self._masks.get(key)
        if masks is None:
            masks = [
                allowed_mask(pat, head, n)
                for pat, head in self._layer_selectors(layer)
            ]
            self._masks[key] = masks
        return masks

    def _attend_fn(self, layer, n):
        ap = self.params.attention_params(layer, self.config.n_h)
        if self.use_sparse and n == self.config.n_ctx:
            layouts = self.layouts.layouts_for(self._layer_selectors(layer))
            return lambda x: sparse_attention(x, ap, layouts, impl=self.kernel_impl)
        # short windows (partial-context evaluation) go through the dense path
        masks = self._dense_masks(layer, n)
        return lambda x: dense_attention(x, ap, masks)

    def forward(
        self, tokens, dropout_rate=None, drop_ctx=None, collect=None, embedding=None
    ):
        return forward(
            tokens,
            self.params,
            self.config,
            model=self,
            dropout_rate=dropout_rate,
            drop_ctx=drop_ctx,
            collect=collect,
            embedding=embedding,
        )


def forward(
    tokens,
    params,
    config,
    model=None,
    dropout_rate=None,
    drop_ctx=None,
    collect=None,
    embedding=None,
):
    """Logits for each position of a token window.

    Consumes BOS + tokens[:-1]; logits at position i score tokens[i], so the
    output depends only on strictly earlier tokens. ``drop_ctx`` is a
    (base_seed, step) pair required whenever the dropout rate is nonzero.
    ``collect``, when a list, receives (H_0, [(a, b) per layer], H_N) for
    introspection; it disables checkpointing. ``embedding`` substitutes a
    precomputed H_0 tensor (the embedding-level Jacobian tests differentiate
    with respect to it).
    """
    if model is None:
        model = Model(config, params)
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    if n < 1:
        raise ValueError("empty token window")
    rate = config.dropout if dropout_rate is None else dropout_rate
    if rate > 0.0 and drop_ctx is None:
        raise ValueError("nonzero dropout needs a (seed, step) context")

    if embedding is None:
        inputs = np.concatenate(([BOS_BYTE], tokens[:-1]))
        h = embed(inputs, params, config)
    else:
        if embedding.shape != (n, config.d):
            raise ValueError("embedding shape does not match the token window")
        h = embedding
    h0 = h
    branches = []
    for layer in range(config.n_layers):
        attend = model._attend_fn(layer, n)
        if rate > 0.0:
            base_seed, step = drop_ctx
            seeds = (
                seeding.stream_key(base_seed, "dropout", step, layer, 0),
                seeding.stream_key(base_seed, "dropout", step, layer, 1),
            )
        else:
            seeds = None

        if collect is not None:
            h, a, b = resblock(
                h, params, config, layer, attend, rate, seeds, return_branches=True
            )
            branches.append((a, b))
        elif config.checkpoint:
            h = checkpoint_segment(
                lambda x, _l=layer, _at=attend, _s=seeds: resblock(
                    x, params, config, _l, _at, rate, _s
                ),
                h,
            )
        else:
            h = resblock(h, params, config, layer, attend, rate, seeds)

    normed = layer_norm(h, params["final_norm.gain"], params["final_norm.bias"])
    logits = matmul(normed, params["w_out"])
    if collect is not None:
        collect.extend([h0, branches, h])
    return logits


_LN2 = math.log(2.0)


def loss_bits_per_byte(logits, targets):
    """Mean -log2 p(target) over positions, as one fused differentiable op.

    The log-sum-exp path is stabilized by max subtraction, and the denominator
    enters through log2 so a uniform distribution over 2^k symbols scores
    exactly k bits.
    """
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    n, v = x.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError("target out of vocabulary range")
    m = x.max(axis=1)
    e = np.exp(x - m[:, None])
    z = e.sum(axis=1)
    picked = x[np.arange(n), targets]
    bits = m / _LN2 + np.log2(z) - picked / _LN2
    out = np.asarray(bits.mean(), dtype=x.dtype)

    def vjp(g):
        p = e / z[:, None]
        p[np.arange(n), targets] -= 1.0
        return [p * (float(g) / (n * _LN2))]

    return apply_op("loss_bits_per_byte", (logits,), out, vjp, retained=(logits,))
