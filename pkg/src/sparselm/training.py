"""Optimization loop, schedules, evaluation protocols, and sampling.

The optimizer is bias-corrected Adam with decoupled weight decay, a linear
warmup into a cosine decay, and global-norm gradient clipping. Training
iterates contiguous byte windows reshuffled each epoch from a named seed
stream; with the deterministic flag the whole run (parameters and the metrics
log) is bitwise reproducible from (seed, config, corpus). In deterministic
mode the metrics' wall_ms field is written as 0.0 so the log itself is
reproducible; timings go to the optional progress callback instead.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from sparselm import seeding
from sparselm.model import (
    Model,
    ModelConfig,
    ModelParams,
    init_params,
    loss_bits_per_byte,
)
from sparselm.serialization import load_checkpoint, save_checkpoint
from sparselm.tensor import NonFiniteError, Tape, Tensor, recording, settings

__all__ = [
    "TrainConfig",
    "OptState",
    "lr_schedule",
    "global_grad_norm",
    "clip_gradients",
    "adam_step",
    "train",
    "evaluate_min_context",
    "bits_per_position",
    "sample",
    "make_periodic_corpus",
    "CorpusError",
]


class CorpusError(ValueError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 0.00035
    warmup_steps: int = 5000
    total_steps: int = 10000
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    dropout: float | None = None  # None: use the model config's rate
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must be <= total_steps")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class OptState:
    """Adam moment tensors and the step counter, keyed by parameter name."""

    def __init__(self, m, v, step=0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def init_for(cls, params):
        m = {name: np.zeros_like(t.data) for name, t in params.items()}
        v = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(m, v, step=0)


def lr_schedule(step, cfg):
    """Linear warmup to the peak, then cosine decay to zero at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps and cfg.warmup_steps > 0:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.peak_lr
    frac = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_grad_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(grads, max_norm, norm=None):
    """Scale all gradients by max_norm/norm when the global norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if norm is None:
        norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return grads


def adam_step(params, grads, state, lr, cfg):
    """One bias-corrected Adam update with decoupled weight decay.

    param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param).
    Rejects the step if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{name}'; step rejected")
    state.step += 1
    t = state.step
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p = params[name].data
        update = m_hat / (np.sqrt(v_hat) + eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)
    return params, state


def _as_corpus(data):
    arr = np.asarray(bytearray(data) if isinstance(data, (bytes, bytearray)) else data)
    return arr.astype(np.uint8, copy=False)


def _check_corpus(corpus, n_ctx):
    if corpus.size < n_ctx + 1:
        raise CorpusError(
            f"corpus too small: {corpus.size} bytes < context {n_ctx} + 1"
        )


def make_periodic_corpus(length, period, seed=0):
    """Synthetic byte stream repeating one random block of ``period`` bytes."""
    rng = seeding.generator(seed, "batch", period)
    block = rng.integers(0, 256, size=period, dtype=np.uint8)
    reps = -(-length // period)
    return np.tile(block, reps)[:length]


def _train_step(model, windows, step, cfg, mcfg):
    """Forward/backward over one batch of windows; returns (grads, mean bpb)."""
    rate = mcfg.dropout if cfg.dropout is None else cfg.dropout
    grad_sum = None
    bpb_sum = 0.0
    for w in windows:
        tape = Tape()
        with recording(tape):
            logits = model.forward(
                w, dropout_rate=rate, drop_ctx=(cfg.seed, step) if rate > 0 else None
            )
            loss = loss_bits_per_byte(logits, w)
        bpb = float(loss.data)
        if not math.isfinite(bpb):
            raise NonFiniteError(
                f"loss is {bpb} at step {step}; aborting (check the learning "
                f"rate and initialization)"
            )
        bpb_sum += bpb
        gmap = tape.backward(loss)
        named = model.params.grads_by_name(gmap)
        if grad_sum is None:
            grad_sum = named
        else:
            for name, g in named.items():
                grad_sum[name] = grad_sum[name] + g
    scale = 1.0 / len(windows)
    for name in grad_sum:
        grad_sum[name] = grad_sum[name] * scale
    return grad_sum, bpb_sum * scale


def _batch_windows(corpus, n, n_windows, cfg, step, cache):
    """Window starts for one step; a pure function of (seed, step).

    Epoch permutations are derived from the step index alone, so a resumed
    run consumes exactly the batch stream the uninterrupted run would have.
    """
    steps_per_epoch = n_windows // cfg.batch_size
    epoch = step // steps_per_epoch
    slot = step % steps_per_epoch
    if cache.get("epoch") != epoch:
        cache["epoch"] = epoch
        cache["order"] = seeding.generator(
            cfg.seed, "batch", epoch
        ).permutation(n_windows)
    picks = cache["order"][slot * cfg.batch_size : (slot + 1) * cfg.batch_size]
    return [corpus[s * n : s * n + n].astype(np.int64) for s in picks]


def train(
    model_cfg,
    train_cfg,
    corpus,
    out_dir=None,
    params=None,
    state=None,
    progress=None,
):
    """Full training run; returns (model, opt state, metrics list).

    Writes ``metrics.jsonl`` and ``checkpoint.bin`` under ``out_dir`` when
    given. ``progress`` is an optional callable receiving each metrics record
    (plus real wall time) for live reporting. Passing ``params`` and ``state``
    from a saved checkpoint resumes at ``state.step`` and reproduces the
    uninterrupted run bit for bit.
    """
    corpus = _as_corpus(corpus)
    _check_corpus(corpus, model_cfg.n_ctx)
    settings.deterministic = train_cfg.deterministic

    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    model = Model(model_cfg, params)
    if state is None:
        state = OptState.init_for(params)

    n = model_cfg.n_ctx
    n_windows = corpus.size // n
    if n_windows < train_cfg.batch_size:
        raise CorpusError(
            f"corpus too small: {n_windows} window(s) of {n} bytes cannot "
            f"fill a batch of {train_cfg.batch_size}"
        )

    metrics = []
    out_dir = None if out_dir is None else _ensure_dir(out_dir)
    metrics_fh = None
    if out_dir is not None:
        mode = "a" if state.step else "w"
        metrics_fh = open(out_dir / "metrics.jsonl", mode)
    cache = {}

    try:
        for step in range(state.step, train_cfg.total_steps):
            windows = _batch_windows(corpus, n, n_windows, train_cfg, step, cache)

            t0 = time.perf_counter()
            grads, bpb = _train_step(model, windows, step, train_cfg, model_cfg)
            norm = global_grad_norm(grads)
            clip_gradients(grads, train_cfg.clip_norm, norm=norm)
            lr = lr_schedule(step, train_cfg)
            adam_step(params, grads, state, lr, train_cfg)
            wall_ms = (time.perf_counter() - t0) * 1e3

            rec = {
                "step": step + 1,
                "lr": lr,
                "bpb": bpb,
                "grad_norm": norm,
                "wall_ms": 0.0 if train_cfg.deterministic else wall_ms,
            }
            metrics.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(_json_line(rec))
            if progress is not None:
                progress({**rec, "wall_ms": wall_ms})

            if (
                out_dir is not None
                and train_cfg.checkpoint_every
                and (step + 1) % train_cfg.checkpoint_every == 0
            ):
                save_run_checkpoint(
                    out_dir / f"checkpoint-{step + 1}.bin", model_cfg,
                    train_cfg, params, state,
                )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out_dir is not None:
        save_run_checkpoint(
            out_dir / "checkpoint.bin", model_cfg, train_cfg, params, state
        )
    return model, state, metrics


def _json_line(rec):
    return json.dumps(rec, sort_keys=True) + "\n"


def _ensure_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def save_run_checkpoint(path, model_cfg, train_cfg, params, state=None):
    meta = {
        "kind": "sparselm-run",
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "step": 0 if state is None else state.step,
    }
    tensors = dict(params.arrays())
    if state is not None:
        for name, arr in state.m.items():
            tensors[f"opt.m.{name}"] = arr
        for name, arr in state.v.items():
            tensors[f"opt.v.{name}"] = arr
    save_checkpoint(path, meta, tensors)


def load_run_checkpoint(path):
    """Rebuild (model config, train config, params, opt state) from a file."""
    meta, tensors = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(meta["model"])
    train_cfg = TrainConfig.from_dict(meta["train"])
    params = ModelParams(
        {
            name: Tensor(arr)
            for name, arr in tensors.items()
            if not name.startswith("opt.")
        }
    )
    m = {
        name[len("opt.m.") :]: arr
        for name, arr in tensors.items()
        if name.startswith("opt.m.")
    }
    v = {
        name[len("opt.v.") :]: arr
        for name, arr in tensors.items()
        if name.startswith("opt.v.")
    }
    state = OptState(m, v, step=meta.get("step", 0)) if m else None
    return model_cfg, train_cfg, params, state


def bits_per_position(logits_data, targets):
    """-log2 p(target) per position, computed outside the tape."""
    x = np.asarray(logits_data, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    m = x.max(axis=1)
    z = np.exp(x - m[:, None]).sum(axis=1)
    picked = x[np.arange(x.shape[0]), targets]
    return m / math.log(2.0) + np.log2(z) - picked / math.log(2.0)


def evaluate_min_context(model, data, min_context=0):
    """Mean bits per byte, scoring only positions with enough left context.

    Windows of the model's context length slide with stride
    (context - min_context); each window scores its last (context -
    min_context) positions, so every scored position saw at least
    ``min_context`` tokens of context. min_context=0 reproduces plain
    non-overlapping evaluation.
    """
    data = _as_corpus(data)
    n = model.config.n_ctx
    if not 0 <= min_context < n:
        raise ValueError(f"min_context must be in [0, {n}), got {min_context}")
    if data.size < n:
        raise CorpusError(f"need at least {n} bytes to evaluate, got {data.size}")
    stride = n - min_context
    total_bits = 0.0
    count = 0
    for s in range(0, data.size - n + 1, stride):
        window = data[s : s + n].astype(np.int64)
        logits = model.forward(window, dropout_rate=0.0)
        bits = bits_per_position(logits.data, window)
        scored = bits[min_context:]
        total_bits += float(scored.sum())
        count += scored.size
    if count == 0:
        raise CorpusError("no positions scored; data shorter than one window")
    return total_bits / count


def sample(model, length, temperature=1.0, seed=0):
    """Autoregressive byte sampling; temperature 0 is greedy argmax.

    Recomputes a full forward per emitted byte (no key/value cache). The
    window is padded to the context length; causality makes the padding
    inert. Same (seed, temperature) gives the same bytes.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    n = model.config.n_ctx
    if not 1 <= length <= n:
        raise ValueError(f"length must be in [1, {n}], got {length}")
    rng = seeding.generator(seed, "sample")
    window = np.zeros(n, dtype=np.int64)
    out = np.empty(length, dtype=np.uint8)
    for t in range(length):
        logits = model.forward(window, dropout_rate=0.0)
        row = logits.data[t].astype(np.float64)
        if temperature == 0.0:
            pick = int(np.argmax(row))
        else:
            row = row / temperature
            row -= row.max()
            p = np.exp(row)
            p /= p.sum()
            pick = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
            pick = min(pick, p.size - 1)
        out[t] = pick
        window[t] = pick
    return out
