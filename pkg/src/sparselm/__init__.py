"""Factorized sparse attention and byte-level autoregressive modeling on CPU."""

from sparselm.tensor import (
    CheckpointReplayError,
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    backward,
    checkpoint_segment,
    finite_diff_grad,
    recording,
    settings,
)
from sparselm.patterns import (
    FactorizedPattern,
    ValidityReport,
    fixed_pattern,
    full_pattern,
    local_only_pattern,
    merge_heads,
    parse_pattern_spec,
    pattern_stats,
    render_pattern,
    strided_pattern,
    verify_validity,
)
from sparselm.layout import BlockSparseLayout, compile_block_layout
from sparselm.attention import (
    AttentionParams,
    HeadStrategy,
    apply_head_strategy,
    dense_attention,
    sparse_attention,
)
from sparselm.model import (
    Model,
    ModelConfig,
    ModelParams,
    embed,
    forward,
    init_params,
    loss_bits_per_byte,
    resblock,
)
from sparselm.training import (
    OptState,
    TrainConfig,
    adam_step,
    clip_gradients,
    evaluate_min_context,
    lr_schedule,
    sample,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "NonFiniteError",
    "CheckpointReplayError",
    "backward",
    "checkpoint_segment",
    "finite_diff_grad",
    "recording",
    "settings",
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
    "BlockSparseLayout",
    "compile_block_layout",
    "AttentionParams",
    "HeadStrategy",
    "apply_head_strategy",
    "dense_attention",
    "sparse_attention",
    "Model",
    "ModelConfig",
    "ModelParams",
    "embed",
    "forward",
    "init_params",
    "loss_bits_per_byte",
    "resblock",
    "TrainConfig",
    "OptState",
    "lr_schedule",
    "clip_gradients",
    "adam_step",
    "train",
    "evaluate_min_context",
    "sample",
    "__version__",
]
