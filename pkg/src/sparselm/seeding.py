"""Named random streams derived from one base seed.

Every source of randomness in a run (parameter init, dropout masks, batch
shuffling, sampling) pulls from its own stream so that changing one consumer
never perturbs the others. Streams are keyed by a fixed name and optional
integer qualifiers (step, layer, call site), which makes per-call dropout
seeds reproducible under checkpointed recomputation.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"init": 0, "dropout": 1, "batch": 2, "sample": 3}


def stream_key(base_seed, name, *qualifiers):
    """Integer key list identifying one stream draw."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream '{name}' (have {sorted(STREAMS)})")
    return [int(base_seed), STREAMS[name], *(int(q) for q in qualifiers)]


def generator(base_seed, name, *qualifiers):
    """Philox generator for the given stream; same arguments, same bits."""
    key = stream_key(base_seed, name, *qualifiers)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
