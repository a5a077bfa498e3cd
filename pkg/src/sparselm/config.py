"""Run configuration files: JSON with model/train/pattern sections.

Unknown keys are rejected rather than ignored so typos fail loudly, and the
resolved configuration is echoed into the run directory for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from sparselm.model import ModelConfig
from sparselm.training import TrainConfig

__all__ = ["ConfigError", "load_run_config", "resolve_run_config", "echo_config"]


class ConfigError(ValueError):
    pass


_SECTIONS = ("model", "train", "pattern")

_PATTERN_KEYS = {"kind": "pattern_kind", "l": "stride", "c": "summary", "n": "n_ctx"}


def _known_fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section, given, known):
    unknown = set(given) - known
    if unknown:
        raise ConfigError(
            f"unknown key(s) in '{section}' section: {sorted(unknown)} "
            f"(known: {sorted(known)})"
        )


def load_run_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys("top-level", raw, set(_SECTIONS))
    return raw


def resolve_run_config(raw, pattern_spec=None, seed=None, deterministic=None):
    """Merge file sections and command-line overrides into config objects.

    The optional pattern section (and the --pattern override, which wins)
    holds {kind, n, l, c} and maps onto the model's pattern fields.
    """
    model_kwargs = dict(raw.get("model", {}))
    train_kwargs = dict(raw.get("train", {}))
    pattern = dict(raw.get("pattern", {}))
    _check_keys("pattern", pattern, set(_PATTERN_KEYS))

    if pattern_spec is not None:
        pattern = _pattern_section_from_spec(pattern_spec)
    for key, field in _PATTERN_KEYS.items():
        if key in pattern:
            model_kwargs[field] = pattern[key]
    if seed is not None:
        train_kwargs["seed"] = seed
    if deterministic is not None:
        train_kwargs["deterministic"] = deterministic

    _check_keys("model", model_kwargs, _known_fields(ModelConfig))
    _check_keys("train", train_kwargs, _known_fields(TrainConfig))
    try:
        model_cfg = ModelConfig.from_dict(model_kwargs)
        train_cfg = TrainConfig.from_dict(train_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return model_cfg, train_cfg


def _pattern_section_from_spec(spec):
    parts = spec.split(":")
    kind = {"local": "local_only"}.get(parts[0], parts[0])
    try:
        nums = [int(x) for x in parts[1:]]
    except ValueError as exc:
        raise ConfigError(f"malformed pattern spec '{spec}'") from exc
    section = {"kind": kind}
    if len(nums) >= 1:
        section["n"] = nums[0]
    if len(nums) >= 2:
        section["l"] = nums[1]
    if len(nums) >= 3:
        section["c"] = nums[2]
    return section


def echo_config(out_dir, model_cfg, train_cfg):
    """Write the fully resolved configuration next to the run's artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    with open(path, "w") as fh:
        json.dump(
            {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return path
