"""Flat JSON run configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .blocks import VARIANTS, BlockConfig, ConfigError
from .model import ModelConfig
from .train import TrainConfig

MODEL_KEYS = ("vocab_size", "n_layers", "max_seq_len", "tie_embeddings")
BLOCK_KEYS = ("d_model", "n_heads", "expansion", "rope_theta", "ffn_mult", "eps")
TRAIN_KEYS = (
    "lr_max", "steps", "effective_batch", "micro_batch", "warmup_steps",
    "lr_min", "weight_decay", "beta1", "beta2", "adam_eps",
)
OTHER_KEYS = ("variant", "lora_rank", "seed", "corpus_path", "checkpoint_path", "out_dir", "base_params")
KNOWN_KEYS = frozenset(MODEL_KEYS + BLOCK_KEYS + TRAIN_KEYS + OTHER_KEYS)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    variant: str = "baseline"
    seed: int = 0
    corpus_path: str | None = None
    checkpoint_path: str | None = None
    out_dir: str | None = None
    base_params: int | None = None


def build_run_config(flat: dict) -> RunConfig:
    """Turn a flat key dict into a validated :class:`RunConfig`.

    Unknown keys are rejected so typos fail loudly.
    """
    unknown = sorted(set(flat) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    variant = flat.get("variant", "baseline")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    try:
        block_kw = {k: flat[k] for k in BLOCK_KEYS if k in flat}
        if "expansion" in block_kw:
            block_kw["expansion"] = Fraction(str(block_kw["expansion"]))
        block = BlockConfig(**block_kw).with_variant(variant, flat.get("lora_rank"))
        model = ModelConfig(block=block, **{k: flat[k] for k in MODEL_KEYS if k in flat})
        train_kw = {k: flat[k] for k in TRAIN_KEYS if k in flat and not k.startswith("beta")}
        if "beta1" in flat or "beta2" in flat:
            train_kw["betas"] = (flat.get("beta1", 0.9), flat.get("beta2", 0.999))
        seed = int(flat.get("seed", 0))
        train = TrainConfig(seed=seed, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        model=model,
        train=train,
        variant=variant,
        seed=seed,
        corpus_path=flat.get("corpus_path"),
        checkpoint_path=flat.get("checkpoint_path"),
        out_dir=flat.get("out_dir"),
        base_params=flat.get("base_params"),
    )


def load_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data
