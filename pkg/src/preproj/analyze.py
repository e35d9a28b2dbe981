"""Parameter accounting, KV-cache footprint, skip norms, perplexity."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .model import ModelConfig, is_injected, model_forward, param_shapes
from .tensor import Tensor, cross_entropy
from .train import corpus_windows


@dataclass(frozen=True)
class ParamReport:
    base_params: int
    preproj_params: int
    skip_params: int
    lora_params: int
    total_new: int
    overhead_pct: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def base_param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for n, s in param_shapes(cfg).items() if not is_injected(n))


def count_params(cfg: ModelConfig, variant: str | None = None, base_params: int | None = None) -> ParamReport:
    """Closed-form injected-parameter counts.

    ``overhead_pct`` is the new parameters' share of the grown model,
    ``total_new / (base + total_new)``. ``base_params`` defaults to this
    model's own non-injected count.
    """
    if variant is not None:
        cfg = cfg.with_variant(variant)
    b = cfg.block
    d, L = b.d_model, cfg.n_layers
    preproj = 2 * d * b.preproj_hidden * L if b.use_preproj else 0
    skip = d * d * L if b.use_skip else 0
    # fused QKV (d -> 3d) and output projection (d -> d)
    lora = b.lora_rank * ((d + 3 * d) + (d + d)) * L
    total = preproj + skip + lora
    base = base_param_count(cfg) if base_params is None else int(base_params)
    overhead = 100.0 * total / (base + total) if base + total else 0.0
    return ParamReport(base, preproj, skip, lora, total, overhead)


def param_census(cfg: ModelConfig) -> dict[str, int]:
    """Injected scalars actually instantiated, grouped like :class:`ParamReport`."""
    out = {"preproj": 0, "skip": 0, "lora": 0}
    for name, shape in param_shapes(cfg).items():
        local = name.rsplit(".", 1)[-1]
        if local in ("W_up", "W_down"):
            out["preproj"] += math.prod(shape)
        elif local == "W_skip":
            out["skip"] += math.prod(shape)
        elif local.startswith("lora_"):
            out["lora"] += math.prod(shape)
    return out


def kv_cache_footprint(cfg: ModelConfig, variant: str | None = None, seq_len: int = 0) -> int:
    """Cached K+V scalars for ``seq_len`` tokens.

    Depends only on layer count, head count and head size. ``variant`` is
    accepted to make that independence explicit at call sites.
    """
    if variant is not None:
        cfg = cfg.with_variant(variant)
    b = cfg.block
    return seq_len * cfg.n_layers * 2 * b.n_heads * b.head_dim


@dataclass(frozen=True)
class SkipNormReport:
    norms: tuple[tuple[int, float], ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "skip_frobenius_norm"])
        for layer, norm in self.norms:
            w.writerow([layer, repr(norm)])
        return buf.getvalue()


def skip_norms(params: Mapping, cfg: ModelConfig) -> SkipNormReport:
    if not cfg.block.use_skip:
        raise ValueError(f"variant {cfg.block.variant!r} has no content skip")
    rows = []
    for i in range(cfg.n_layers):
        w = params[f"layers.{i}.W_skip"]
        w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
        rows.append((i, float(np.sqrt((w * w).sum()))))
    return SkipNormReport(tuple(rows))


@dataclass(frozen=True)
class PerplexityResult:
    perplexity: float
    mean_nll: float
    tokens: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate(params: Mapping, cfg: ModelConfig, corpus: bytes, batch: int = 16) -> PerplexityResult:
    """exp(mean token NLL) over non-overlapping ``max_seq_len`` windows.

    A trailing partial window is scored too. NLL sums run in float64.
    """
    if not corpus:
        raise ValueError("empty corpus")
    windows = corpus_windows(corpus, cfg.max_seq_len)
    data = np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.int64)
    used = windows.size
    groups = [windows[i : i + batch] for i in range(0, len(windows), batch)]
    if data.size - used >= 2:
        groups.append(data[used:][None, :])
    total, count = 0.0, 0
    for g in groups:
        logits = model_forward(g[:, :-1], params, cfg)
        n = g[:, 1:].size
        total += float(cross_entropy(logits, g[:, 1:]).data.astype(np.float64)) * n
        count += n
    mean = total / count
    return PerplexityResult(math.exp(mean), mean, count)


def perplexity(params: Mapping, cfg: ModelConfig, corpus: bytes) -> float:
    return evaluate(params, cfg, corpus).perplexity
