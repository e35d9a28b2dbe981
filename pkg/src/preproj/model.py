"""Decoder-only model: embeddings, block stack, tied head, KV cache."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from .blocks import INJECTED, BlockConfig, ConfigError, block_forward, block_param_shapes, init_tensor
from .tensor import Tensor, embedding, matmul, rmsnorm, transpose

FROZEN = "frozen"
TRAINABLE = "trainable"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    n_layers: int = 4
    max_seq_len: int = 128
    block: BlockConfig = field(default_factory=BlockConfig)
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.vocab_size <= 0 or self.max_seq_len <= 0 or self.n_layers < 0:
            raise ConfigError("vocab_size, max_seq_len must be positive and n_layers non-negative")

    @property
    def d_model(self) -> int:
        return self.block.d_model

    def with_variant(self, name: str, lora_rank: int | None = None) -> ModelConfig:
        return replace(self, block=self.block.with_variant(name, lora_rank))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["block"]["expansion"] = str(self.block.expansion)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        block = BlockConfig(**d.pop("block"))
        return cls(block=block, **d)


def desk_config(variant: str = "baseline", lora_rank: int | None = None) -> ModelConfig:
    """Byte-level reference config: d=64, 4 heads, 4 layers, ed=80, T<=128."""
    return ModelConfig().with_variant(variant, lora_rank)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"embed": (cfg.vocab_size, cfg.d_model)}
    for i in range(cfg.n_layers):
        for name, shape in block_param_shapes(cfg.block).items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_norm"] = (cfg.d_model,)
    if not cfg.tie_embeddings:
        shapes["head"] = (cfg.vocab_size, cfg.d_model)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh weights. Each tensor is drawn from its own (seed, name) stream."""
    return {name: init_tensor(name, shape, seed).astype(dtype) for name, shape in param_shapes(cfg).items()}


_NAME = re.compile(r"^(embed|final_norm|head|layers\.(\d+)\.(\w+))$")


def is_injected(name: str) -> bool:
    m = _NAME.match(name)
    return bool(m and m.group(3) in INJECTED)


class ParamStore(Mapping[str, Tensor]):
    """Ordered name -> Tensor map with a frozen/trainable tag per name."""

    def __init__(self, tensors: Mapping[str, Tensor], tags: Mapping[str, str]):
        self._tensors = dict(tensors)
        self._tags = dict(tags)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def tag(self, name: str) -> str:
        return self._tags[name]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if self._tags[n] == TRAINABLE}

    def frozen(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if self._tags[n] == FROZEN}

    def num_trainable(self) -> int:
        return sum(t.size for t in self.trainable().values())

    def num_frozen(self) -> int:
        return sum(t.size for t in self.frozen().values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def layer(self, i: int) -> dict[str, Tensor]:
        return _layer(self._tensors, i)


def partition_params(params: Mapping, protocol: str = "probe") -> ParamStore:
    """Wrap arrays as Tensors and tag them.

    ``probe``: only injected modules (pre-projection, skip, LoRA) train.
    ``full``: everything trains.
    """
    if protocol not in ("probe", "full"):
        raise ValueError(f"unknown protocol {protocol!r}")
    tensors, tags = {}, {}
    for name, value in params.items():
        m = _NAME.match(name)
        if not m or (m.group(3) is not None and m.group(3) not in _BLOCK_NAMES):
            raise KeyError(f"unknown parameter name {name!r}")
        trainable = protocol == "full" or is_injected(name)
        data = value.data if isinstance(value, Tensor) else value
        tensors[name] = Tensor(data, requires_grad=trainable)
        tags[name] = TRAINABLE if trainable else FROZEN
    return ParamStore(tensors, tags)


_BLOCK_NAMES = set(
    block_param_shapes(BlockConfig(use_preproj=True, use_skip=True, lora_rank=1))
)


def _as_store(params: Mapping) -> Mapping[str, Tensor]:
    if isinstance(params, ParamStore):
        return params
    return {n: v if isinstance(v, Tensor) else Tensor(v) for n, v in params.items()}


def _layer(params: Mapping[str, Tensor], i: int) -> dict[str, Tensor]:
    prefix = f"layers.{i}."
    return {n[len(prefix):]: t for n, t in params.items() if n.startswith(prefix)}


def _check_tokens(tokens: np.ndarray, cfg: ModelConfig, start: int = 0) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError(f"token out of range [0, {cfg.vocab_size})")
    if start + tokens.shape[-1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {start + tokens.shape[-1]} exceeds max_seq_len {cfg.max_seq_len}")


def _head(h: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    h = rmsnorm(h, params["final_norm"], cfg.block.eps)
    table = params["embed"] if cfg.tie_embeddings else params["head"]
    return matmul(h, transpose(table, (1, 0)))


def model_forward(tokens, params: Mapping, cfg: ModelConfig) -> Tensor:
    """Logits ``(..., T, vocab)`` for integer ``tokens[..., T]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(tokens, cfg)
    params = _as_store(params)
    h = embedding(params["embed"], tokens)
    for i in range(cfg.n_layers):
        h = block_forward(h, _layer(params, i), cfg.block)
    return _head(h, params, cfg)


class _LayerKV:
    def __init__(self, cache: KVCache, layer: int):
        self.cache, self.layer = cache, layer

    def extend(self, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self.cache
        n = c.length + k.shape[0]
        c.k[self.layer][c.length:n] = k
        c.v[self.layer][c.length:n] = v
        return c.k[self.layer][:n], c.v[self.layer][:n]


class KVCache:
    """Append-only per-layer key/value store for one decode session."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        b = cfg.block
        shape = (cfg.max_seq_len, b.n_heads, b.head_dim)
        self.max_len = cfg.max_seq_len
        self.k = [np.zeros(shape, dtype) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape, dtype) for _ in range(cfg.n_layers)]
        self.length = 0

    @property
    def n_layers(self) -> int:
        return len(self.k)

    def num_elements(self) -> int:
        """Scalars actually held (keys + values, all layers)."""
        return sum(k[: self.length].size + v[: self.length].size for k, v in zip(self.k, self.v))

    def nbytes(self) -> int:
        return sum(k[: self.length].nbytes + v[: self.length].nbytes for k, v in zip(self.k, self.v))


class CacheOverflowError(ValueError):
    pass


def decode_step(token: int, cache: KVCache, params: Mapping, cfg: ModelConfig) -> tuple[np.ndarray, KVCache]:
    """Logits for the next position after feeding ``token``; appends one K/V row per layer."""
    if cache.length >= cfg.max_seq_len:
        raise CacheOverflowError(f"cache full at {cache.length} tokens")
    tokens = np.asarray([token], dtype=np.int64)
    _check_tokens(tokens, cfg, cache.length)
    params = _as_store(params)
    h = embedding(params["embed"], tokens)
    for i in range(cfg.n_layers):
        h = block_forward(h, _layer(params, i), cfg.block, start_pos=cache.length, kv=_LayerKV(cache, i))
    cache.length += 1
    return _head(h, params, cfg).data[0], cache


def greedy_decode(prompt, n: int, params: Mapping, cfg: ModelConfig, dtype=np.float32) -> tuple[list[int], list[np.ndarray]]:
    """Greedy continuation using the KV cache; returns tokens and per-step logits."""
    return sample(prompt, n, params, cfg, temperature=0.0, dtype=dtype)


def sample(
    prompt,
    n: int,
    params: Mapping,
    cfg: ModelConfig,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> tuple[list[int], list[np.ndarray]]:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("empty prompt")
    if len(prompt) + n - 1 > cfg.max_seq_len:
        raise CacheOverflowError(f"prompt + {n} tokens exceeds max_seq_len {cfg.max_seq_len}")
    params = _as_store(params)
    cache = KVCache(cfg, dtype)
    logits = None
    for t in prompt:
        logits, cache = decode_step(t, cache, params, cfg)
    out, history = [], []
    for step in range(n):
        history.append(logits)
        nxt = _choose(logits, temperature, rng)
        out.append(nxt)
        if step + 1 < n:
            logits, cache = decode_step(nxt, cache, params, cfg)
    return out, history


def _choose(logits: np.ndarray, temperature: float, rng) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    rng = rng if rng is not None else np.random.default_rng()
    return int(rng.choice(len(p), p=p))
