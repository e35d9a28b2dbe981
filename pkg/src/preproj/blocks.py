"""Attention blocks: baseline, pre-projection, content skip, LoRA.

Weights are stored input-major, ``(d_in, d_out)``, so a projection is
``x @ W``. LoRA factors keep the usual ``A: (r, d_in)``, ``B: (d_out, r)``
layout, which makes the equivalent dense weight ``W + (B @ A).T``.

Block wiring is sequential::

    h   = rmsnorm(x)
    h~  = h + silu(h @ W_up) @ W_down                  (pre-projection)
    q, k, v = h~ @ W_qkv                                (+ LoRA)
    a   = attention(rope(q), rope(k), v) @ W_o          (+ LoRA)
    y   = x + a + h~ @ W_skip                           (content skip)
    out = y + silu(rmsnorm(y) @ W_ffn_in) @ W_ffn_out
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Protocol

import numpy as np

from .tensor import (
    Tensor,
    _emit,
    matmul,
    reshape,
    rmsnorm,
    silu,
    softmax_lastdim,
    split_lastdim,
    transpose,
)

VARIANTS = ("baseline", "preproj", "preproj-skip", "lora", "preproj-lora")

INIT_STD = 0.02
SKIP_INIT_STD = 1e-4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 64
    n_heads: int = 4
    expansion: Fraction | float | str = Fraction(5, 4)
    rope_theta: float = 10000.0
    use_preproj: bool = False
    use_skip: bool = False
    lora_rank: int = 0
    ffn_mult: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        e = self.expansion
        e = Fraction(str(e)) if isinstance(e, (float, str)) else Fraction(e)
        object.__setattr__(self, "expansion", e)
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotary embeddings")
        if e <= 0:
            raise ConfigError("expansion must be positive")
        if (e * self.d_model).denominator != 1:
            raise ConfigError(f"expansion {e} * d_model {self.d_model} is not an integer")
        if self.use_skip and not self.use_preproj:
            raise ConfigError("use_skip requires use_preproj (the skip reads the pre-projection output)")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be non-negative")
        if self.lora_rank > self.d_model:
            raise ConfigError(f"lora_rank={self.lora_rank} exceeds d_model={self.d_model}")
        if self.ffn_mult <= 0 or self.rope_theta <= 0 or self.eps <= 0:
            raise ConfigError("ffn_mult, rope_theta and eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def preproj_hidden(self) -> int:
        return int(self.expansion * self.d_model)

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.d_model

    @property
    def variant(self) -> str:
        if self.use_skip:
            return "preproj-skip" if not self.lora_rank else "preproj-skip-lora"
        if self.use_preproj:
            return "preproj-lora" if self.lora_rank else "preproj"
        return "lora" if self.lora_rank else "baseline"

    def with_variant(self, name: str, lora_rank: int | None = None) -> BlockConfig:
        """Return a copy with the flags for one of :data:`VARIANTS`."""
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
        rank = 0
        if "lora" in name:
            rank = lora_rank if lora_rank else (self.lora_rank or default_lora_rank(name, self.d_model))
        return replace(
            self,
            use_preproj=name.startswith("preproj"),
            use_skip=name == "preproj-skip",
            lora_rank=rank,
        )


def default_lora_rank(variant: str, d_model: int) -> int:
    # rank / d_model ratios of the reference runs: 480/768 alone, 64/768 with pre-projection
    ratio = Fraction(480, 768) if variant == "lora" else Fraction(64, 768)
    return max(1, round(ratio * d_model))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

INJECTED = ("W_up", "W_down", "W_skip", "lora_qkv_A", "lora_qkv_B", "lora_o_A", "lora_o_B")


def block_param_shapes(cfg: BlockConfig) -> dict[str, tuple[int, ...]]:
    d, e, f, r = cfg.d_model, cfg.preproj_hidden, cfg.ffn_hidden, cfg.lora_rank
    shapes: dict[str, tuple[int, ...]] = {"attn_norm": (d,)}
    if cfg.use_preproj:
        shapes["W_up"] = (d, e)
        shapes["W_down"] = (e, d)
    shapes["W_qkv"] = (d, 3 * d)
    shapes["W_o"] = (d, d)
    if cfg.use_skip:
        shapes["W_skip"] = (d, d)
    if r:
        shapes["lora_qkv_A"] = (r, d)
        shapes["lora_qkv_B"] = (3 * d, r)
        shapes["lora_o_A"] = (r, d)
        shapes["lora_o_B"] = (d, r)
    shapes["ffn_norm"] = (d,)
    shapes["W_ffn_in"] = (d, f)
    shapes["W_ffn_out"] = (f, d)
    return shapes


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Philox generator keyed by ``(seed, name)``.

    Keying by name keeps every tensor's draw independent of which other
    tensors exist, so variants built from one seed share their base weights.
    """
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, tag])))


def init_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Initial float64 value for a parameter, chosen by its local name."""
    local = name.rsplit(".", 1)[-1]
    if local in ("attn_norm", "ffn_norm", "final_norm"):
        return np.ones(shape)
    if local in ("W_down", "lora_qkv_B", "lora_o_B"):
        return np.zeros(shape)
    rng = named_rng(seed, name)
    if local == "W_skip":
        return rng.normal(0.0, SKIP_INIT_STD, shape)
    if local in ("lora_qkv_A", "lora_o_A"):
        # kaiming-uniform(a=sqrt(5)) bound, the usual LoRA A init
        bound = 1.0 / np.sqrt(shape[1])
        return rng.uniform(-bound, bound, shape)
    return rng.normal(0.0, INIT_STD, shape)


def init_block_params(
    cfg: BlockConfig, seed: int = 0, dtype=np.float32, prefix: str = ""
) -> dict[str, np.ndarray]:
    return {
        name: init_tensor(prefix + name, shape, seed).astype(dtype)
        for name, shape in block_param_shapes(cfg).items()
    }


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def pre_projection(x_hat: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """Residual SiLU MLP applied independently to each token."""
    if w_up.shape[0] != x_hat.shape[-1] or w_down.shape != (w_up.shape[1], x_hat.shape[-1]):
        raise ValueError(f"pre_projection shapes: x {x_hat.shape}, up {w_up.shape}, down {w_down.shape}")
    return x_hat + matmul(silu(matmul(x_hat, w_up)), w_down)


def skip_apply(x_tilde: Tensor, w_skip: Tensor) -> Tensor:
    if w_skip.shape != (x_tilde.shape[-1], x_tilde.shape[-1]):
        raise ValueError(f"skip weight {w_skip.shape} does not match features {x_tilde.shape}")
    return matmul(x_tilde, w_skip)


def lora_apply(base_w: Tensor, a: Tensor | None, b: Tensor | None, x: Tensor) -> Tensor:
    """``x @ base_w + (x @ a.T) @ b.T`` with scaling 1."""
    out = matmul(x, base_w)
    if a is None:
        return out
    d_in, d_out = base_w.shape
    r = a.shape[0]
    if r > min(d_in, d_out):
        raise ValueError(f"LoRA rank {r} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
    if a.shape != (r, d_in) or b.shape != (d_out, r):
        raise ValueError(f"LoRA factor shapes A {a.shape}, B {b.shape} do not fit W {base_w.shape}")
    low = matmul(matmul(x, transpose(a, (1, 0))), transpose(b, (1, 0)))
    return out + low


def rope_angles(positions: np.ndarray, head_dim: int, theta: float) -> np.ndarray:
    """Angles ``m * theta**(-2i/h)`` as a float64 ``(T, h/2)`` array."""
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rope(x: Tensor, theta: float = 10000.0, positions=None) -> Tensor:
    """Rotate consecutive feature pairs of ``x[..., T, H, h]`` by position.

    ``positions`` defaults to ``0..T-1``.
    """
    h = x.shape[-1]
    if h % 2:
        raise ValueError(f"rope needs an even head dim, got {h}")
    T = x.shape[-3]
    pos = np.arange(T) if positions is None else np.asarray(positions)
    ang = rope_angles(pos, h, theta)
    cos = np.cos(ang).astype(x.dtype)[:, None, :]
    sin = np.sin(ang).astype(x.dtype)[:, None, :]
    X = x.data
    x0, x1 = X[..., 0::2], X[..., 1::2]
    out = np.empty_like(X)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def grad_fn(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _emit("rope", out, (x,), grad_fn)


def causal_mask(t_q: int, t_k: int) -> np.ndarray:
    """Boolean ``(t_q, t_k)`` mask; queries are the last ``t_q`` positions."""
    offset = t_k - t_q
    return np.arange(t_k)[None, :] <= (np.arange(t_q)[:, None] + offset)


def _heads_first(x: Tensor) -> Tensor:
    n = x.ndim
    return transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))


def attention_probs(q: Tensor, k: Tensor) -> Tensor:
    """Causal softmax weights, shape ``(..., H, T_q, T_k)``."""
    h = q.shape[-1]
    qh, kh = _heads_first(q), _heads_first(k)
    n = kh.ndim
    scores = matmul(qh, transpose(kh, tuple(range(n - 2)) + (n - 1, n - 2)))
    scores = scores * (1.0 / np.sqrt(h))
    return softmax_lastdim(scores, causal_mask(q.shape[-3], k.shape[-3]))


def causal_attention(q: Tensor, k: Tensor, v: Tensor, w_o: Tensor | None = None) -> Tensor:
    """Multi-head causal attention over ``(..., T, H, h)`` inputs.

    ``k``/``v`` may be longer than ``q`` (cached prefix); the queries then sit
    at the last positions. Heads are concatenated to ``(..., T_q, H*h)`` and
    projected by ``w_o`` when given.
    """
    if k.shape != v.shape or q.shape[-2:] != k.shape[-2:] or q.shape[:-3] != k.shape[:-3]:
        raise ValueError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[-3] > k.shape[-3]:
        raise ValueError("more queries than keys")
    p = attention_probs(q, k)
    out = matmul(p, _heads_first(v))
    out = _heads_first(out)
    out = reshape(out, out.shape[:-2] + (out.shape[-2] * out.shape[-1],))
    return matmul(out, w_o) if w_o is not None else out


def ffn(x: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    return matmul(silu(matmul(x, w_in)), w_out)


class KVStore(Protocol):
    def extend(self, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


def block_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    cfg: BlockConfig,
    start_pos: int = 0,
    kv: KVStore | None = None,
) -> Tensor:
    """One transformer block on ``x[..., T, d]``.

    ``start_pos`` is the absolute position of the first row. With ``kv``, the
    new keys/values are appended to the store and attention runs over
    everything it holds (no gradient flows into cached entries).
    """
    d = cfg.d_model
    if x.shape[-1] != d:
        raise ValueError(f"block expects last dim {d}, got {x.shape}")
    T = x.shape[-2]
    h = rmsnorm(x, params["attn_norm"], cfg.eps)
    if cfg.use_preproj:
        h = pre_projection(h, params["W_up"], params["W_down"])

    qkv = lora_apply(params["W_qkv"], params.get("lora_qkv_A"), params.get("lora_qkv_B"), h)
    heads = x.shape[:-1] + (cfg.n_heads, cfg.head_dim)
    q, k, v = (reshape(t, heads) for t in split_lastdim(qkv, (d, d, d)))
    pos = np.arange(start_pos, start_pos + T)
    q = rope(q, cfg.rope_theta, pos)
    k = rope(k, cfg.rope_theta, pos)
    if kv is not None:
        k_all, v_all = kv.extend(k.data, v.data)
        k, v = Tensor(k_all), Tensor(v_all)
    attn = causal_attention(q, k, v)
    attn = lora_apply(params["W_o"], params.get("lora_o_A"), params.get("lora_o_B"), attn)

    y = x + attn
    if cfg.use_skip:
        y = y + skip_apply(h, params["W_skip"])
    return y + ffn(rmsnorm(y, params["ffn_norm"], cfg.eps), params["W_ffn_in"], params["W_ffn_out"])
