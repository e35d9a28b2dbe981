"""Built-in invariant, oracle and gradient suites behind ``preproj check``.

Each suite is a function returning ``[(case_name, passed), ...]``. The
suites use small float64 problems and finish in seconds.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable

import numpy as np

from . import blocks as B
from .analyze import count_params, kv_cache_footprint, param_census
from .model import KVCache, ModelConfig, decode_step, desk_config, init_params, model_forward, partition_params
from .tensor import Tensor, check_gradient, cross_entropy, matmul, rmsnorm, silu, softmax_lastdim

GRAD_TOL = 1e-4

Suite = Callable[[], list[tuple[str, bool]]]


def _rng(seed=0):
    return np.random.default_rng(seed)


def _small_block(**flags) -> B.BlockConfig:
    return B.BlockConfig(d_model=8, n_heads=2, expansion="5/4", ffn_mult=2, **flags)


def _weighted(out: Tensor, seed: int) -> Tensor:
    # random projection keeps every gradient coordinate O(1)
    w = Tensor(_rng(seed).normal(size=out.shape))
    return (out * w).sum()


def suite_oracles() -> list[tuple[str, bool]]:
    rng = _rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    loop = np.array([[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
    x = np.array([1.0, 2.0, 3.0])
    rms = math.sqrt(sum(v * v for v in x) / 3 + 1e-6)
    sm = [math.exp(v) / sum(math.exp(u) for u in x) for v in x]
    return [
        ("matmul-triple-loop", np.abs(matmul(Tensor(a), Tensor(b)).data - loop).max() < 1e-12),
        ("silu(1)", abs(silu(Tensor([1.0])).data[0] - 1 / (1 + math.exp(-1))) < 1e-15),
        ("rmsnorm-scalar", np.abs(rmsnorm(Tensor(x), Tensor(np.ones(3)), 1e-6).data - x / rms).max() < 1e-12),
        ("softmax-scalar", np.abs(softmax_lastdim(Tensor(x)).data - sm).max() < 1e-12),
        ("softmax-shift", np.abs(softmax_lastdim(Tensor(x)).data - softmax_lastdim(Tensor(x + 1000)).data).max() < 1e-12),
    ]


def suite_gradients() -> list[tuple[str, bool]]:
    rng = _rng(2)
    cfg = _small_block(use_preproj=True, use_skip=True, lora_rank=2)
    params = {k: Tensor(v) for k, v in B.init_block_params(cfg, seed=3, dtype=np.float64).items()}
    for k in ("W_down", "lora_qkv_B", "lora_o_B"):
        params[k] = Tensor(rng.normal(0, 0.3, params[k].shape))
    params["W_skip"] = Tensor(rng.normal(0, 0.3, (8, 8)))
    x = rng.normal(size=(5, 8))
    heads = rng.normal(size=(5, 2, 4))
    gain = Tensor(rng.normal(size=8))
    cases = {
        "rmsnorm": (lambda t: _weighted(rmsnorm(t, gain, 1e-5), 0), x),
        "silu": (lambda t: _weighted(silu(silu(t)), 1), x),
        "pre_projection": (lambda t: _weighted(B.pre_projection(t, params["W_up"], params["W_down"]), 2), x),
        "rope": (lambda t: _weighted(B.rope(t), 3), heads),
        "causal_attention": (
            lambda t: _weighted(B.causal_attention(B.rope(t), B.rope(t * 0.5), t), 4), heads,
        ),
        "skip_apply": (lambda t: _weighted(B.skip_apply(t, params["W_skip"]), 5), x),
        "lora_apply": (
            lambda t: _weighted(B.lora_apply(params["W_qkv"], params["lora_qkv_A"], params["lora_qkv_B"], t), 6), x,
        ),
        "block": (lambda t: _weighted(B.block_forward(t, params, cfg), 7), x),
        "cross_entropy": (lambda t: cross_entropy(t, np.array([0, 3, 1, 7, 2])), x),
    }
    return [(name, check_gradient(f, arg, 1e-5) < GRAD_TOL) for name, (f, arg) in cases.items()]


def _small_model(variant: str) -> ModelConfig:
    block = _small_block().with_variant(variant, 2 if "lora" in variant else None)
    return ModelConfig(vocab_size=32, n_layers=2, max_seq_len=24, block=block)


def suite_identity() -> list[tuple[str, bool]]:
    out = []
    base = desk_config("baseline")
    mod = desk_config("preproj-skip")
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-6)):
        p_base = init_params(base, seed=5, dtype=dtype)
        p_mod = init_params(mod, seed=5, dtype=dtype)
        for k in p_mod:
            if k.endswith("W_skip"):
                p_mod[k] = np.zeros_like(p_mod[k])
        toks = _rng(6).integers(0, 256, size=32)
        diff = np.abs(model_forward(toks, p_mod, mod).data - model_forward(toks, p_base, base).data).max()
        out.append((f"identity-at-init-{np.dtype(dtype).name}", diff <= tol))
    return out


def suite_causality() -> list[tuple[str, bool]]:
    cfg = _small_model("preproj-skip")
    p = init_params(cfg, seed=7, dtype=np.float64)
    toks = _rng(8).integers(0, 32, size=12)
    ref = model_forward(toks, p, cfg).data
    ok = True
    for t in range(11):
        pert = toks.copy()
        pert[t + 1 :] = (pert[t + 1 :] + 5) % 32
        ok &= np.abs(model_forward(pert, p, cfg).data[: t + 1] - ref[: t + 1]).max() <= 1e-12
    return [("causal-logits", bool(ok))]


def suite_rope() -> list[tuple[str, bool]]:
    rng = _rng(9)
    iso, shift = True, True
    for _ in range(100):
        q = rng.normal(size=(1, 1, 8))
        k = rng.normal(size=(1, 1, 8))
        m, n, s = rng.integers(0, 64, size=3)
        rq = B.rope(Tensor(q), positions=[m]).data
        iso &= np.allclose(np.hypot(rq[..., 0::2], rq[..., 1::2]), np.hypot(q[..., 0::2], q[..., 1::2]), atol=1e-6)
        d1 = (B.rope(Tensor(q), positions=[m]).data * B.rope(Tensor(k), positions=[n]).data).sum()
        d2 = (B.rope(Tensor(q), positions=[m + s]).data * B.rope(Tensor(k), positions=[n + s]).data).sum()
        shift &= abs(d1 - d2) < 1e-5
    return [("rope-isometry", bool(iso)), ("rope-relative-position", bool(shift))]


def suite_permutation() -> list[tuple[str, bool]]:
    rng = _rng(10)
    cfg = _small_block(use_preproj=True, use_skip=True)
    p = {k: Tensor(v) for k, v in B.init_block_params(cfg, seed=11, dtype=np.float64).items()}
    p["W_down"] = Tensor(rng.normal(size=p["W_down"].shape))
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    pre = lambda a: B.pre_projection(Tensor(a), p["W_up"], p["W_down"]).data
    skip = lambda a: B.skip_apply(Tensor(a), p["W_skip"]).data
    heads = Tensor(x.reshape(6, 2, 4))
    att = B.causal_attention(heads, heads, heads).data
    att_p = B.causal_attention(*(Tensor(x[perm].reshape(6, 2, 4)),) * 3).data
    return [
        ("preproj-commutes", np.array_equal(pre(x[perm]), pre(x)[perm])),
        ("skip-commutes", np.array_equal(skip(x[perm]), skip(x)[perm])),
        ("attention-does-not-commute", not np.allclose(att_p, att[perm])),
    ]


def suite_kv_cache() -> list[tuple[str, bool]]:
    out = []
    counts = set()
    for variant in B.VARIANTS:
        cfg = _small_model(variant)
        p = partition_params(init_params(cfg, seed=12), "probe")
        toks = _rng(13).integers(0, 32, size=16)
        cache = KVCache(cfg)
        logits = None
        for t in toks:
            logits, cache = decode_step(int(t), cache, p, cfg)
        full = model_forward(toks, p, cfg).data[-1]
        out.append((f"decode-equivalence-{variant}", np.abs(logits - full).max() <= 1e-5))
        counts.add(cache.num_elements())
        out.append((f"cache-formula-{variant}", cache.num_elements() == kv_cache_footprint(cfg, seq_len=16)))
    out.append(("cache-variant-independent", len(counts) == 1))
    return out


def suite_params() -> list[tuple[str, bool]]:
    base160 = ModelConfig(vocab_size=50304, n_layers=12, max_seq_len=2048, block=B.BlockConfig(d_model=768, n_heads=12))
    base410 = replace(base160, n_layers=24, block=B.BlockConfig(d_model=1024, n_heads=16))
    r160 = count_params(base160, "preproj-skip")
    r410 = count_params(base410, "preproj-skip")
    lora160 = count_params(base160.with_variant("lora", 480))
    census_ok = all(
        sum(param_census(c.with_variant(v)).values()) == count_params(c.with_variant(v)).total_new
        for c in (_small_model("baseline"), desk_config())
        for v in B.VARIANTS
    )
    return [
        ("table1-160m", (r160.preproj_params, r160.skip_params, r160.total_new) == (17_694_720, 7_077_888, 24_772_608)),
        ("table1-410m", (r410.preproj_params, r410.skip_params, r410.total_new) == (62_914_560, 25_165_824, 88_080_384)),
        ("lora-r480", lora160.total_new == 26_542_080),
        ("census-matches-closed-form", census_ok),
    ]


SUITES: dict[str, Suite] = {
    "oracles": suite_oracles,
    "gradients": suite_gradients,
    "identity": suite_identity,
    "causality": suite_causality,
    "rope": suite_rope,
    "permutation": suite_permutation,
    "kv-cache": suite_kv_cache,
    "params": suite_params,
}


def run_all(echo=print) -> bool:
    all_ok = True
    for name, suite in SUITES.items():
        results = suite()
        passed = sum(ok for _, ok in results)
        echo(f"{name}: {passed}/{len(results)} passed")
        for case, ok in results:
            if not ok:
                echo(f"  FAIL {case}")
        all_ok &= passed == len(results)
    return all_ok
