import hashlib

import numpy as np
import pytest

from preproj.blocks import VARIANTS, BlockConfig
from preproj.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from preproj.model import (
    FROZEN,
    TRAINABLE,
    CacheOverflowError,
    KVCache,
    ModelConfig,
    decode_step,
    desk_config,
    greedy_decode,
    init_params,
    model_forward,
    param_shapes,
    partition_params,
)
from preproj.tensor import Tensor, embedding, matmul, rmsnorm, transpose


def tiny(variant="baseline", **kw):
    block = BlockConfig(d_model=8, n_heads=2, expansion="5/4", ffn_mult=2).with_variant(
        variant, 2 if "lora" in variant else None
    )
    base = dict(vocab_size=32, n_layers=2, max_seq_len=40, block=block)
    base.update(kw)
    return ModelConfig(**base)


class TestForward:
    def test_logit_shape(self):
        cfg = tiny()
        out = model_forward(np.arange(5), init_params(cfg), cfg)
        assert out.shape == (5, 32)

    def test_empty_stack(self):
        cfg = tiny(n_layers=0)
        p = init_params(cfg, dtype=np.float64)
        toks = np.array([1, 4, 9])
        h = rmsnorm(embedding(Tensor(p["embed"]), toks), Tensor(p["final_norm"]), cfg.block.eps)
        expected = matmul(h, transpose(Tensor(p["embed"]), (1, 0))).data
        np.testing.assert_array_equal(model_forward(toks, p, cfg).data, expected)

    def test_untied_head(self):
        cfg = tiny(tie_embeddings=False)
        assert "head" in param_shapes(cfg)
        assert model_forward([1, 2], init_params(cfg), cfg).shape == (2, 32)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_causality(self, variant):
        cfg = tiny(variant)
        p = init_params(cfg, seed=1, dtype=np.float64)
        rng = np.random.default_rng(0)
        toks = rng.integers(0, 32, size=10)
        ref = model_forward(toks, p, cfg).data
        for t in range(9):
            pert = toks.copy()
            pert[t + 1 :] = rng.integers(0, 32, size=9 - t)
            assert np.abs(model_forward(pert, p, cfg).data[: t + 1] - ref[: t + 1]).max() <= 1e-12

    def test_token_out_of_range(self):
        cfg = tiny()
        with pytest.raises(IndexError):
            model_forward([32], init_params(cfg), cfg)

    def test_overlong(self):
        cfg = tiny()
        with pytest.raises(ValueError):
            model_forward(np.zeros(41, int), init_params(cfg), cfg)

    def test_identity_at_init_full_model(self):
        base, mod = desk_config("baseline"), desk_config("preproj-skip")
        pb = init_params(base, seed=2, dtype=np.float64)
        pm = init_params(mod, seed=2, dtype=np.float64)
        for k in pm:
            if k.endswith("W_skip"):
                pm[k][:] = 0
        toks = np.random.default_rng(1).integers(0, 256, size=64)
        np.testing.assert_array_equal(model_forward(toks, pm, mod).data, model_forward(toks, pb, base).data)

    def test_deterministic(self):
        cfg = desk_config("preproj-skip")
        toks = np.arange(50) % 256
        a = model_forward(toks, init_params(cfg, seed=3), cfg).data
        b = model_forward(toks, init_params(cfg, seed=3), cfg).data
        assert a.tobytes() == b.tobytes()


class TestPartition:
    def test_baseline_probe_has_nothing_trainable(self):
        store = partition_params(init_params(tiny()), "probe")
        assert store.num_trainable() == 0
        assert all(not t.requires_grad for t in store.values())

    def test_probe_trains_only_injected(self):
        store = partition_params(init_params(tiny("preproj-skip")), "probe")
        names = {n.rsplit(".", 1)[-1] for n in store.trainable()}
        assert names == {"W_up", "W_down", "W_skip"}

    def test_lora_probe(self):
        store = partition_params(init_params(tiny("lora")), "probe")
        names = {n.rsplit(".", 1)[-1] for n in store.trainable()}
        assert names == {"lora_qkv_A", "lora_qkv_B", "lora_o_A", "lora_o_B"}

    def test_full_protocol(self):
        store = partition_params(init_params(tiny("preproj")), "full")
        assert store.num_frozen() == 0

    def test_unknown_name(self):
        with pytest.raises(KeyError):
            partition_params({"layers.0.W_mystery": np.zeros(2)})

    def test_full_size_counts(self):
        cfg = ModelConfig(vocab_size=256, n_layers=12, max_seq_len=128, block=BlockConfig(d_model=768, n_heads=12))
        for variant, rank, expected in [("preproj-skip", None, 24_772_608), ("lora", 480, 26_542_080)]:
            c = cfg.with_variant(variant, rank)
            arrays = {n: np.zeros(s, np.float32) for n, s in param_shapes(c).items()}
            assert partition_params(arrays, "probe").num_trainable() == expected


class TestDecode:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_matches_full_forward(self, variant):
        cfg = tiny(variant)
        p = partition_params(init_params(cfg, seed=4), "probe")
        toks = np.random.default_rng(2).integers(0, 32, size=20)
        full = model_forward(toks, p, cfg).data
        cache = KVCache(cfg)
        for i, t in enumerate(toks):
            logits, cache = decode_step(int(t), cache, p, cfg)
            assert np.abs(logits - full[i]).max() <= 1e-5
        assert cache.length == 20

    def test_greedy_matches_repeated_full_forward(self):
        cfg = desk_config("preproj-skip")
        p = init_params(cfg, seed=5)
        p["layers.3.W_skip"] = np.random.default_rng(3).normal(0, 0.3, (64, 64)).astype(np.float32)
        prompt = [10, 20, 30]
        tokens, _ = greedy_decode(prompt, 16, p, cfg)
        seq = list(prompt)
        for _ in range(16):
            seq.append(int(np.argmax(model_forward(seq, p, cfg).data[-1])))
        assert tokens == seq[3:]

    def test_cache_element_count(self):
        for variant in VARIANTS:
            cfg = tiny(variant)
            cache = KVCache(cfg)
            p = init_params(cfg)
            for t in range(7):
                _, cache = decode_step(t, cache, p, cfg)
            assert cache.num_elements() == 7 * cfg.n_layers * 2 * cfg.block.n_heads * cfg.block.head_dim

    def test_identical_byte_footprint(self):
        sizes = set()
        for variant in ("baseline", "preproj-skip"):
            cfg = tiny(variant)
            cache = KVCache(cfg)
            for t in range(5):
                _, cache = decode_step(t, cache, init_params(cfg), cfg)
            sizes.add(cache.nbytes())
        assert len(sizes) == 1

    def test_overflow(self):
        cfg = tiny(max_seq_len=3)
        cache = KVCache(cfg)
        p = init_params(cfg)
        for t in range(3):
            _, cache = decode_step(t, cache, p, cfg)
        with pytest.raises(CacheOverflowError):
            decode_step(0, cache, p, cfg)


def digest(arrays):
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = tiny("preproj-skip")
        p = init_params(cfg, seed=6)
        path = save_checkpoint(tmp_path / "m.bin", p, cfg)
        cfg2, p2, tags = load_checkpoint(path)
        assert cfg2 == cfg
        assert digest(p) == digest(p2)
        assert tags["layers.0.W_skip"] == TRAINABLE and tags["embed"] == FROZEN

    def test_manifest_layout(self, tmp_path):
        cfg = tiny()
        p = init_params(cfg)
        path = save_checkpoint(tmp_path / "m.bin", p, cfg)
        manifest, start = read_manifest(path)
        raw = path.read_bytes()
        assert raw[start - 1 : start] == b"\n"
        offset = 0
        for entry in manifest["tensors"]:
            assert set(entry) == {"name", "shape", "dtype", "byte_offset", "partition_tag"}
            assert entry["dtype"] == "f32" and entry["byte_offset"] == offset
            arr = p[entry["name"]]
            assert raw[start + offset : start + offset + arr.nbytes] == arr.astype("<f4").tobytes()
            offset += arr.nbytes
        assert len(raw) - start == offset

    def test_config_mismatch_rejected(self, tmp_path):
        cfg = tiny()
        path = save_checkpoint(tmp_path / "m.bin", init_params(cfg), cfg)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expect=tiny("preproj"))

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = tiny()
        path = save_checkpoint(tmp_path / "m.bin", init_params(cfg), cfg)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_garbage_rejected(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"not json\n\x00\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_no_temp_files_left(self, tmp_path):
        cfg = tiny()
        save_checkpoint(tmp_path / "m.bin", init_params(cfg), cfg)
        assert [p.name for p in tmp_path.iterdir()] == ["m.bin"]
