"""Command-line entry point: ``preproj {check,train,eval,params,skip-norms,generate}``.

Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 non-finite numerics,
4 checkpoint rejected (malformed, or shapes disagree with the config).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .analyze import count_params, evaluate, skip_norms
from .blocks import VARIANTS, ConfigError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, build_run_config, load_config_file
from .model import init_params, is_injected, partition_params, sample
from .tensor import NonFiniteError
from .train import TrainingError, loss_csv, probe_train

log = logging.getLogger("preproj")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


class UsageError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out_dir: str | None, filename: str) -> None:
    """Print ``text``; also write it to ``out_dir/filename`` when given."""
    if out_dir:
        _atomic_write(Path(out_dir) / filename, text.encode("utf-8"))
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _run_config(args) -> RunConfig:
    flat = load_config_file(args.config) if args.config else {}
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "corpus_path": args.corpus,
        "checkpoint_path": args.checkpoint,
        "out_dir": args.out,
    }
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return build_run_config(flat)


def _read_corpus(path) -> bytes:
    if not path:
        raise UsageError("a corpus is required (--corpus or corpus_path)")
    data = Path(path).read_bytes()
    if not data:
        raise UsageError(f"{path}: empty corpus")
    return data


def _load_ckpt(path, expect=None):
    if not path:
        raise UsageError("a checkpoint is required (--checkpoint or checkpoint_path)")
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    return load_checkpoint(path, expect)


def cmd_check(args) -> int:
    from .checks import run_all

    return EXIT_OK if run_all() else EXIT_INVALID


def cmd_params(args) -> int:
    run = _run_config(args)
    report = count_params(run.model, base_params=run.base_params)
    _emit(report.to_json(), run.out_dir, "params.json")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    cfg = run.model
    corpus = _read_corpus(run.corpus_path)
    arrays = init_params(cfg, seed=run.seed)
    if run.checkpoint_path:
        # base weights come from the checkpoint; injected modules start fresh unless present
        _, loaded, _ = _load_ckpt(run.checkpoint_path)
        for name, arr in loaded.items():
            if name in arrays and not is_injected(name):
                if arr.shape != arrays[name].shape:
                    raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != config shape {arrays[name].shape}")
                arrays[name] = arr
    store = partition_params(arrays, "probe")
    n_train = store.num_trainable()
    if n_train == 0:
        log.warning("0 trainable parameters (variant %s); loss history will be flat", run.variant)
    result = probe_train(store, cfg, corpus, run.train)
    out = Path(run.out_dir or ".")
    ckpt = save_checkpoint(out / "checkpoint.bin", store, cfg, {n: store.tag(n) for n in store})
    _atomic_write(out / "loss.csv", loss_csv(result.history).encode("ascii"))
    summary = {
        "variant": run.variant,
        "trainable_params": n_train,
        "steps": len(result.history),
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
        "checkpoint": str(ckpt),
        "loss_csv": str(out / "loss.csv"),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _ckpt_and_config(args):
    run = _run_config(args) if args.config else None
    path = args.checkpoint or (run.checkpoint_path if run else None)
    return _load_ckpt(path, run.model if run else None)


def cmd_eval(args) -> int:
    cfg, params, _ = _ckpt_and_config(args)
    corpus_path = args.corpus or (_run_config(args).corpus_path if args.config else None)
    result = evaluate(params, cfg, _read_corpus(corpus_path))
    _emit(result.to_json(), args.out, "eval.json")
    return EXIT_OK


def cmd_skip_norms(args) -> int:
    cfg, params, _ = _ckpt_and_config(args)
    try:
        report = skip_norms(params, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(report.to_csv(), args.out, "skip_norms.csv")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg, params, _ = _ckpt_and_config(args)
    prompt = args.prompt.encode("utf-8") if args.prompt is not None else b"\n"
    if not prompt:
        raise UsageError("empty prompt")
    rng = np.random.Generator(np.random.Philox(args.seed if args.seed is not None else 0))
    tokens, _ = sample(list(prompt), args.n, params, cfg, temperature=args.temperature, rng=rng)
    sys.stdout.buffer.write(bytes(tokens))
    sys.stdout.buffer.flush()
    if args.out:
        _atomic_write(Path(args.out) / "generate.bin", bytes(tokens))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="preproj", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON run config")
        p.add_argument("--checkpoint", help="checkpoint file")
        p.add_argument("--corpus", help="raw byte corpus")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        return p

    sub.add_parser("check", help="run built-in invariant and gradient suites").set_defaults(func=cmd_check)
    common(sub.add_parser("train", help="frozen-probe training")).set_defaults(func=cmd_train)
    common(sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")).set_defaults(func=cmd_eval)
    common(sub.add_parser("params", help="parameter-overhead report")).set_defaults(func=cmd_params)
    common(sub.add_parser("skip-norms", help="per-layer Frobenius norm of W_skip")).set_defaults(func=cmd_skip_norms)
    gen = common(sub.add_parser("generate", help="decode bytes with the KV cache"))
    gen.add_argument("--prompt", help="UTF-8 prompt text")
    gen.add_argument("-n", "--n", type=int, default=64, help="bytes to generate")
    gen.add_argument("--temperature", type=float, default=0.0, help="0 = greedy")
    gen.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, UsageError, TrainingError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
