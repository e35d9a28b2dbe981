"""Checkpoint files: one JSON manifest line, then a raw f32 payload.

Layout::

    <manifest: compact UTF-8 JSON, no newlines>\\n
    <payload: little-endian IEEE-754 f32, row-major, tensors in manifest order>

The manifest carries the model config and, per tensor, ``name``, ``shape``,
``dtype`` (always ``"f32"``), ``byte_offset`` (relative to the payload start)
and ``partition_tag``. Writes go to a temp file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .blocks import ConfigError
from .model import FROZEN, TRAINABLE, ModelConfig, is_injected, param_shapes
from .tensor import Tensor

FORMAT = "preproj-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint or mismatch with the expected config."""


def save_checkpoint(
    path,
    params: Mapping,
    cfg: ModelConfig,
    tags: Mapping[str, str] | None = None,
) -> Path:
    path = Path(path)
    arrays = {n: np.asarray(v.data if isinstance(v, Tensor) else v) for n, v in params.items()}
    if tags is None:
        tags = {n: TRAINABLE if is_injected(n) else FROZEN for n in arrays}
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "byte_offset": offset,
                "partition_tag": tags[name],
            }
        )
        offset += arr.size * 4
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": cfg.to_dict(),
        "payload_bytes": offset,
        "tensors": entries,
    }
    header = json.dumps(manifest, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            for arr in arrays.values():
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_manifest(path) -> tuple[dict, int]:
    """Manifest dict and the payload's byte position in the file."""
    with open(path, "rb") as f:
        line = f.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT} v{VERSION} file")
    return manifest, len(line)


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    """Read a checkpoint; returns (config, float32 arrays, partition tags).

    Everything is validated against the stored config (and ``expect``, when
    given) before any array is materialised.
    """
    manifest, start = read_manifest(path)
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
    except (TypeError, KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad config in manifest ({exc})") from None
    if expect is not None and expect != cfg:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")

    shapes = param_shapes(cfg)
    entries = manifest["tensors"]
    names = [e["name"] for e in entries]
    if names != list(shapes):
        missing = sorted(set(shapes) - set(names))
        extra = sorted(set(names) - set(shapes))
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    offset = 0
    for e in entries:
        if tuple(e["shape"]) != shapes[e["name"]]:
            raise CheckpointError(f"{path}: {e['name']} has shape {e['shape']}, config wants {list(shapes[e['name']])}")
        if e["dtype"] != "f32" or e["byte_offset"] != offset or e["partition_tag"] not in (FROZEN, TRAINABLE):
            raise CheckpointError(f"{path}: bad manifest entry for {e['name']}")
        offset += int(np.prod(e["shape"], dtype=np.int64)) * 4

    raw = Path(path).read_bytes()[start:]
    if len(raw) != offset or manifest.get("payload_bytes") != offset:
        raise CheckpointError(f"{path}: payload is {len(raw)} bytes, manifest describes {offset}")
    params, tags = {}, {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["byte_offset"])
        params[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
        tags[e["name"]] = e["partition_tag"]
    return cfg, params, tags
