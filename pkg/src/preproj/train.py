"""Frozen-probe training: AdamW, cosine schedule, gradient accumulation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .model import ModelConfig, ParamStore, model_forward
from .tensor import NonFiniteError, Tape, Tensor, backward, cross_entropy, zero_grad


class TrainingError(RuntimeError):
    pass


class DivergedError(NonFiniteError):
    def __init__(self, step: int, cause: str = "non-finite loss"):
        super().__init__(f"{cause} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-5
    steps: int = 500
    effective_batch: int = 16
    micro_batch: int | None = None
    warmup_steps: int = 0
    lr_min: float = 0.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.micro_batch is None:
            object.__setattr__(self, "micro_batch", self.effective_batch)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.effective_batch < 1 or self.micro_batch < 1 or self.effective_batch % self.micro_batch:
            raise ValueError(f"micro_batch {self.micro_batch} must divide effective_batch {self.effective_batch}")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must lie in [0, steps)")
        object.__setattr__(self, "betas", tuple(self.betas))


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay from lr_max to lr_min at ``cfg.steps``."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> OptimizerState:
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One AdamW update, in place, using each tensor's ``.grad``.

    Weight decay is decoupled: ``w <- w - lr*wd*w`` happens before and
    independently of the moment-based step.
    """
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"missing gradient for {name}")
        dt = p.dtype.type
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        w = p.data * dt(1.0 - lr * cfg.weight_decay)
        w -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.adam_eps))
        if not np.isfinite(w).all():
            raise NonFiniteError(f"non-finite update for {name}")
        p.data = w


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def corpus_windows(corpus: bytes, window: int) -> np.ndarray:
    """Non-overlapping byte windows, shape ``(n, window)``.

    A corpus shorter than one window becomes a single short window.
    """
    data = np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.int64)
    if data.size < 2:
        raise TrainingError("corpus needs at least 2 bytes")
    n = data.size // window
    if n == 0:
        return data[None, :]
    return data[: n * window].reshape(n, window)


def synthetic_corpus(seed: int = 0, length: int = 1 << 16, period: int = 64) -> bytes:
    """Seeded periodic byte stream of distinct bytes.

    Each byte fixes its successor, so a per-token (content) map can learn it.
    A period dividing the window length makes every window identical.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    pattern = rng.choice(256, size=period, replace=False).astype(np.uint8)
    reps = -(-length // period)
    return np.tile(pattern, reps)[:length].tobytes()


class BatchSampler:
    """Seeded epoch-wise permutations over window indices."""

    def __init__(self, n_windows: int, seed: int):
        self.n = n_windows
        self.rng = np.random.Generator(np.random.Philox(seed))
        self._order = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while self._order.size < k:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        out, self._order = self._order[:k], self._order[k:]
        return out


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    history: list[tuple[int, float, float]]
    state: OptimizerState

    @property
    def losses(self) -> list[float]:
        return [row[2] for row in self.history]


def batch_loss_and_grads(
    params: ParamStore, cfg: ModelConfig, batch: np.ndarray, micro_batch: int
) -> float:
    """Accumulate mean-loss gradients over micro-batches; returns the mean loss.

    Micro-batches are reduced in order, and each contributes ``1/n_micro``
    of its own mean, which equals one full-batch mean since windows have
    equal length.
    """
    trainable = params.trainable()
    zero_grad(trainable.values())
    n_micro = batch.shape[0] // micro_batch
    total = 0.0
    for j in range(n_micro):
        chunk = batch[j * micro_batch : (j + 1) * micro_batch]
        with Tape() as tape:
            logits = model_forward(chunk[:, :-1], params, cfg)
            loss = cross_entropy(logits, chunk[:, 1:])
            scaled = loss * (1.0 / n_micro)
        if trainable:
            backward(scaled, tape)
        total += loss.item()
    return total / n_micro


def probe_train(
    params: ParamStore,
    cfg: ModelConfig,
    corpus: bytes,
    tcfg: TrainConfig,
    state: OptimizerState | None = None,
) -> TrainResult:
    """Train the trainable partition of ``params`` in place for ``tcfg.steps`` steps."""
    if not corpus:
        raise TrainingError("empty corpus")
    windows = corpus_windows(corpus, cfg.max_seq_len)
    sampler = BatchSampler(len(windows), tcfg.seed)
    trainable = params.trainable()
    state = state if state is not None else OptimizerState.for_params(trainable)
    history = []
    for step in range(tcfg.steps):
        lr = cosine_lr(step, tcfg)
        batch = windows[sampler.take(tcfg.effective_batch)]
        try:
            loss = batch_loss_and_grads(params, cfg, batch, tcfg.micro_batch)
        except NonFiniteError as exc:
            raise DivergedError(step, str(exc)) from exc
        if not math.isfinite(loss):
            raise DivergedError(step)
        if trainable:
            try:
                adamw_step(trainable, state, lr, tcfg)
            except NonFiniteError as exc:
                raise DivergedError(step, str(exc)) from exc
        history.append((step, lr, loss))
    zero_grad(trainable.values())
    return TrainResult(params, history, state)


def loss_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "loss"])
    for step, lr, loss in history:
        w.writerow([step, repr(float(lr)), repr(float(loss))])
    return buf.getvalue()
