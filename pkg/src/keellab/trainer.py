"""Byte-level language-model training: schedule, AdamW, batching, evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericOverflow
from .tensor import no_grad
from . import tensor as T
from .topology import Model, forward_lm, lm_loss

log = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = ("ln_in", "ln_out", "beta", "final_norm", "embed")


@dataclass
class TrainConfig:
    peak_lr: float = 3e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    final_lr: float = 1e-7
    batch_size: int = 4
    seq_len: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("warmup_steps", "total_steps", "batch_size", "seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} exceeds total_steps={self.total_steps}")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")
        if self.final_lr < 0:
            raise ConfigError("final_lr must be non-negative")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be positive (use inf to disable)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float
    grad_norm_preclip: float
    overflow: bool = False

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "lr": self.lr, "loss": self.loss,
                           "grad_norm_preclip": self.grad_norm_preclip,
                           "overflow": self.overflow}, allow_nan=True)

    @classmethod
    def from_json(cls, line: str) -> "StepMetrics":
        return cls(**json.loads(line))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``final_lr``."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.peak_lr
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_by_global_norm(grads: list, max_norm: float):
    """Scale ``grads`` so their joint norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if math.isfinite(max_norm) and norm > max_norm:
        s = max_norm / norm
        grads = [g * s for g in grads]
    return grads, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig,
               no_decay: Sequence[str] = ()) -> float:
    """One clipped AdamW update of ``params`` (name -> array) in place.

    Returns the pre-clip global gradient norm. Non-finite gradients leave
    everything untouched and return ``inf``/``nan``.
    """
    names = [n for n in params if n in grads]
    g_list, norm = clip_by_global_norm([grads[n] for n in names], cfg.grad_clip_norm)
    if not math.isfinite(norm):
        return norm
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    no_decay = set(no_decay)
    for n, g in zip(names, g_list):
        p = params[n]
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p)
            state.v[n] = np.zeros_like(p)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and n not in no_decay:
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return norm


def no_decay_names(model: Model) -> list:
    return [n for n in model.params if n.rsplit(".", 1)[-1] in NO_DECAY_SUFFIXES]


# -- data ------------------------------------------------------------------------

def load_corpus(paths) -> np.ndarray:
    """Concatenate files as raw bytes (vocabulary 256)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"corpus file not found: {p}")
        chunks.append(np.frombuffer(p.read_bytes(), dtype=np.uint8))
    data = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint8)
    if data.size == 0:
        raise ConfigError("corpus is empty")
    return data


def split_corpus(data: np.ndarray, holdout_fraction: float = 0.1):
    """Return ``(train, heldout)``; the held-out slice is the tail."""
    cut = int(len(data) * (1.0 - holdout_fraction))
    return data[:cut], data[cut:]


class Batcher:
    """Seeded uniform sampling of ``(B, T+1)`` windows."""

    def __init__(self, data: np.ndarray, batch_size: int, seq_len: int, seed: int):
        self.data = np.asarray(data)
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.hi = len(self.data) - (seq_len + 1)
        if self.hi < 0 or len(self.data) < batch_size * (seq_len + 1):
            raise ConfigError(f"corpus of {len(self.data)} bytes is shorter than one batch "
                              f"({batch_size} x {seq_len + 1})")
        self.rng = np.random.default_rng(seed)
        self._offs = np.arange(seq_len + 1)

    def next(self) -> np.ndarray:
        starts = self.rng.integers(0, self.hi + 1, size=self.batch_size)
        return self.data[starts[:, None] + self._offs].astype(np.int64)

    def take(self, n: int) -> list:
        return [self.next() for _ in range(n)]


# -- loop ------------------------------------------------------------------------

@dataclass
class RunRecord:
    metrics: list
    model: Model
    aborted: bool = False
    abort_reason: Optional[str] = None


class TrainSession:
    """Step-at-a-time training state: batcher, optimiser and metric stream.

    Step ``s`` (1-based) evaluates the loss of batch ``s`` at the current
    parameters, then updates with ``lr_fn(s)``. A non-finite forward or
    gradient skips the update and is recorded as overflow.
    """

    def __init__(self, model: Model, corpus: np.ndarray, cfg: TrainConfig,
                 lr_fn: Optional[Callable[[int], float]] = None):
        self.model = model
        self.cfg = cfg
        self.batcher = Batcher(corpus, cfg.batch_size, cfg.seq_len, cfg.seed)
        self.state = AdamState()
        self.exempt = no_decay_names(model)
        self.params = {n: t.data for n, t in model.params.items()}
        self.lr_fn = lr_fn or (lambda s: lr_at(s, cfg))
        self.metrics: list = []

    @property
    def done(self) -> bool:
        return len(self.metrics) >= self.cfg.total_steps

    def step(self) -> StepMetrics:
        model = self.model
        step = len(self.metrics) + 1
        batch = self.batcher.next()
        lr = self.lr_fn(step)
        model.zero_grad()
        overflow = False
        loss_v = float("nan")
        gnorm = float("nan")
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, _ = lm_loss(model, batch)
                loss_v = loss.item()
                loss.backward()
        except NumericOverflow:
            overflow = True
        if not overflow:
            grads = {n: t.grad for n, t in model.params.items() if t.grad is not None}
            gnorm = adamw_step(self.params, grads, self.state, lr, self.cfg, self.exempt)
            overflow = not (math.isfinite(gnorm) and math.isfinite(loss_v))
        model.zero_grad()
        m = StepMetrics(step, lr, loss_v, gnorm, overflow)
        self.metrics.append(m)
        return m


def train(model: Model, corpus: np.ndarray, cfg: TrainConfig, hooks: Sequence[Callable] = (),
          metrics_path=None, lr_fn: Optional[Callable[[int], float]] = None) -> RunRecord:
    """Run ``cfg.total_steps`` optimisation steps on ``model`` in place.

    Each hook is called as ``hook(metrics_so_far)`` after every step; a
    truthy return value (used as the reason) stops training.
    """
    session = TrainSession(model, corpus, cfg, lr_fn)
    record = RunRecord(session.metrics, model)
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        while not session.done:
            m = session.step()
            if sink:
                sink.write(m.to_json() + "\n")
            for hook in hooks:
                reason = hook(session.metrics)
                if reason:
                    record.aborted = True
                    record.abort_reason = str(reason)
                    return record
    finally:
        if sink:
            sink.close()
    return record


def evaluate_ppl(model: Model, data: np.ndarray, seq_len: int, max_windows: Optional[int] = None,
                 batch_windows: int = 16) -> float:
    """``exp`` of the mean next-token cross-entropy over non-overlapping windows."""
    data = np.asarray(data, dtype=np.int64)
    n = (len(data) - 1) // seq_len
    if n < 1:
        raise ConfigError(f"evaluation slice of {len(data)} bytes is shorter than seq_len+1")
    if max_windows is not None:
        n = min(n, max_windows)
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)
    windows = data[idx]
    total = 0.0
    with no_grad():
        for i in range(0, n, batch_windows):
            chunk = windows[i:i + batch_windows]
            logits, _ = forward_lm(model, chunk[:, :-1])
            total += T.cross_entropy(logits, chunk[:, 1:]).item() * chunk.shape[0]
    return math.exp(total / n)
