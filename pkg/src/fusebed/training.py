"""Contrastive training: NT-Xent, Adam, warmup + cosine schedule, SpecAugment masking."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Item, draw_fs_indices, metadata_to_text, normalize_kind
from .errors import ConfigurationError, DivergenceError
from .model import MODES, HybridRetriever
from .numeric import Parameter, softmax_rows, zero_grads

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    enabled: bool = True
    time_masks: int = 2
    freq_masks: int = 1
    max_time_fraction: float = 0.1
    max_freq_fraction: float = 0.1


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 25
    warmup_epochs: int = 1
    lr_max: float = 2e-5
    lr_min: float = 1e-7
    temperature: float = 0.05
    seed: int = 0
    mode: str = "late"
    metadata: str = "OS"
    shared_text_encoder: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be at least 2, got {self.batch_size}")
        if not self.lr_max > self.lr_min > 0:
            raise ConfigurationError(f"need lr_max > lr_min > 0, got {self.lr_max}, {self.lr_min}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.epochs < self.warmup_epochs or self.warmup_epochs < 0:
            raise ConfigurationError("need 0 <= warmup_epochs <= epochs")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        normalize_kind(self.metadata)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = AugmentConfig(**d.pop("augment", {}))
        return cls(augment=aug, **d)


def nt_xent_loss(sim: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Symmetric NT-Xent over a square score matrix whose diagonal holds the positives.

    Returns the mean of the row-wise and column-wise cross-entropies and the
    exact gradient with respect to ``sim``.
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ConfigurationError(f"score matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    logits = sim / temperature
    p_rows = softmax_rows(logits)
    p_cols = softmax_rows(logits.T).T
    diag = np.arange(b)

    def _nll(z: np.ndarray) -> float:
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        return float((lse - z[diag, diag]).mean())

    loss = 0.5 * (_nll(logits) + _nll(logits.T))
    eye = np.eye(b)
    grad = 0.5 * ((p_rows - eye) + (p_cols - eye)) / (b * temperature)
    return loss, grad


def lr_at(step: int, total_steps: int, warmup_steps: int, cfg: TrainConfig) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.lr_max * step / warmup_steps
    span = total_steps - warmup_steps
    progress = 1.0 if span <= 0 else min(max((step - warmup_steps) / span, 0.0), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Bias-corrected Adam with PyTorch's default coefficients."""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: Sequence[Parameter], state: Adam, lr: float) -> None:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ConfigurationError("optimizer state was built for a different parameter list")
    state.step(lr)


def spec_augment(frames: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Zero up to ``time_masks`` frame spans and ``freq_masks`` channel spans.

    Span widths are uniform on ``0..floor(fraction * extent)``; starts are
    uniform over valid offsets. Time masks are drawn before frequency masks.
    """
    if not cfg.enabled:
        return frames
    out = frames.copy()
    n_t, n_f = frames.shape
    max_t = int(cfg.max_time_fraction * n_t)
    max_f = int(cfg.max_freq_fraction * n_f)
    for _ in range(cfg.time_masks):
        w = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, n_t - w + 1))
        out[start:start + w, :] = 0.0
    for _ in range(cfg.freq_masks):
        w = int(rng.integers(0, max_f + 1))
        start = int(rng.integers(0, n_f - w + 1))
        out[:, start:start + w] = 0.0
    return out


@dataclass
class TrainState:
    optimizer: Adam
    rng: np.random.Generator
    total_steps: int
    warmup_steps: int
    step: int = 0
    epoch: int = 0


def batches_per_epoch(n_items: int, batch_size: int) -> int:
    full, rest = divmod(n_items, batch_size)
    return full + (rest >= 2)


def init_state(model: HybridRetriever, n_items: int, cfg: TrainConfig) -> TrainState:
    per_epoch = batches_per_epoch(n_items, cfg.batch_size)
    return TrainState(
        optimizer=Adam(model.parameters()),
        rng=np.random.default_rng([cfg.seed, 1]),
        total_steps=per_epoch * cfg.epochs,
        warmup_steps=per_epoch * cfg.warmup_epochs,
    )


def _batch_inputs(items: Sequence[Item], kind: str, mode: str, rng: np.random.Generator,
                  aug: AugmentConfig) -> tuple[list[str], list[str] | None, list[np.ndarray] | None]:
    queries, metas, frames = [], [], []
    for item in items:
        if kind == "FS":
            qi, mi = draw_fs_indices(len(item.captions), rng)
            queries.append(item.captions[qi])
            metas.append(metadata_to_text(item, kind, fs_index=mi))
        else:
            queries.append(item.captions[int(rng.integers(len(item.captions)))])
            if mode != "content":
                metas.append(metadata_to_text(item, kind))
        if mode != "metadata":
            frames.append(spec_augment(item.frames, rng, aug))
    return queries, (metas if mode != "content" else None), (frames if mode != "metadata" else None)


def train_epoch(model: HybridRetriever, items: Sequence[Item], cfg: TrainConfig,
                state: TrainState) -> float:
    """One pass over ``items`` in a seeded shuffled order; returns the mean batch loss."""
    if not items:
        raise ConfigurationError("cannot train on an empty split")
    kind = normalize_kind(cfg.metadata)
    order = state.rng.permutation(len(items))
    params = state.optimizer.params
    losses = []
    for start in range(0, len(items), cfg.batch_size):
        batch = [items[i] for i in order[start:start + cfg.batch_size]]
        if len(batch) < 2:
            log.warning("skipping a batch of size %d (contrastive loss needs at least 2)", len(batch))
            continue
        queries, metas, frames = _batch_inputs(batch, kind, model.mode, state.rng, cfg.augment)
        sim, cache = model.score_batch(queries, metas, frames)
        loss, dsim = nt_xent_loss(sim, cfg.temperature)
        zero_grads(params)
        model.backward(dsim, cache)
        state.step += 1
        state.optimizer.step(lr_at(state.step, state.total_steps, state.warmup_steps, cfg))
        losses.append(loss)
    state.epoch += 1
    return float(np.mean(losses)) if losses else math.nan


def train(model: HybridRetriever, dataset: Dataset, cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> tuple[list[float], TrainState]:
    cfg.validate()
    items = dataset.split("train")
    state = init_state(model, len(items), cfg)
    history = []
    for epoch in range(cfg.epochs):
        loss = train_epoch(model, items, cfg, state)
        history.append(loss)
        log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    return history, state
