"""Shared optimisation loop and model (de)serialisation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .optim import DEFAULT_LR, AdamW

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = DEFAULT_LR
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1
    shuffle: bool = True
    seed: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    def to_dict(self):
        return asdict(self)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Per-epoch rate: constant, or cosine-annealed from ``lr`` towards zero."""
    if cfg.schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * epoch / cfg.epochs))


def fit(model, samples: Sequence, loss_fn: Callable, cfg: TrainConfig, tag: str = "train"):
    """Minimise ``loss_fn(model, sample)`` with AdamW; returns per-epoch mean losses.

    Gradients of ``batch_size`` consecutive samples are averaged per step.
    """
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    opt.zero_grad()
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(samples)) if cfg.shuffle else np.arange(len(samples))
        losses = []
        for pos, idx in enumerate(order):
            loss = loss_fn(model, samples[idx])
            scaled = loss * (1.0 / cfg.batch_size) if cfg.batch_size > 1 else loss
            scaled.backward()
            losses.append(float(loss.data))
            if (pos + 1) % cfg.batch_size == 0 or pos == len(order) - 1:
                opt.step()
                opt.zero_grad()
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d/%d loss %.6f", tag, epoch + 1, cfg.epochs, history[-1])
    return history


def save_model(path, model, kind: str, extra: dict | None = None):
    meta = {"kind": kind, "config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_state(path):
    return load_checkpoint(path)
