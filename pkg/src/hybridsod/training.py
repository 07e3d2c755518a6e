"""Optimizer policy and the per-epoch loop (pseudo batches first, then real)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import flip_rotate
from .exceptions import ConfigError, MisuseError, TrainingAborted


@dataclass(frozen=True)
class OptimizerPolicy:
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9  # Adam beta1
    epochs: int = 30
    warmup_steps: int = 500

    def __post_init__(self):
        for name in ("batch_size", "lr", "lr_decay_every", "lr_decay_factor", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"optimizer.{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1 or self.warmup_steps < 0:
            raise ConfigError("optimizer: invalid weight_decay/momentum/warmup_steps")


def learning_rate(policy: OptimizerPolicy, epoch: int, step: int = 0, iteration: int = 1) -> float:
    """Step decay every ``lr_decay_every`` epochs; linear warmup in iteration 1 only."""
    lr = policy.lr * policy.lr_decay_factor ** (epoch // policy.lr_decay_every)
    if iteration == 1 and step < policy.warmup_steps:
        lr *= step / policy.warmup_steps
    return lr


@dataclass
class EpochStats:
    epoch: int
    pseudo_loss: float = math.nan
    real_loss: float = math.nan
    pseudo_batches: int = 0
    real_batches: int = 0
    step_start: int = 0
    step_end: int = 0
    lr_first: float = math.nan
    lr_last: float = math.nan
    order: list[str] = field(default_factory=list)

    def to_metric(self) -> dict:
        def r(v):
            return None if math.isnan(v) else v
        return {"epoch": self.epoch, "pseudo_loss": r(self.pseudo_loss),
                "real_loss": r(self.real_loss), "pseudo_batches": self.pseudo_batches,
                "real_batches": self.real_batches, "lr_first": r(self.lr_first),
                "lr_last": r(self.lr_last)}


def epoch_loop(net, pseudo_batches: Sequence[tuple], real_batches: Sequence[tuple],
               policy: OptimizerPolicy, epoch: int, iteration: int = 1,
               step: int = 0) -> EpochStats:
    """One epoch: every pseudo/contaminated batch, then every real batch.

    A batch is the positional argument tuple for ``net.train_step``.
    """
    if not pseudo_batches and not real_batches:
        raise MisuseError("epoch_loop called with no batches")
    stats = EpochStats(epoch, step_start=step)
    for kind, batches in (("pseudo", pseudo_batches), ("real", real_batches)):
        losses = []
        for batch in batches:
            lr = learning_rate(policy, epoch, step, iteration)
            if not stats.order:
                stats.lr_first = lr
            loss = net.train_step(*batch, lr=lr)
            if not math.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss {loss} at iteration {iteration}, epoch {epoch}, "
                    f"{kind} batch {len(losses)}, step {step}, lr {lr:g}")
            losses.append(loss)
            stats.order.append(kind)
            stats.lr_last = lr
            step += 1
        if losses:
            setattr(stats, f"{kind}_loss", float(np.mean(losses)))
            setattr(stats, f"{kind}_batches", len(losses))
    stats.step_end = step
    return stats


def make_batches(pool: Sequence[tuple[np.ndarray, ...]], batch_size: int,
                 rng: np.random.Generator, augment: bool = True) -> list[tuple[np.ndarray, ...]]:
    """Shuffle per-sample array tuples into stacked batches.

    With ``augment`` each sample gets one random flip / quarter-turn applied
    to all of its arrays.
    """
    if not pool:
        return []
    order = rng.permutation(len(pool))
    items = []
    for i in order:
        arrays = pool[i]
        if augment:
            flip, k = bool(rng.integers(2)), int(rng.integers(4))
            arrays = tuple(flip_rotate(a, flip, k) for a in arrays)
        items.append(arrays)
    batches = []
    for s in range(0, len(items), batch_size):
        chunk = items[s:s + batch_size]
        batches.append(tuple(np.stack(col) for col in zip(*chunk)))
    return batches
