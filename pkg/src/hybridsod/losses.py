"""BCE and the deep-supervision loss for the refinement network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigError, ShapeError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    aux: tuple[float, float, float] = (0.2, 0.4, 0.8)

    def __post_init__(self):
        if len(self.aux) != 3 or any(w < 0 for w in self.aux):
            raise ConfigError(f"need 3 nonnegative auxiliary weights, got {self.aux}")


def bce(pred, label, eps: float = EPS):
    """Pixel-mean binary cross-entropy; accepts numpy arrays or torch tensors."""
    if tuple(pred.shape) != tuple(label.shape):
        raise ShapeError(f"pred {tuple(pred.shape)} vs label {tuple(label.shape)}")
    if isinstance(pred, torch.Tensor):
        p = pred.clamp(eps, 1 - eps)
        return -(label * torch.log(p) + (1 - label) * torch.log(1 - p)).mean()
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(label, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


LABEL_KINDS = ("real", "pseudo", "contaminated")


def rnet_loss(pred, label, kind: str = "real", weights: LossWeights = LossWeights()):
    """Dominant loss on the final map plus weighted auxiliary side-output losses.

    ``pred`` is a :class:`~hybridsod.rnet.SaliencyPrediction` (or anything with
    ``final`` and a 3-sequence ``aux``). ``kind`` only records which
    supervision pool the batch came from; the formula is the same.
    """
    if kind not in LABEL_KINDS:
        raise ConfigError(f"unknown label kind {kind!r}")
    if len(pred.aux) != 3:
        raise ShapeError(f"expected 3 auxiliary maps, got {len(pred.aux)}")
    total = bce(pred.final, label)
    for lam, aux in zip(weights.aux, pred.aux):
        total = total + lam * bce(aux, label)
    return total
