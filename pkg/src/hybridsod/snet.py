"""Replaceable saliency network: the interface and a reference encoder-decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn

from ._torchnet import NORMS, PlainEncoder, TorchNetwork, conv_block, to_nchw, upsample_to
from .checkpoint import load_checkpoint
from .data import LabelKind, Sample, resize_map
from .exceptions import ConfigError, DataError
from .losses import bce


@runtime_checkable
class SaliencyNetwork(Protocol):
    """What the orchestrator needs from an S-Net.

    ``predict`` returns BxHxW maps in [0, 1] at the input resolution and must
    be deterministic for fixed parameters.
    """

    input_size: int

    def train_step(self, images: np.ndarray, labels: np.ndarray, lr: float) -> float: ...

    def predict(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray: ...

    def reset_optimizer(self, weight_decay: float = 5e-4, beta1: float = 0.9) -> None: ...

    def get_state(self) -> dict: ...

    def set_state(self, state: dict) -> None: ...

    def save(self, path): ...

    def load(self, path) -> None: ...


@dataclass(frozen=True)
class SNetConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    input_size: int = 320
    norm: str = "group"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if len(self.encoder_channels) != 5 or min(self.encoder_channels) <= 0:
            raise ConfigError(f"need 5 positive encoder widths, got {self.encoder_channels}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}


class UNetSNet(nn.Module):
    def __init__(self, config: SNetConfig):
        super().__init__()
        ch = config.encoder_channels
        self.encoder = PlainEncoder(3, ch, config.norm)
        self.decoder = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch[i + 1], ch[i], 1), nn.ReLU()) for i in range(4))
        self.fuse = nn.ModuleList(conv_block(2 * ch[i], ch[i], config.norm) for i in range(4))
        self.head = nn.Conv2d(ch[0], 1, 1)

    def forward(self, x):
        size = x.shape[-2:]
        feats = self.encoder(x)
        y = feats[-1]
        for i in reversed(range(4)):
            y = upsample_to(self.decoder[i](y), feats[i].shape[-2:])
            y = self.fuse[i](torch.cat([y, feats[i]], dim=1))
        return torch.sigmoid(upsample_to(self.head(y), size))


class ReferenceSNet(TorchNetwork):
    """Single-stream encoder-decoder with skip connections, trained with BCE."""

    kind = "snet"

    def __init__(self, config: SNetConfig = SNetConfig(), seed: int = 0, dtype=torch.float32):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module = UNetSNet(config)
        super().__init__(module, config, dtype)

    @property
    def input_size(self) -> int:
        return self.config.input_size

    def config_dict(self):
        return {"snet": self.config.to_dict()}

    @classmethod
    def from_checkpoint(cls, path) -> "ReferenceSNet":
        arrays, cfg, kind = load_checkpoint(path)
        if kind != cls.kind:
            raise DataError(f"{path}: checkpoint holds {kind!r}, not snet")
        net = cls(SNetConfig(**cfg["snet"]))
        net.set_state(arrays)
        return net

    def loss(self, images, labels) -> torch.Tensor:
        return bce(self.module(to_nchw(images, self.dtype)), to_nchw(labels, self.dtype))

    def train_step(self, images, labels, lr: float) -> float:
        self.module.train()
        return self._apply(self.loss(images, labels), lr)

    @torch.no_grad()
    def predict(self, images, batch_size: int = 8) -> np.ndarray:
        self.module.eval()
        images = np.asarray(images)
        out = [self.module(to_nchw(images[s:s + batch_size], self.dtype))[:, 0].double().numpy()
               for s in range(0, len(images), batch_size)]
        if not out:
            return np.zeros((0,) + images.shape[1:3])
        return np.concatenate(out)


def reference_snet(config: SNetConfig = SNetConfig(), seed: int = 0) -> ReferenceSNet:
    return ReferenceSNet(config, seed)


def predict_pseudo_labels_s(samples: Sequence[Sample], net: SaliencyNetwork,
                            batch_size: int = 8) -> list[Sample]:
    """S-Net pseudo labels: RGB only, no coarse input."""
    if not samples:
        return []
    hw = (net.input_size, net.input_size)
    maps = net.predict(np.stack([resize_map(s.image, hw) for s in samples]), batch_size)
    return [s.replace(label=np.clip(resize_map(m, s.shape), 0, 1), label_kind=LabelKind.PSEUDO,
                      coarse=s.coarse_map())
            for s, m in zip(samples, maps)]
