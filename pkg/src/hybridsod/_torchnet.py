"""Shared plumbing for the torch-backed networks: encoder, optimizer, state I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import DataError, ShapeError


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


NORMS = ("group", "none")


def norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    # up to 4 groups of at least 4 channels: tiny (1x1) maps keep some signal
    groups = max(1, min(4, channels // 4))
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


def conv_block(in_ch: int, out_ch: int, norm: str, stride: int = 1) -> nn.Sequential:
    """conv3x3 -> norm -> ReLU."""
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
                         norm_layer(norm, out_ch), nn.ReLU())


class PlainEncoder(nn.Module):
    """Five stages of (conv3x3/2, conv3x3), each followed by norm + ReLU."""

    def __init__(self, in_channels: int, channels, norm: str = "group"):
        super().__init__()
        stages, prev = [], in_channels
        for c in channels:
            stages.append(nn.Sequential(conv_block(prev, c, norm, stride=2),
                                        conv_block(c, c, norm)))
            prev = c
        self.stages = nn.ModuleList(stages)
        self.channels = tuple(channels)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def duplicate_input_weights(weight: torch.Tensor, in_channels: int = 4) -> torch.Tensor:
    """Widen an RGB first-layer kernel: repeat the 3 input channels, keep the first N."""
    return torch.cat([weight, weight], dim=1)[:, :in_channels].clone()


class ResNet50Encoder(nn.Module):
    """torchvision ResNet-50 trunk exposing its five stride levels (no weights shipped)."""

    channels = (64, 256, 512, 1024, 2048)

    def __init__(self, in_channels: int = 3):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if in_channels != 3:
            conv = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
            with torch.no_grad():
                conv.weight.copy_(duplicate_input_weights(net.conv1.weight, in_channels))
            net.conv1 = conv
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x):
        x = self.stem(x)
        feats = [x]
        x = self.pool(x)
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


def to_nchw(images: np.ndarray, dtype) -> torch.Tensor:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ShapeError(f"expected BxHxWxC array, got {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


class TorchNetwork:
    """Trainer wrapper: owns a module, its Adam optimizer and state round-trips."""

    kind = ""

    def __init__(self, module: nn.Module, config, dtype=torch.float32):
        self.module = module.to(dtype)
        self.config = config
        self.dtype = dtype
        self.optimizer = None
        self.reset_optimizer()

    def reset_optimizer(self, weight_decay: float = 5e-4, beta1: float = 0.9):
        self.optimizer = torch.optim.Adam(self.module.parameters(), lr=1e-4,
                                          betas=(beta1, 0.999), weight_decay=weight_decay)

    def _apply(self, loss: torch.Tensor, lr: float) -> float:
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.module.state_dict().items()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.module.state_dict()
        missing = set(own) ^ set(state)
        if missing:
            raise DataError(f"parameter names differ: {sorted(missing)[:5]}")
        self.module.load_state_dict({k: torch.from_numpy(np.array(v)).to(own[k].dtype)
                                     for k, v in state.items()})

    def config_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> Path:
        return save_checkpoint(path, self.get_state(), self.config_dict(), kind=self.kind)

    def load(self, path) -> None:
        arrays, _, kind = load_checkpoint(path)
        if kind != self.kind:
            raise DataError(f"{path}: checkpoint holds {kind!r}, expected {self.kind!r}")
        self.set_state(arrays)
