"""Refinement network: two-stream encoder with guided/aggregated decoding."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from ._torchnet import (NORMS, PlainEncoder, ResNet50Encoder, TorchNetwork, conv_block, to_nchw,
                        upsample_to)
from .data import LabelKind, Sample, resize_map
from .exceptions import ConfigError, DataError, ShapeError
from .losses import LossWeights, rnet_loss


@dataclass(frozen=True)
class RNetConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    input_size: int = 288
    mainstream_in_channels: int = 4
    guidance_in_channels: int = 3
    backbone: str = "plain"
    reduction: int = 16
    min_hidden: int = 4
    sa_kernel: int = 7
    norm: str = "group"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if len(self.encoder_channels) != 5 or min(self.encoder_channels) <= 0:
            raise ConfigError(f"need 5 positive encoder widths, got {self.encoder_channels}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")
        if self.backbone not in ("plain", "resnet50"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "resnet50":
            object.__setattr__(self, "encoder_channels", ResNet50Encoder.channels)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}


class SaliencyPrediction(NamedTuple):
    final: torch.Tensor
    aux: tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class ChannelAttention(nn.Module):
    """Avg- and max-pooled descriptors through a shared bottleneck, summed, sigmoid."""

    def __init__(self, channels: int, reduction: int = 16, min_hidden: int = 4):
        super().__init__()
        hidden = max(channels // reduction, min_hidden)
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1, bias=False), nn.ReLU(),
                                 nn.Conv2d(hidden, channels, 1, bias=False))

    def forward(self, x):
        avg = self.mlp(x.mean(dim=(2, 3), keepdim=True))
        mx = self.mlp(x.amax(dim=(2, 3), keepdim=True))
        return torch.sigmoid(avg + mx).flatten(1)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _mask(override, like):
    return torch.as_tensor(override, dtype=like.dtype)


class GuidanceStage(nn.Module):
    """Cross-stream fusion of one encoder level.

    Channel attention filters the concatenated streams; a spatial mask from
    the RGB stream reweights them residually before a 1x1 projection.
    """

    def __init__(self, in_channels: int, out_channels: int, reduction=16, min_hidden=4,
                 sa_kernel=7):
        super().__init__()
        self.ca = ChannelAttention(2 * in_channels, reduction, min_hidden)
        self.sa = SpatialAttention(sa_kernel)
        self.proj = nn.Conv2d(2 * in_channels, out_channels, 1)

    def forward(self, f_srm, f_rgb, ca_override=None, sa_override=None):
        _check_same(f_srm, f_rgb, "guidance stage inputs")
        cat = torch.cat([f_srm, f_rgb], dim=1)
        w = self.ca(cat) if ca_override is None else _mask(ca_override, cat)
        if w.dim() == 2:
            w = w[:, :, None, None]
        f_com = cat * w
        m = self.sa(f_rgb) if sa_override is None else _mask(sa_override, cat)
        return self.proj(m * f_com + f_com)


class SemanticFusion(nn.Module):
    """Per-position convex gate between global and encoder features."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate = nn.Conv2d(2 * channels, 1, 1)

    def weight(self, f_g, f_en):
        return torch.sigmoid(self.gate(torch.cat([f_g, f_en], dim=1)))

    def forward(self, f_g, f_en, gate_override=None):
        _check_same(f_g, f_en, "semantic fusion inputs")
        p = self.weight(f_g, f_en) if gate_override is None else _mask(gate_override, f_g)
        return p * f_g + (1 - p) * f_en


class AggregationStage(nn.Module):
    def __init__(self, sa_kernel: int = 7):
        super().__init__()
        self.sa = SpatialAttention(sa_kernel)

    @staticmethod
    def refine(up, f_s):
        """Semantic mask applied to the upsampled decoder feature."""
        _check_same(f_s, up, "semantic vs upsampled decoder features")
        return up * torch.sigmoid(f_s)

    def forward(self, f_de_next, f_s, f_en, sa_override=None):
        up = upsample_to(f_de_next, f_en.shape[-2:])
        _check_same(up, f_en, "upsampled decoder vs encoder features")
        f_der = self.refine(up, f_s)
        m = self.sa(f_en) if sa_override is None else _mask(sa_override, f_en)
        return up + f_der + m * f_en


class RNet(nn.Module):
    def __init__(self, config: RNetConfig = RNetConfig()):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        if config.backbone == "resnet50":
            self.main_encoder = ResNet50Encoder(config.mainstream_in_channels)
            self.guide_encoder = ResNet50Encoder(config.guidance_in_channels)
        else:
            self.main_encoder = PlainEncoder(config.mainstream_in_channels, ch, config.norm)
            self.guide_encoder = PlainEncoder(config.guidance_in_channels, ch, config.norm)
        kw = dict(reduction=config.reduction, min_hidden=config.min_hidden,
                  sa_kernel=config.sa_kernel)
        self.guidance = nn.ModuleList(GuidanceStage(c, c, **kw) for c in ch)
        self.global_proj = nn.ModuleList(nn.Conv2d(2 * ch[-1], c, 1) for c in ch)
        self.fusion = nn.ModuleList(SemanticFusion(c) for c in ch)
        self.aggregation = nn.ModuleList(AggregationStage(config.sa_kernel) for _ in ch)
        out_widths = (ch[0],) + ch[:-1]
        self.post = nn.ModuleList(conv_block(c, o, config.norm) for c, o in zip(ch, out_widths))
        self.head = nn.Conv2d(out_widths[0], 1, 1)
        # side outputs on decoder levels 4, 3, 2 (deepest first)
        self.aux_heads = nn.ModuleList(nn.Conv2d(out_widths[i], 1, 1) for i in (3, 2, 1))

    def encode(self, image, coarse):
        if image.shape[-2:] != coarse.shape[-2:] or image.shape[0] != coarse.shape[0]:
            raise ShapeError(f"image {tuple(image.shape)} vs coarse {tuple(coarse.shape)}")
        main = self.main_encoder(torch.cat([image, coarse], dim=1))
        guide = self.guide_encoder(image)
        return main, guide

    def global_feature(self, f_srm_top, f_rgb_top, level: int, size):
        """Fused top-level semantics projected to level ``level`` (0-based)."""
        f_g = self.global_proj[level](torch.cat([f_srm_top, f_rgb_top], dim=1))
        return upsample_to(f_g, size)

    def decode(self, main, guide):
        levels = len(main)
        f_en = [self.guidance[i](main[i], guide[i]) for i in range(levels)]
        top = levels - 1
        f_de = self.global_feature(main[top], guide[top], top, main[top].shape[-2:])
        outputs = [None] * levels
        for i in reversed(range(levels)):
            f_g = self.global_feature(main[top], guide[top], i, f_en[i].shape[-2:])
            f_s = self.fusion[i](f_g, f_en[i])
            f_de = self.post[i](self.aggregation[i](f_de, f_s, f_en[i]))
            outputs[i] = f_de
        return outputs

    def forward(self, image, coarse):
        size = image.shape[-2:]
        outputs = self.decode(*self.encode(image, coarse))
        final = torch.sigmoid(upsample_to(self.head(outputs[0]), size))
        aux = tuple(torch.sigmoid(upsample_to(h(outputs[i]), size))
                    for h, i in zip(self.aux_heads, (3, 2, 1)))
        return SaliencyPrediction(final, aux)


class RefinementNetwork(TorchNetwork):
    """Trainable R-Net: maps (image, coarse label) to a refined saliency map."""

    kind = "rnet"

    def __init__(self, config: RNetConfig = RNetConfig(), seed: int = 0,
                 loss_weights: LossWeights = LossWeights(), dtype=torch.float32):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module = RNet(config)
        self.loss_weights = loss_weights
        super().__init__(module, config, dtype)

    def config_dict(self):
        return {"rnet": self.config.to_dict(), "loss_weights": list(self.loss_weights.aux)}

    @classmethod
    def from_checkpoint(cls, path):
        from .checkpoint import load_checkpoint

        arrays, cfg, kind = load_checkpoint(path)
        if kind != cls.kind:
            raise DataError(f"{path}: checkpoint holds {kind!r}, not rnet")
        net = cls(RNetConfig(**cfg["rnet"]), loss_weights=LossWeights(tuple(cfg["loss_weights"])))
        net.set_state(arrays)
        return net

    def train_step(self, images, coarse, labels, lr: float, kind: str = "real") -> float:
        self.module.train()
        pred = self.module(to_nchw(images, self.dtype), to_nchw(coarse, self.dtype))
        loss = rnet_loss(pred, to_nchw(labels, self.dtype), kind, self.loss_weights)
        return self._apply(loss, lr)

    @torch.no_grad()
    def predict(self, images, coarse, batch_size: int = 8) -> np.ndarray:
        """Final maps, shape BxHxW, at the input resolution."""
        self.module.eval()
        images, coarse = np.asarray(images), np.asarray(coarse)
        out = []
        for s in range(0, len(images), batch_size):
            pred = self.module(to_nchw(images[s:s + batch_size], self.dtype),
                               to_nchw(coarse[s:s + batch_size], self.dtype))
            out.append(pred.final[:, 0].double().numpy())
        if not out:
            return np.zeros((0,) + images.shape[1:3])
        return np.concatenate(out)


def _net_inputs(samples: Sequence[Sample], size: int, with_coarse: bool):
    hw = (size, size)
    images = np.stack([resize_map(s.image, hw) for s in samples])
    if not with_coarse:
        return images, None
    coarse = []
    for s in samples:
        c = s.coarse_map()
        if c is None:
            raise DataError(f"{s.id}: no coarse label for R-Net input")
        coarse.append(np.clip(resize_map(c, hw), 0, 1))
    return images, np.stack(coarse)


def predict_pseudo_labels(samples: Sequence[Sample], net: RefinementNetwork,
                          batch_size: int = 8) -> list[Sample]:
    """Refine the coarse labels of ``samples`` into pseudo labels."""
    if not samples:
        return []
    images, coarse = _net_inputs(samples, net.config.input_size, with_coarse=True)
    maps = net.predict(images, coarse, batch_size)
    return [s.replace(label=np.clip(resize_map(m, s.shape), 0, 1), label_kind=LabelKind.PSEUDO,
                      coarse=s.coarse_map())
            for s, m in zip(samples, maps)]
