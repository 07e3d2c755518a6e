"""Synthetic shape corpus for desk-scale experiments and tests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import LabelKind, Sample


@dataclass
class SyntheticItem:
    id: str
    image: np.ndarray
    gt: np.ndarray
    coarse: np.ndarray


def _shape_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    ry, rx = rng.uniform(0.12, 0.28, 2) * size
    kind = rng.integers(3)
    if kind == 0:
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    elif kind == 1:
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        mask = (np.abs(u) <= rx) & (np.abs(v) <= ry)
    else:
        angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
        mask = _triangle(xx, yy, cx + rx * 1.4 * np.cos(angles), cy + ry * 1.4 * np.sin(angles))
        if mask.sum() < 0.01 * size * size:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


def _triangle(xx, yy, xs, ys):
    def side(x1, y1, x2, y2):
        return (xx - x2) * (y1 - y2) - (x1 - x2) * (yy - y2)
    d1 = side(xs[0], ys[0], xs[1], ys[1])
    d2 = side(xs[1], ys[1], xs[2], ys[2])
    d3 = side(xs[2], ys[2], xs[0], ys[0])
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def make_item(rng: np.random.Generator, size: int = 48, sid: str = "0") -> SyntheticItem:
    mask = _shape_mask(rng, size)
    bg = rng.uniform(0.0, 1.0, 3)
    fg = rng.uniform(0.0, 1.0, 3)
    while np.abs(fg - bg).sum() < 0.6:
        fg = rng.uniform(0.0, 1.0, 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    grad = (rng.uniform(-0.2, 0.2, 3)[None, None] * yy[..., None]
            + rng.uniform(-0.2, 0.2, 3)[None, None] * xx[..., None])
    image = np.where(mask[..., None], fg, bg) + grad
    image = image + rng.normal(0, 0.05, image.shape)
    image = np.clip(image, 0, 1)
    gt = mask.astype(np.float64)

    radius = int(rng.integers(2, 6))
    struct = ndimage.generate_binary_structure(2, 1)
    coarse = ndimage.binary_dilation(mask, struct, iterations=radius).astype(np.float64)
    shift = rng.integers(-2, 3, 2)
    coarse = np.roll(coarse, tuple(shift), axis=(0, 1))
    coarse = ndimage.gaussian_filter(coarse, 1.5)
    coarse = coarse + rng.normal(0, 0.12, coarse.shape)
    # spurious blob
    by, bx = rng.integers(0, size, 2)
    blob = np.zeros_like(coarse)
    blob[by, bx] = 1.0
    coarse = coarse + 0.6 * ndimage.gaussian_filter(blob, size / 12) / (
        ndimage.gaussian_filter(blob, size / 12).max() + 1e-12)
    coarse = np.clip(coarse, 0, 1)
    return SyntheticItem(sid, image, gt, coarse)


def make_corpus(n: int, size: int = 48, seed: int = 0, prefix: str = "s") -> list[SyntheticItem]:
    rng = np.random.default_rng(seed)
    return [make_item(rng, size, f"{prefix}{i:04d}") for i in range(n)]


def training_samples(items, num_real: int) -> list[Sample]:
    """First ``num_real`` items carry real labels; the rest only coarse ones."""
    out = []
    for i, it in enumerate(items):
        if i < num_real:
            out.append(Sample(it.id, it.image, it.gt, LabelKind.REAL, coarse=it.coarse))
        else:
            out.append(Sample(it.id, it.image, it.coarse, LabelKind.COARSE, coarse=it.coarse))
    return out


def eval_samples(items) -> list[Sample]:
    return [Sample(it.id, it.image, it.gt, LabelKind.REAL, coarse=it.coarse) for it in items]


def write_dataset(root, items, num_real: int | None = None) -> Path:
    """Write the standard folder layout; ``num_real=None`` writes every real label."""
    from .store import write_gray, write_rgb

    root = Path(root)
    for i, it in enumerate(items):
        write_rgb(root / "images" / f"{it.id}.png", it.image)
        write_gray(root / "labels_coarse" / f"{it.id}.png", it.coarse)
        if num_real is None or i < num_real:
            write_gray(root / "labels_real" / f"{it.id}.png", it.gt)
    return root
