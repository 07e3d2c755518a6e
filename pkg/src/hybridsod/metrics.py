"""Saliency evaluation: MAE, PR curve, max F-measure and S-measure."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import resize_map
from .exceptions import DataError, ShapeError

log = logging.getLogger(__name__)

THRESHOLDS = np.arange(256) / 255.0
_EPS = np.spacing(1.0)


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _check(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _counts(pred: np.ndarray, gt: np.ndarray):
    """TP and predicted-positive counts for every threshold (pred >= t)."""
    pred = np.asarray(pred, np.float64).ravel()
    gt = np.asarray(gt).ravel().astype(bool)
    fg = np.sort(pred[gt])
    allv = np.sort(pred)
    tp = fg.size - np.searchsorted(fg, THRESHOLDS, side="left")
    pos = allv.size - np.searchsorted(allv, THRESHOLDS, side="left")
    return tp, pos, int(gt.sum())


def image_pr(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold precision and recall of one map (0/0 -> P=1, R=0)."""
    _check(np.asarray(pred), np.asarray(gt))
    tp, pos, n_fg = _counts(pred, gt)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pos > 0, tp / np.maximum(pos, 1), 1.0)
        recall = np.where(n_fg > 0, tp / max(n_fg, 1), 0.0)
    return precision, recall


def pr_curve(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    """256x2 array of image-averaged (precision, recall)."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise DataError("pr_curve needs at least one map")
    p_sum = np.zeros(256)
    r_sum = np.zeros(256)
    for pred, gt in zip(preds, gts):
        p, r = image_pr(pred, gt)
        p_sum += p
        r_sum += r
    return np.stack([p_sum / len(preds), r_sum / len(preds)], axis=1)


def f_measure(pr: np.ndarray, beta2: float = 0.3) -> np.ndarray:
    p, r = pr[:, 0], pr[:, 1]
    num = (1 + beta2) * p * r
    den = beta2 * p + r
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def max_f(pr: np.ndarray, beta2: float = 0.3) -> float:
    return float(np.max(f_measure(np.asarray(pr, np.float64), beta2)))


# ---------------------------------------------------------------- S-measure

def _object_score(x: np.ndarray, mask: np.ndarray) -> float:
    vals = x[mask]
    mean = vals.mean()
    std = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mean / (mean ** 2 + 1.0 + std + _EPS)


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred * gt
    bg = (1.0 - pred) * (~gt)
    u = gt.mean()
    return u * _object_score(fg, gt) + (1 - u) * _object_score(bg, ~gt)


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """(x, y) split point, counted like MATLAB's 1-based rounded centroid."""
    h, w = gt.shape
    if not gt.any():
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    ys, xs = np.nonzero(gt)
    # 1-based coordinates, round half up
    return int(np.floor(xs.mean() + 1 + 0.5)), int(np.floor(ys.mean() + 1 + 0.5))


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    # a constant block's rounded mean leaves ~1e-33 variance, which flips the branch below
    if pred.min() == pred.max():
        x = pred.flat[0]
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    alpha = 4 * x * y * sxy
    beta = (x ** 2 + y ** 2) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    if beta == 0:
        return 1.0
    return 0.0


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    area = h * w
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    w4 = 1.0 - w1 - w2 - w3
    g = gt.astype(np.float64)
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    return sum(wt * _ssim(pred[q], g[q]) for wt, q in zip((w1, w2, w3, w4), quads))


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: object-aware plus region-aware similarity, in [0, 1]."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt).astype(bool)
    _check(pred, gt)
    y = gt.mean()
    if y == 0:
        q = 1.0 - pred.mean()
    elif y == 1:
        q = pred.mean()
    else:
        q = alpha * s_object(pred, gt) + (1 - alpha) * s_region(pred, gt)
    return float(min(max(q, 0.0), 1.0))


# ---------------------------------------------------------------- corpus

@dataclass
class MetricsReport:
    mae: float
    pr_curve: np.ndarray
    max_f: float
    s_measure: float
    n: int
    dataset: str = ""
    per_image: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset, "n": self.n, "mae": self.mae,
            "max_f": self.max_f, "s_measure": self.s_measure,
            "pr": [{"t": int(t), "p": float(p), "r": float(r)}
                   for t, (p, r) in enumerate(self.pr_curve)],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for t, (p, r) in enumerate(self.pr_curve):
                w.writerow([t, repr(float(p)), repr(float(r))])

    def table(self) -> str:
        name = self.dataset or "-"
        return (f"{'dataset':<16}{'n':>6}{'maxF':>9}{'S-m':>9}{'MAE':>9}\n"
                f"{name:<16}{self.n:>6}{self.max_f:>9.4f}{self.s_measure:>9.4f}{self.mae:>9.4f}")


def evaluate_maps(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                  names: Sequence[str] | None = None, dataset: str = "") -> MetricsReport:
    """Aggregate metrics over matched maps; predictions are resized to gt size."""
    if not preds:
        raise DataError("nothing to evaluate")
    names = list(names) if names is not None else [str(i) for i in range(len(preds))]
    fixed, per_image = [], {}
    gts = [np.asarray(g).astype(bool) for g in gts]
    for name, p, g in zip(names, preds, gts):
        p = np.asarray(p, np.float64)
        if p.shape != g.shape:
            p = np.clip(resize_map(p, g.shape), 0, 1)
        fixed.append(p)
        per_image[name] = {"mae": mae(p, g), "s_measure": s_measure(p, g)}
    pr = pr_curve(fixed, gts)
    return MetricsReport(
        mae=float(np.mean([v["mae"] for v in per_image.values()])),
        pr_curve=pr, max_f=max_f(pr),
        s_measure=float(np.mean([v["s_measure"] for v in per_image.values()])),
        n=len(fixed), dataset=dataset, per_image=per_image)


def evaluate_corpus(pred_dir, gt_dir, dataset: str = "") -> MetricsReport:
    """Evaluate PNG maps matched by file stem; unmatched files are skipped with a warning."""
    from .store import GT_THRESHOLD, list_pngs, read_gray

    preds, gts = list_pngs(pred_dir), list_pngs(gt_dir)
    common = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        log.warning("excluding %d unmatched files: %s", len(unmatched), unmatched[:10])
    if not common:
        raise DataError(f"no matching maps between {pred_dir} and {gt_dir}")
    return evaluate_maps([read_gray(preds[k]) for k in common],
                         [read_gray(gts[k], raw=True) >= GT_THRESHOLD for k in common],
                         common, dataset or Path(gt_dir).name)
