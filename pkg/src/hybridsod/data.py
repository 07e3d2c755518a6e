"""Samples, hybrid-label grouping, coarse labels, contamination and augmentation."""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .exceptions import ConfigError, MisuseError, ShapeError


class LabelKind(str, enum.Enum):
    REAL = "real"
    COARSE = "coarse"
    PSEUDO = "pseudo"
    CONTAMINATED = "contaminated"
    NONE = "none"


@dataclass
class Sample:
    """One training or evaluation item.

    ``label`` is the supervision map (or the coarse map for coarse-only
    samples). ``coarse`` carries the unsupervised map used as R-Net input
    and may coexist with a real or pseudo ``label``.
    """

    id: str
    image: np.ndarray
    label: np.ndarray | None = None
    label_kind: LabelKind = LabelKind.NONE
    source_group: int | None = None
    coarse: np.ndarray | None = None

    def __post_init__(self):
        self.label_kind = LabelKind(self.label_kind)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        hw = self.image.shape[:2]
        for name in ("label", "coarse"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != hw:
                raise ShapeError(f"{self.id}: {name} shape {arr.shape} != image {hw}")
        if self.label is None and self.label_kind not in (LabelKind.NONE,):
            raise ShapeError(f"{self.id}: label_kind={self.label_kind.value} without label")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def coarse_map(self) -> np.ndarray | None:
        if self.coarse is not None:
            return self.coarse
        if self.label_kind is LabelKind.COARSE:
            return self.label
        return None

    def replace(self, **changes) -> "Sample":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class GroupPartition:
    groups: tuple[tuple[str, ...], ...]
    real_group_index: int = 1

    def __len__(self):
        return len(self.groups)

    def group(self, index: int) -> tuple[str, ...]:
        """1-based group lookup."""
        if not 1 <= index <= len(self.groups):
            raise IndexError(f"group {index} out of range 1..{len(self.groups)}")
        return self.groups[index - 1]

    def group_of(self) -> dict[str, int]:
        return {sid: g for g, ids in enumerate(self.groups, start=1) for sid in ids}

    def to_dict(self) -> dict:
        return {"real_group_index": self.real_group_index,
                "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupPartition":
        return cls(tuple(tuple(g) for g in d["groups"]), d.get("real_group_index", 1))


def _check_range(name, rng, lo_ok, hi_ok):
    lo, hi = rng
    if lo > hi:
        raise ConfigError(f"{name}: empty range {rng}")
    if not (lo_ok(lo) and hi_ok(hi)):
        raise ConfigError(f"{name}: {rng} outside allowed interval")


@dataclass(frozen=True)
class ContaminationSpec:
    rotation_degrees: tuple[float, float] = (-15.0, 15.0)
    crop_fraction: tuple[float, float] = (0.10, 0.20)
    occlusion_area_fraction: tuple[float, float] = (0.0, 0.25)
    seed: int = 0
    # None places the occluder at random; "top-left" pins it for tests
    occlusion_anchor: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "rotation_degrees", tuple(map(float, self.rotation_degrees)))
        object.__setattr__(self, "crop_fraction", tuple(map(float, self.crop_fraction)))
        object.__setattr__(self, "occlusion_area_fraction",
                           tuple(map(float, self.occlusion_area_fraction)))
        _check_range("rotation_degrees", self.rotation_degrees,
                     lambda v: v >= -180, lambda v: v <= 180)
        frac = (lambda v: 0.0 <= v < 1.0)
        _check_range("crop_fraction", self.crop_fraction, frac, frac)
        _check_range("occlusion_area_fraction", self.occlusion_area_fraction, frac, frac)
        if self.occlusion_anchor not in (None, "top-left"):
            raise ConfigError(f"unknown occlusion_anchor {self.occlusion_anchor!r}")


# ---------------------------------------------------------------- partition

def partition(samples: Iterable[Sample], num_groups: int, num_real: int,
              seed: int = 0) -> GroupPartition:
    """Split samples into GROUP 1 (all real-labeled) and G-1 coarse groups.

    Coarse groups differ in size by at most one; earlier groups take the
    remainder.
    """
    samples = sorted(samples, key=lambda s: s.id)
    if num_groups < 2:
        raise ConfigError(f"num_groups must be >= 2, got {num_groups}")
    if num_groups > len(samples):
        raise ConfigError(f"num_groups={num_groups} exceeds sample count {len(samples)}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sample ids")
    real = [s.id for s in samples if s.label_kind is LabelKind.REAL]
    coarse = [s.id for s in samples if s.label_kind is not LabelKind.REAL]
    if len(real) < num_real:
        raise ConfigError(f"need {num_real} real-labeled samples, found {len(real)}")
    if len(real) > num_real:
        raise ConfigError(f"found {len(real)} real-labeled samples, expected {num_real}")
    bad = [s.id for s in samples
           if s.label_kind is not LabelKind.REAL and s.coarse_map() is None]
    if bad:
        raise ConfigError(f"samples without coarse labels: {bad[:10]}")
    if len(coarse) < num_groups - 1:
        raise ConfigError(f"{len(coarse)} coarse samples cannot fill {num_groups - 1} groups")

    rng = np.random.default_rng(seed)
    order = [coarse[i] for i in rng.permutation(len(coarse))]
    base, extra = divmod(len(order), num_groups - 1)
    groups = [tuple(real)]
    start = 0
    for g in range(num_groups - 1):
        size = base + (1 if g < extra else 0)
        groups.append(tuple(order[start:start + size]))
        start += size
    return GroupPartition(tuple(groups))


# ---------------------------------------------------------------- resizing

def resize_map(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centers, no antialias) of HxW or HxWxC."""
    if arr.shape[:2] == tuple(size):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    t = t[None, None] if arr.ndim == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0]
    out = out[0] if arr.ndim == 2 else out.permute(1, 2, 0)
    return out.numpy().astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


DEFAULT_SIZES = {"rnet": 288, "snet": 320}


def resize_for(network: str, sample: Sample, sizes: dict[str, int] | None = None) -> Sample:
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    if network not in ("rnet", "snet"):
        raise ConfigError(f"unknown network {network!r}")
    hw = (sizes[network], sizes[network])
    if sample.shape == hw:
        return sample.replace()

    def lab(a):
        return None if a is None else np.clip(resize_map(a, hw), 0.0, 1.0)

    return sample.replace(image=resize_map(sample.image, hw), label=lab(sample.label),
                          coarse=lab(sample.coarse))


# ---------------------------------------------------------------- contamination

def rotate_map(label: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return label.copy()
    out = ndimage.rotate(label, degrees, reshape=False, order=1, mode="grid-constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def crop_resize_map(label: np.ndarray, fraction: float, top: int = 0, left: int = 0) -> np.ndarray:
    """Crop a window covering (1 - fraction) of each side and resize it back."""
    if fraction == 0:
        return label.copy()
    h, w = label.shape
    ch, cw = max(1, round((1 - fraction) * h)), max(1, round((1 - fraction) * w))
    window = label[top:top + ch, left:left + cw]
    return np.clip(resize_map(window, (h, w)), 0.0, 1.0)


def occlude_map(label: np.ndarray, area_fraction: float, top: int = 0, left: int = 0) -> np.ndarray:
    out = label.copy()
    if area_fraction == 0:
        return out
    h, w = label.shape
    side = math.sqrt(area_fraction)
    oh, ow = round(side * h), round(side * w)
    out[top:top + oh, left:left + ow] = 0.0
    return out


def contaminate(sample: Sample, spec: ContaminationSpec) -> Sample:
    """Degrade a real label by rotation, crop-and-resize and occlusion.

    The image is left untouched; only the supervision is misaligned.
    """
    if sample.label_kind is not LabelKind.REAL:
        raise MisuseError(f"{sample.id}: contaminate() needs a real label, "
                          f"got {sample.label_kind.value}")
    rng = np.random.default_rng(spec.seed)
    h, w = sample.shape
    angle = rng.uniform(*spec.rotation_degrees)
    crop = rng.uniform(*spec.crop_fraction)
    occ = rng.uniform(*spec.occlusion_area_fraction)

    label = rotate_map(sample.label, angle)
    ch, cw = round((1 - crop) * h), round((1 - crop) * w)
    label = crop_resize_map(label, crop, int(rng.integers(0, h - ch + 1)),
                            int(rng.integers(0, w - cw + 1)))
    if spec.occlusion_anchor == "top-left":
        top = left = 0
    else:
        side = math.sqrt(occ)
        top = int(rng.integers(0, h - round(side * h) + 1))
        left = int(rng.integers(0, w - round(side * w) + 1))
    label = occlude_map(label, occ, top, left)
    return sample.replace(label=label, label_kind=LabelKind.CONTAMINATED)


# ---------------------------------------------------------------- coarse labels

def _raster_pass(img, lo, hi, dist, forward):
    rows, cols = len(img), len(img[0])
    if forward:
        xs, ys, step = range(1, rows - 1), range(1, cols - 1), -1
    else:
        xs, ys, step = range(rows - 2, 0, -1), range(cols - 2, 0, -1), 1
    for x in xs:
        row_i, row_d, row_u, row_l = img[x], dist[x], hi[x], lo[x]
        prev_d, prev_u, prev_l = dist[x + step], hi[x + step], lo[x + step]
        for y in ys:
            v = row_i[y]
            d = row_d[y]
            # neighbour above/below
            u1 = prev_u[y] if prev_u[y] > v else v
            l1 = prev_l[y] if prev_l[y] < v else v
            b1 = u1 - l1
            # neighbour left/right
            u2 = row_u[y + step] if row_u[y + step] > v else v
            l2 = row_l[y + step] if row_l[y + step] < v else v
            b2 = u2 - l2
            if b1 < d and b1 <= b2:
                row_d[y], row_u[y], row_l[y] = b1, u1, l1
            elif b2 < d:
                row_d[y], row_u[y], row_l[y] = b2, u2, l2


def mbd_transform(gray: np.ndarray, passes: int = 3) -> np.ndarray:
    """Approximate minimum-barrier distance to the image boundary.

    Raster scans alternate forward / backward; boundary pixels are seeds.
    """
    gray = np.asarray(gray, dtype=np.float64)
    rows, cols = gray.shape
    dist = np.full(gray.shape, np.inf)
    dist[0, :] = dist[-1, :] = dist[:, 0] = dist[:, -1] = 0.0
    if rows <= 2 or cols <= 2:
        return dist
    img = gray.tolist()
    lo, hi, d = gray.tolist(), gray.tolist(), dist.tolist()
    for k in range(passes):
        _raster_pass(img, lo, hi, d, forward=(k % 2 == 0))
    return np.array(d)


def generate_coarse_label(image: np.ndarray, passes: int = 3) -> np.ndarray:
    """Unsupervised saliency map in [0, 1] from the MBD transform."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got {image.shape}")
    dist = mbd_transform(image.mean(axis=2), passes)
    lo, hi = dist.min(), dist.max()
    if not np.isfinite(hi) or hi - lo <= 0:
        return np.zeros(dist.shape)
    return (dist - lo) / (hi - lo)


# ---------------------------------------------------------------- augmentation

def flip_rotate(arr: np.ndarray, flip: bool, quarter_turns: int) -> np.ndarray:
    """Horizontal flip followed by ``quarter_turns`` counter-clockwise 90° turns."""
    out = arr[:, ::-1] if flip else arr
    return np.ascontiguousarray(np.rot90(out, k=quarter_turns, axes=(0, 1)))


def unflip_rotate(arr: np.ndarray, flip: bool, quarter_turns: int) -> np.ndarray:
    out = np.rot90(arr, k=-quarter_turns, axes=(0, 1))
    return np.ascontiguousarray(out[:, ::-1] if flip else out)


def augment(sample: Sample, seed: int, *, flip: bool | None = None,
            quarter_turns: int | None = None) -> Sample:
    """Random horizontal flip and right-angle rotation, applied to every map."""
    rng = np.random.default_rng(seed)
    draw_flip, draw_k = bool(rng.integers(2)), int(rng.integers(4))
    flip = draw_flip if flip is None else flip
    k = draw_k if quarter_turns is None else quarter_turns

    def tf(a):
        return None if a is None else flip_rotate(a, flip, k)

    return sample.replace(image=tf(sample.image), label=tf(sample.label), coarse=tf(sample.coarse))


def augment_batch(arrays: Sequence[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Apply one random flip/rotation consistently to HxW(xC) arrays of a sample."""
    flip, k = bool(rng.integers(2)), int(rng.integers(4))
    return [flip_rotate(a, flip, k) for a in arrays]


def quantize_map(arr: np.ndarray) -> np.ndarray:
    """Snap a [0,1] map onto the 8-bit grid used for label storage."""
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0) / 255.0
