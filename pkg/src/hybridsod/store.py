"""On-disk layout: dataset folders, PNG label I/O, manifests, run directories."""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from .data import GroupPartition, LabelKind, Sample
from .exceptions import ConfigError, DataError

GT_THRESHOLD = 128
MANIFEST_VERSION = 1


def list_pngs(directory) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_gray(path, raw: bool = False) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr if raw else arr.astype(np.float64) / 255.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_gray(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr), mode="L").save(path)
    return path


def write_rgb(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr), mode="RGB").save(path)
    return path


def dumps(obj) -> str:
    """Canonical JSON used for every manifest so reruns are byte-identical."""
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------- dataset layout

class DatasetLayout:
    """``images/<id>.png``, ``labels_real/<id>.png``, ``labels_coarse/<id>.png``."""

    def __init__(self, root):
        self.root = Path(root)
        self.images = self.root / "images"
        self.labels_real = self.root / "labels_real"
        self.labels_coarse = self.root / "labels_coarse"

    def ids(self) -> list[str]:
        if not self.images.is_dir():
            raise DataError(f"{self.images} does not exist")
        return sorted(list_pngs(self.images))

    def real_path(self, sid) -> Path:
        return self.labels_real / f"{sid}.png"

    def coarse_path(self, sid) -> Path:
        return self.labels_coarse / f"{sid}.png"

    def load(self, sid: str, kind: LabelKind, group: int | None = None) -> Sample:
        image = read_rgb(self.images / f"{sid}.png")
        coarse = read_gray(self.coarse_path(sid)) if self.coarse_path(sid).exists() else None
        if kind is LabelKind.REAL:
            label = (read_gray(self.real_path(sid), raw=True) >= GT_THRESHOLD).astype(np.float64)
        else:
            label = coarse
        return Sample(sid, image, label, kind, group, coarse)

    def load_eval(self, sid: str) -> Sample:
        """Validation/test item: real label as ground truth, coarse if available."""
        return self.load(sid, LabelKind.REAL)


def write_manifest(path, partition: GroupPartition, kinds: dict[str, str], seed: int,
                   extra: dict | None = None) -> Path:
    group_of = partition.group_of()
    body = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "num_groups": len(partition),
        "partition": partition.to_dict(),
        "samples": [{"id": sid, "kind": kinds[sid], "group": group_of[sid]}
                    for sid in sorted(group_of)],
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(body))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found; run `prepare` first")
    body = json.loads(path.read_text())
    if body.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {body.get('version')}")
    return body


# ---------------------------------------------------------------- run directory

class RunStore:
    """Self-describing run directory.

    ::

        <run>/manifest.json        dataset partition (from `prepare`)
        <run>/run.json             config echo, schedule, gate log, progress
        <run>/events.jsonl         append-only event log
        <run>/checkpoints/*.ckpt   network parameters
        <run>/pseudo_labels/<id>.png
    """

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = self.root / "manifest.json"
        self.run_json = self.root / "run.json"
        self.events = self.root / "events.jsonl"
        self.checkpoints = self.root / "checkpoints"
        self.pseudo_labels = self.root / "pseudo_labels"
        self.lock_path = self.root / ".lock"

    def checkpoint(self, name: str) -> Path:
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        return self.checkpoints / f"{name}.ckpt"

    def pseudo_label_path(self, sid: str) -> Path:
        return self.pseudo_labels / f"{sid}.png"

    def read_run(self) -> dict | None:
        if not self.run_json.exists():
            return None
        return json.loads(self.run_json.read_text())

    def write_run(self, body: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.run_json.with_suffix(".tmp")
        tmp.write_text(dumps(body))
        os.replace(tmp, self.run_json)

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.root} is locked by another process "
                              f"(remove {self.lock_path} if stale)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            self.lock_path.unlink(missing_ok=True)
