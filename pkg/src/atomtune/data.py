"""Labeled image datasets on disk (ATF1 + JSON) and the procedural shapes tasks."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import read_atf, write_atf

TASKS = ("shapes-source", "shapes-rotated-target", "channels-permuted-target")
NUM_SHAPES = 10
IMAGE_SIZE = 32

# fixed transforms of the target tasks
COLOR_GAIN = np.array([0.55, 1.25, 0.8], dtype=np.float32)
COLOR_OFFSET = np.array([0.25, -0.1, 0.1], dtype=np.float32)
CHANNEL_PERM = (2, 0, 1)


@dataclass
class Dataset:
    images: np.ndarray   # [n, c, h, w] float32
    labels: np.ndarray   # [n] int64
    num_classes: int
    name: str = "unnamed"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_atf(d / "images.atf", self.images)
        write_atf(d / "labels.atf", self.labels.astype(np.float32))
        meta = {"num_classes": self.num_classes, "split": self.name, "n": len(self)}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        labels = read_atf(d / "labels.atf")
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integer class ids")
        return cls(read_atf(d / "images.atf"), labels.astype(np.int64),
                   int(meta["num_classes"]), meta.get("split", d.name))


def _mask(cls: int, yy: np.ndarray, xx: np.ndarray, cx: float, cy: float, s: float, t: float) -> np.ndarray:
    """Boolean mask of shape class ``cls`` centred at (cx, cy), half-size s, stroke t.

    Image rows grow downward; every class except the ring and the square is
    orientation-specific, so a 90 degree rotation changes its appearance.
    """
    dx, dy = xx - cx, yy - cy
    inside = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if cls == 0:  # triangle pointing up
        return inside & (np.abs(dx) <= (dy + s) / 2)
    if cls == 1:  # L
        return inside & ((dx <= -s + 2 * t) | (dy >= s - 2 * t))
    if cls == 2:  # T
        return inside & ((dy <= -s + 2 * t) | (np.abs(dx) <= t))
    if cls == 3:  # horizontal bar
        return (np.abs(dx) <= s) & (np.abs(dy) <= t)
    if cls == 4:  # upper half disk
        return (dx * dx + dy * dy <= s * s) & (dy <= 0)
    if cls == 5:  # chevron pointing right
        return inside & (np.abs(dx - (s - np.abs(dy))) <= 1.4 * t)
    if cls == 6:  # anti-diagonal stroke
        return inside & (np.abs(dx + dy) <= 1.4 * t)
    if cls == 7:  # ring
        r = np.sqrt(dx * dx + dy * dy)
        return (r <= s) & (r >= s - 2 * t)
    if cls == 8:  # filled square
        return (np.abs(dx) <= 0.8 * s) & (np.abs(dy) <= 0.8 * s)
    if cls == 9:  # C opening to the right
        r = np.sqrt(dx * dx + dy * dy)
        return (r <= s) & (r >= s - 2 * t) & ~((dx > 0) & (np.abs(dy) < 0.5 * s))
    raise ValueError(cls)


def _render_source(seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_SHAPES
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float32) + 0.5
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i, cls in enumerate(labels):
        s = rng.uniform(6.0, 11.0)
        t = rng.uniform(1.5, 2.5)
        cx, cy = rng.uniform(s + 1, IMAGE_SIZE - s - 1, size=2)
        fg = rng.uniform(0.45, 1.0, size=3)
        bg = rng.uniform(0.0, 0.35, size=3)
        m = _mask(int(cls), yy, xx, cx, cy, s, t)
        img = np.where(m[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, 0.06, size=img.shape)
        images[i] = img
    return images, labels


def gen_synthetic(task: str, seed: int, n: int) -> Dataset:
    """Procedural 3x32x32 shape images, 10 balanced classes, deterministic per seed.

    The target tasks reuse the source sampler with the same seed and apply a fixed
    transform, so ``shapes-rotated-target`` image ``i`` is the 90 degree rotation of
    ``shapes-source`` image ``i`` (followed by a fixed per-channel color change).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    if n < 1:
        raise ValueError("n must be positive")
    images, labels = _render_source(seed, n)
    if task == "shapes-rotated-target":
        images = color_jitter(rotate90(images))
    elif task == "channels-permuted-target":
        images = images[:, list(CHANNEL_PERM)]
    return Dataset(np.ascontiguousarray(images), labels, NUM_SHAPES, task)


def rotate90(images: np.ndarray) -> np.ndarray:
    """Counter-clockwise quarter turn of every image."""
    return np.ascontiguousarray(np.rot90(images, k=1, axes=(2, 3)))


def color_jitter(images: np.ndarray) -> np.ndarray:
    out = images * COLOR_GAIN[None, :, None, None] + COLOR_OFFSET[None, :, None, None]
    return out.astype(np.float32)
