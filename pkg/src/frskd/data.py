"""Image datasets stored as raw byte tensors, synthetic data, augmentation and batching.

On-disk layout: a JSON manifest next to two raw files,

* ``images_file``: uint8, row-major ``[count, 3, extent, extent]``;
* ``labels_file``: uint16 little-endian, ``[count]``.

The manifest also pins the per-channel normalization statistics so that every
split of a dataset is normalized with the training split's numbers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np


class DataError(Exception):
    """Dataset files are missing, inconsistent or out of contract."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3 or self.images.dtype != np.uint8:
            raise DataError(f"images must be uint8 [N, 3, s, s], got {self.images.dtype} {self.images.shape}")
        if self.images.shape[2] != self.images.shape[3]:
            raise DataError("images must be square")
        if len(self.images) < 1 or self.labels.shape != (len(self.images),):
            raise DataError("need at least one image and exactly one label per image")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.mean is None or self.std is None:
            self.mean, self.std = channel_stats(self.images)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def extent(self) -> int:
        return int(self.images.shape[2])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split,
                       self.mean, self.std)


@dataclass
class AugmentConfig:
    padding: int = 4
    flip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.padding < 0:
            raise ValueError("crop padding must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


# ------------------------------------------------------------------ file I/O

def save_dataset(ds: Dataset, manifest: str | os.PathLike, stats_from: Dataset | None = None) -> Path:
    """Write images, labels and a manifest; returns the manifest path."""
    manifest = Path(manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    stem = manifest.stem
    img_name, lab_name = f"{stem}.images.u8", f"{stem}.labels.u16"
    ds.images.tofile(manifest.parent / img_name)
    ds.labels.astype("<u2").tofile(manifest.parent / lab_name)
    ref = stats_from if stats_from is not None else ds
    meta = {
        "images_file": img_name,
        "labels_file": lab_name,
        "count": len(ds),
        "extent": ds.extent,
        "classes": ds.num_classes,
        "dtype": "uint8",
        "split": ds.split,
        "normalization": {"mean": [float(v) for v in ref.mean], "std": [float(v) for v in ref.std]},
    }
    manifest.write_text(json.dumps(meta, indent=2) + "\n")
    return manifest


def load_dataset(manifest: str | os.PathLike) -> Dataset:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    try:
        meta = json.loads(manifest.read_text())
        count, extent, classes = int(meta["count"]), int(meta["extent"]), int(meta["classes"])
        img_path = manifest.parent / meta["images_file"]
        lab_path = manifest.parent / meta["labels_file"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {manifest}: {exc}") from exc
    if meta.get("dtype", "uint8") != "uint8":
        raise DataError(f"unsupported image dtype {meta['dtype']!r}")
    for p in (img_path, lab_path):
        if not p.is_file():
            raise DataError(f"missing data file: {p}")
    images = np.fromfile(img_path, dtype=np.uint8)
    labels = np.fromfile(lab_path, dtype="<u2").astype(np.int64)
    if images.size != count * 3 * extent * extent:
        raise DataError(f"{img_path.name}: {images.size} bytes, expected {count * 3 * extent * extent}")
    if labels.size != count:
        raise DataError(f"{lab_path.name}: {labels.size} labels, expected {count}")
    if labels.size and labels.max() >= classes:
        raise DataError(f"label {labels.max()} out of range for {classes} classes")
    norm = meta.get("normalization") or {}
    mean = np.asarray(norm["mean"], dtype=np.float64) if "mean" in norm else None
    std = np.asarray(norm["std"], dtype=np.float64) if "std" in norm else None
    return Dataset(images.reshape(count, 3, extent, extent), labels, classes,
                   meta.get("split", "train"), mean, std)


# ------------------------------------------------------------ synthetic data

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "xshape")


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        w = max(r * 0.3, 0.8)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r * 0.55) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= max(r * 0.3, 0.8)) & (np.abs(dx) <= r)
    if kind == "xshape":
        w = max(r * 0.3, 0.8)
        return ((np.abs(dy - dx) <= w) | (np.abs(dy + dx) <= w)) & (np.maximum(np.abs(dy), np.abs(dx)) <= r)
    raise ValueError(kind)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def gen_synthetic(num_classes: int, n: int, extent: int, seed: int, split: str = "train",
                  noise: float = 24.0) -> Dataset:
    """Render ``n`` images of class-specific shapes.

    Class ``c`` draws shape ``SHAPES[c]`` in one of three hues (palette
    entries ``c``, ``c+1`` and ``c+2`` modulo the class count), at a random
    position and scale over a random dim background, plus Gaussian pixel
    noise. Hue alone therefore cannot identify the class. Labels are assigned
    round-robin, so the class histogram is balanced within one.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}]")
    if n < 1 or extent < 8:
        raise ValueError("need n >= 1 and extent >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64) + 0.5
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.empty((n, 3, extent, extent), dtype=np.uint8)
    for k in range(n):
        c = int(labels[k])
        r = rng.uniform(0.22, 0.36) * extent
        cy, cx = rng.uniform(r * 0.8, extent - r * 0.8, size=2)
        hue = ((c + rng.integers(0, 3)) % num_classes) / num_classes + rng.normal(0, 0.03)
        fg = _hsv_to_rgb(hue % 1.0, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)) * 255
        bg = rng.uniform(0, 90, size=3)
        mask = _shape_mask(SHAPES[c], yy, xx, cy, cx, r)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0, noise, size=img.shape)
        images[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes, split)


# ------------------------------------------------------- augmentation/batching

def augment(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random-crop back to size, and flip horizontally per image."""
    if not cfg.enabled:
        return images
    n, c, h, w = images.shape
    p = cfg.padding
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p))) if p else images
    offs = rng.integers(0, 2 * p + 1, size=(n, 2))
    flips = rng.random(n) < cfg.flip_prob
    for k in range(n):
        oy, ox = offs[k]
        crop = padded[k, :, oy:oy + h, ox:ox + w]
        out[k] = crop[:, :, ::-1] if flips[k] else crop
    return out


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    return x.astype(dtype)


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray


@dataclass
class BatchStream:
    """Seeded, single-pass batch sequence over a dataset."""

    ds: Dataset
    batch_size: int
    epoch_seed: int | None
    augment_cfg: AugmentConfig | None = None
    augment_seed: int | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    dtype: type = np.float32
    order: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        n = len(self.ds)
        if self.epoch_seed is None:
            self.order = np.arange(n)
        else:
            self.order = np.random.default_rng(self.epoch_seed).permutation(n)

    def sizes(self) -> list[int]:
        n, b = len(self.ds), self.batch_size
        return [min(b, n - i) for i in range(0, n, b)]

    def __iter__(self) -> Iterator[Batch]:
        mean = self.ds.mean if self.mean is None else self.mean
        std = self.ds.std if self.std is None else self.std
        aug_rng = np.random.default_rng(self.augment_seed) if self.augment_seed is not None else None
        for i in range(0, len(self.order), self.batch_size):
            idx = self.order[i:i + self.batch_size]
            imgs = self.ds.images[idx]
            if self.augment_cfg is not None and aug_rng is not None:
                imgs = augment(imgs, self.augment_cfg, aug_rng)
            yield Batch(idx, normalize(imgs, mean, std, self.dtype), self.ds.labels[idx])


def batch_iter(ds: Dataset, batch_size: int, epoch_seed: int | None, **kw) -> BatchStream:
    return BatchStream(ds, batch_size, epoch_seed, **kw)
