"""Per-block spatial attention maps of both networks, written as binary graymaps."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor
from .data import DataError, normalize
from .nn.functional import upsample_bilinear
from .train import Trainer, trainer_from_checkpoint


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> Path:
    """Write a 2-D uint8 array as a P5 file."""
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected 2-D uint8 array, got {img.dtype} {img.shape}")
    path = Path(path)
    h, w = img.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
    return path


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files are supported")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1)
    if data.size != w * h * channels:
        raise DataError(f"{path}: {data.size} pixel bytes, expected {w * h * channels}")
    return data.reshape(h, w, channels) if channels > 1 else data.reshape(h, w)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as uint8 ``[3, h, w]``."""
    return np.ascontiguousarray(_read_netpbm(path, b"P6", 3).transpose(2, 0, 1))


def write_ppm(path, img: np.ndarray) -> Path:
    """Write uint8 ``[3, h, w]`` as a binary P6 file."""
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 [3, h, w], got {img.dtype} {img.shape}")
    path = Path(path)
    _, h, w = img.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes())
    return path


def spatial_energy(fmap: Tensor, extent: int) -> np.ndarray:
    """Channel-summed squares of one sample, bilinearly resized to ``extent``."""
    energy = np.square(fmap.data[:1].astype(np.float64)).sum(axis=1, keepdims=True)
    return upsample_bilinear(Tensor(energy), (extent, extent)).data[0, 0]


def to_gray(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.rint((m - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def attention_maps(trainer: Trainer, image: np.ndarray) -> dict[str, np.ndarray]:
    """Gray maps keyed ``block{i}_{student|teacher}`` (1-based) for one uint8 image."""
    s = trainer.cfg.backbone.image_size
    if image.shape != (3, s, s):
        raise ShapeError(f"image is {tuple(image.shape)}, the model expects (3, {s}, {s})")
    norm = trainer.normalization
    if norm:
        mean, std = np.asarray(norm["mean"]), np.asarray(norm["std"])
    else:
        mean, std = np.zeros(3), np.ones(3)
    x = Tensor(normalize(image[None], mean, std, trainer.dtype))
    trainer.nets.train(False)
    feats, _ = trainer.nets.backbone(x)
    out = {}
    for i, f in enumerate(feats, 1):
        out[f"block{i}_student"] = to_gray(spatial_energy(f, s))
    if trainer.nets.teacher is not None:
        t_maps, _ = trainer.nets.teacher(feats)
        for i, t in enumerate(t_maps, 1):
            out[f"block{i}_teacher"] = to_gray(spatial_energy(t, s))
    return out


def export_attention(checkpoint, image_file, out_dir) -> list[Path]:
    """Write one P5 map per block per network; returns the written paths."""
    trainer = trainer_from_checkpoint(checkpoint)
    image = read_ppm(image_file)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [write_pgm(out_dir / f"{name}.pgm", m)
            for name, m in attention_maps(trainer, image).items()]
