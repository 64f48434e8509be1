"""Image ingestion: CIFAR-10 binary files, binary PGM/PPM, and a synthetic
texture generator for self-contained experiments.

All loaders return uint8 arrays; a training run requires every image in a
dataset to share dimensions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-major pixels
CIFAR_SIDE = 32


class DatasetFormatError(ValueError):
    """Input bytes do not match the declared dataset layout."""


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C) or (n, H, W) uint8
    source: str

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]


def load_cifar10(path):
    """Read CIFAR-10 binary batches: 3073-byte records, label ignored.

    `path` may be one .bin file or a directory of them.
    """
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin"))
        if not files:
            raise DatasetFormatError(f"no .bin files in {path}")
    else:
        files = [path]

    chunks = []
    for f in files:
        with open(f, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(
                f"{f}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        chunks.append(pixels.transpose(0, 2, 3, 1))
    return Dataset(np.concatenate(chunks), source=str(path))


def _read_pnm_header(data):
    # magic, width, height, maxval as whitespace-separated tokens; '#' starts
    # a comment running to end of line
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise DatasetFormatError("truncated PNM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte after maxval


def load_pnm(path):
    """Binary PGM (P5) or PPM (P6) with maxval 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_pnm_header(data)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetFormatError(f"{path}: unsupported PNM magic {magic!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    body = data[offset:offset + count]
    if len(body) != count:
        raise DatasetFormatError(f"{path}: expected {count} pixel bytes, got {len(body)}")
    img = np.frombuffer(body, dtype=np.uint8)
    if channels == 1:
        return img.reshape(height, width).copy()
    return img.reshape(height, width, 3).copy()


def save_pnm(path, image):
    """Write uint8 grayscale as P5 or RGB as P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("save_pnm expects uint8 pixels")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic, channels = b"P5", 1
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, channels = b"P6", 3
    else:
        raise ValueError(f"save_pnm: unsupported shape {img.shape}")
    height, width = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (width, height))
        fh.write(np.ascontiguousarray(img).tobytes())


def load_pnm_dir(path):
    """All .pgm/.ppm files under a directory, sorted by name."""
    files = sorted(
        os.path.join(path, f) for f in os.listdir(path)
        if f.lower().endswith((".pgm", ".ppm")))
    if not files:
        raise DatasetFormatError(f"no .pgm/.ppm files in {path}")
    images = [load_pnm(f) for f in files]
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DatasetFormatError(f"images in {path} differ in shape: {sorted(shapes)}")
    return Dataset(np.stack(images), source=str(path))


def synthetic_textures(n, height=32, width=32, channels=3, seed=0):
    """Deterministic stack of smooth synthetic textures.

    Each image mixes a few random sinusoidal gratings with a linear ramp,
    rescaled to use the full 8-bit range; low-dimensional enough for a small
    autoencoder to learn quickly, varied enough that rate-distortion
    trade-offs show up.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) / max(height, width)
    images = np.empty((n, height, width, channels), dtype=np.uint8)
    for i in range(n):
        base = np.zeros((height, width))
        for _ in range(3):
            fx, fy = rng.uniform(-5.0, 5.0, 2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            base += rng.uniform(0.3, 1.0) * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        gx, gy = rng.uniform(-1.5, 1.5, 2)
        base += gx * xx + gy * yy
        img = np.empty((height, width, channels))
        for c in range(channels):
            img[:, :, c] = rng.uniform(0.5, 1.0) * base + rng.uniform(-0.2, 0.2)
        img += rng.normal(0.0, 0.02, img.shape)
        lo, hi = img.min(), img.max()
        images[i] = np.clip((img - lo) / max(hi - lo, 1e-9) * 255.0, 0, 255).astype(np.uint8)
    return images


def load_dataset(path, fmt):
    """CLI entry: fmt is 'cifar10' or 'pnm-dir'."""
    if fmt == "cifar10":
        return load_cifar10(path)
    if fmt == "pnm-dir":
        return load_pnm_dir(path)
    raise ValueError(f"unknown dataset format {fmt!r}")
