"""Image ingestion (binary PPM or raw tensor files), synthetic corpora and cropping."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import Tensor, load_tensor

log = logging.getLogger(__name__)


class PPMError(ValueError):
    pass


@dataclass
class Image:
    image_id: str
    pixels: Tensor  # [3, H, W] in [0, 1]


def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a P6 file as a uint8 ``[3, H, W]`` array."""
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _read_header_tokens(buf, 4)
        if magic != b"P6":
            raise PPMError(f"unsupported magic {magic!r}")
        w, h, maxval = int(w), int(h), int(maxval)
    except (PPMError, ValueError) as exc:
        raise PPMError(f"{path}: malformed PPM header ({exc})") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise PPMError(f"{path}: unsupported PPM geometry {w}x{h}, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = buf[pos:pos + 3 * w * h]
    if len(data) != 3 * w * h:
        raise PPMError(f"{path}: expected {3 * w * h} pixel bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return np.ascontiguousarray(arr)


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write ``[3, H, W]`` data; floats in ``[0, 1]`` are quantized to 8 bits."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(arr.transpose(1, 2, 0).tobytes())


def ingest_images(path: str | os.PathLike, multiple: int = 1) -> list[Image]:
    """Load every ``.ppm`` / ``.mjt`` image in a directory, sorted by name.

    Images whose height or width is not a multiple of ``multiple`` are
    skipped with a warning.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    images = []
    for f in sorted(root.iterdir()):
        suffix = f.suffix.lower()
        if suffix == ".ppm":
            px = read_ppm(f).astype(np.float64) / 255.0
        elif suffix == ".mjt":
            px = load_tensor(f).data
            if px.ndim != 3 or px.shape[0] != 3:
                raise ValueError(f"{f}: raw image tensors must be [3, H, W], got {list(px.shape)}")
        else:
            continue
        if px.shape[1] % multiple or px.shape[2] % multiple:
            log.warning("skipping %s: %dx%d not divisible by %d", f.name, px.shape[1],
                        px.shape[2], multiple)
            continue
        images.append(Image(f.stem, Tensor(px)))
    return images


def random_crop(img: Image, size: int, rng: np.random.Generator) -> Tensor | None:
    _, h, w = img.pixels.shape
    if h < size or w < size:
        log.warning("image %s (%dx%d) smaller than crop %d; rejected", img.image_id, h, w, size)
        return None
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return Tensor._wrap(img.pixels.data[:, y:y + size, x:x + size].copy())


def center_crop(img: Image, size: int) -> Tensor | None:
    _, h, w = img.pixels.shape
    if h < size or w < size:
        log.warning("image %s (%dx%d) smaller than crop %d; rejected", img.image_id, h, w, size)
        return None
    y, x = (h - size) // 2, (w - size) // 2
    return Tensor._wrap(img.pixels.data[:, y:y + size, x:x + size].copy())


def synthetic_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """A smooth colour gradient plus a low-frequency texture and mild pixel noise."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, off = rng.uniform(-0.6, 0.6, size=3)
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        base = 0.5 + off * 0.5 + a * (xx - 0.5) + b * (yy - 0.5)
        texture = 0.15 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img[c] = base + texture
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_images(count: int, size: int = 32, seed: int = 0) -> list[Image]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    return [Image(f"synth{i:04d}", Tensor(synthetic_image(rng, size))) for i in range(count)]


def write_synthetic_corpus(directory: str | os.PathLike, count: int, size: int = 32,
                           seed: int = 0) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for img in synthetic_images(count, size, seed):
        p = d / f"{img.image_id}.ppm"
        write_ppm(p, img.pixels.data)
        paths.append(p)
    return paths
