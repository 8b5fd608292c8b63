"""Image sources, augmentation, normalization and batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError
from .rng import AUGMENT, SHUFFLE, SYNTHETIC, keyed_rng

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_RECORDS_PER_FILE = 10000

# synthetic generator: per-image gradient offsets / amplitudes
GRAD_OFFSET = (0.0, 0.25)
GRAD_AMPLITUDE = (0.4, 0.6)
TEXTURE_STD = 0.04


@dataclass
class ImageRecord:
    pixels: np.ndarray   # [H, W, C] in [0, 1]
    label: int


@dataclass
class ImageDataset:
    """In-memory images in [0, 1] plus the normalization applied at batch time."""

    images: np.ndarray                   # [n, H, W, C] float32
    labels: np.ndarray | None = None     # [n] int64, None when unlabeled
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return ((x - mean) / std).astype(np.float32)

    def subset(self, ids) -> ImageDataset:
        ids = np.asarray(ids, dtype=np.int64)
        labels = None if self.labels is None else self.labels[ids]
        return ImageDataset(self.images[ids], labels, self.mean, self.std, dict(self.meta))

    def records(self) -> Iterator[ImageRecord]:
        for i, img in enumerate(self.images):
            yield ImageRecord(img, -1 if self.labels is None else int(self.labels[i]))


# -- CIFAR-10 binary ---------------------------------------------------------

def decode_cifar10(raw: bytes, expected_records: int | None = CIFAR_RECORDS_PER_FILE):
    """Decode CIFAR-10 binary bytes into ``(uint8 [n, 32, 32, 3], labels [n])``."""
    n = len(raw) // CIFAR_RECORD
    if len(raw) % CIFAR_RECORD or (expected_records is not None and n != expected_records):
        want = (expected_records or max(n, 1)) * CIFAR_RECORD
        raise FormatError(
            f"CIFAR-10 file has {len(raw)} bytes; expected {want} "
            f"({expected_records or 'k'} records of {CIFAR_RECORD} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    planes = arr[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    return np.ascontiguousarray(planes.transpose(0, 2, 3, 1)), labels


def encode_cifar10(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`decode_cifar10` for uint8 ``[n, 32, 32, 3]`` images."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n = len(pixels)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.uint8)
    out[:, 1:] = pixels.transpose(0, 3, 1, 2).reshape(n, -1)
    return out.tobytes()


def read_cifar10_bin(path, expected_records: int | None = CIFAR_RECORDS_PER_FILE) -> Iterator[ImageRecord]:
    """Stream records from one CIFAR-10 binary batch file.

    The whole file is validated before the first record is yielded, so a
    truncated file produces no partial output.
    """
    pixels, labels = decode_cifar10(Path(path).read_bytes(), expected_records)
    for img, lab in zip(pixels, labels):
        yield ImageRecord(img.astype(np.float32) / 255.0, int(lab))


def load_cifar10(paths, expected_records: int | None = CIFAR_RECORDS_PER_FILE) -> ImageDataset:
    imgs, labs = [], []
    for p in ([paths] if isinstance(paths, (str, Path)) else paths):
        px, lb = decode_cifar10(Path(p).read_bytes(), expected_records)
        imgs.append(px)
        labs.append(lb)
    images = np.concatenate(imgs).astype(np.float32) / 255.0
    return ImageDataset(images, np.concatenate(labs), meta={"source": "cifar10"})


# -- synthetic -----------------------------------------------------------------

def gradient_field(size: int, offsets, amplitudes) -> np.ndarray:
    """Per-channel linear ramps: red along x, green along y, blue along x+y."""
    t = np.arange(size, dtype=np.float64) / (size - 1)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    ramps = (xx, yy, 0.5 * (xx + yy))
    return np.stack([o + a * r for o, a, r in zip(offsets, amplitudes, ramps)], axis=-1)


def synthetic_image(size: int, seed: int, index: int) -> ImageRecord:
    """One image of the synthetic corpus, a pure function of ``(seed, index)``.

    Layout: a smooth colour gradient (absolute location cue whose offset and
    slope vary per image), low-amplitude texture, and 1-3 bright discs or
    squares (neighbour cues).  The label is the quadrant (0..3, raster order)
    holding the centroid of the largest shape.
    """
    rng = keyed_rng(seed, SYNTHETIC, index)
    offsets = rng.uniform(*GRAD_OFFSET, size=3)
    amplitudes = rng.uniform(*GRAD_AMPLITUDE, size=3)
    img = gradient_field(size, offsets, amplitudes)
    img += rng.normal(0.0, TEXTURE_STD, size=img.shape)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    best_area, label = -1.0, 0
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.1 * size, 0.9 * size, size=2)
        r = rng.uniform(0.08 * size, 0.2 * size)
        if rng.random() < 0.5:
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            region = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        colour = rng.uniform(0.6, 1.0, size=3)
        img[region] = 0.3 * img[region] + 0.7 * colour
        area = float(region.sum())
        if area > best_area:
            best_area = area
            label = int(cy >= size / 2) * 2 + int(cx >= size / 2)
    return ImageRecord(np.clip(img, 0.0, 1.0).astype(np.float32), label)


def gen_synthetic(n: int, size: int, seed: int, start: int = 0) -> Iterator[ImageRecord]:
    for i in range(start, start + n):
        yield synthetic_image(size, seed, i)


def synthetic_dataset(n: int, size: int = 32, seed: int = 0, start: int = 0,
                      labels: bool = True) -> ImageDataset:
    recs = list(gen_synthetic(n, size, seed, start))
    images = np.stack([r.pixels for r in recs])
    labs = np.array([r.label for r in recs], dtype=np.int64) if labels else None
    return ImageDataset(images, labs, meta={"source": "synthetic", "seed": seed, "start": start})


# -- augmentation ----------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``[H, W, C]``."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def random_resized_crop(img: np.ndarray, scale_range=(0.2, 1.0), out_size: int = 32,
                        rng: np.random.Generator | None = None,
                        ratio_range=(3 / 4, 4 / 3), flip: bool = True) -> np.ndarray:
    """Random area/aspect crop, bilinear resize to ``out_size`` and a p=0.5 h-flip."""
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ConfigError(f"scale_range must lie in (0, 1], got {scale_range}")
    rng = rng or np.random.default_rng()
    h, w = img.shape[:2]
    area = h * w
    crop = (0, 0, h, w)
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        logr = np.log(ratio_range)
        aspect = np.exp(rng.uniform(*logr))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = (top, left, ch, cw)
            break
    top, left, ch, cw = crop
    out = img[top:top + ch, left:left + cw]
    if (ch, cw) != (out_size, out_size):
        out = resize_bilinear(out, out_size, out_size)
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# -- batching ----------------------------------------------------------------------

def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return keyed_rng(shuffle_seed, SHUFFLE, epoch).permutation(n)


def batches(dataset: ImageDataset, batch_size: int, shuffle_seed: int, epoch: int,
            augment: bool = False, skip: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(normalized images [b, H, W, C], dataset indices)`` for one epoch.

    Order depends only on ``(shuffle_seed, epoch)``; the final short batch is
    kept.  ``skip`` drops the first batches (used when resuming mid-epoch).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ConfigError("cannot batch an empty dataset")
    order = epoch_order(len(dataset), shuffle_seed, epoch)
    size = dataset.images.shape[1]
    for bi, start in enumerate(range(0, len(order), batch_size)):
        if bi < skip:
            continue
        ids = order[start:start + batch_size]
        imgs = dataset.images[ids]
        if augment:
            imgs = np.stack([
                random_resized_crop(im, out_size=size, rng=keyed_rng(shuffle_seed, AUGMENT, epoch, int(i)))
                for im, i in zip(imgs, ids)])
        yield dataset.normalize(imgs), ids
