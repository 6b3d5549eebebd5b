"""Dataset readers (IDX, CIFAR-10 binary, bundled digits), augmentation and
seeded batch iteration.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

# Per-dataset standardization constants (pixels first scaled to [0, 1]).
NORMALIZATION = {
    "mnist": {"mean": (0.1307,), "std": (0.3081,)},
    "cifar10": {"mean": (0.4914, 0.4822, 0.4465), "std": (0.2470, 0.2435, 0.2616)},
    # computed with dataset_channel_stats on the full 1797-image digits set
    "digits": {"mean": (0.3053,), "std": (0.3759,)},
}


class IDXFormatError(DataError):
    pass


class CifarFormatError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        return Dataset(self.images[indices], self.labels[indices], self.split, self.num_classes)


@dataclass
class AugmentConfig:
    pad: int = 2
    crop: int | None = None
    hflip: bool = False

    def validate(self, size):
        crop = size if self.crop is None else self.crop
        if self.pad < 0 or crop < 1 or crop > size + 2 * self.pad:
            raise ValueError(f"crop {crop} does not fit an input of {size} padded by {self.pad}")
        return crop


def standardize(pixels_u8, mean, std):
    """uint8 [N,C,H,W] -> float32, scaled to [0,1] then standardized per channel."""
    x = pixels_u8.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (x - m) / s


def dataset_channel_stats(pixels_u8):
    """Channel means/stds of uint8 images after scaling to [0, 1]."""
    x = pixels_u8.astype(np.float64) / 255.0
    return tuple(x.mean(axis=(0, 2, 3))), tuple(x.std(axis=(0, 2, 3)))


# ---------------------------------------------------------------------------
# IDX


def read_idx(path):
    """Decode an unsigned-byte IDX file into a uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08 or magic & 0xFF not in (1, 3):
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IDXFormatError(f"{path}: truncated or oversized payload ({len(raw) - header} bytes, expected {count})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports 1-d labels or 3-d images")
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path, split="train", norm="mnist", num_classes=10, limit=None):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IDXFormatError(f"{images_path}: expected an image file (3 dims), got {images.ndim}")
    if labels.ndim != 1:
        raise IDXFormatError(f"{labels_path}: expected a label file (1 dim), got {labels.ndim}")
    if len(images) != len(labels):
        raise DataError(f"image/label count mismatch: {len(images)} images vs {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    c = NORMALIZATION[norm]
    x = standardize(images[:, None], c["mean"], c["std"])
    return Dataset(x, labels.astype(np.int64), split, num_classes)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def parse_cifar_batch(raw, name="<bytes>"):
    """Split one binary batch into (uint8 images [N,3,32,32], labels [N])."""
    if len(raw) != CIFAR_RECORD * CIFAR_BATCH_RECORDS:
        raise CifarFormatError(
            f"{name}: {len(raw)} bytes is not {CIFAR_BATCH_RECORDS} records of {CIFAR_RECORD} bytes"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_BATCH_RECORDS, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def serialize_cifar_batch(images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    return rec.tobytes()


def load_cifar10(directory, split="train", limit=None):
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    imgs, labs = [], []
    for fname in files:
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            raise DataError(f"missing CIFAR-10 file {path}")
        with open(path, "rb") as f:
            im, lb = parse_cifar_batch(f.read(), path)
        imgs.append(im)
        labs.append(lb)
        if limit is not None and sum(len(l) for l in labs) >= limit:
            break
    images = np.concatenate(imgs)
    labels = np.concatenate(labs)
    if labels.max() > 9:
        raise CifarFormatError(f"{directory}: label byte {labels.max()} outside 0..9")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    c = NORMALIZATION["cifar10"]
    return Dataset(standardize(images, c["mean"], c["std"]), labels, split, 10)


# ---------------------------------------------------------------------------
# bundled digits (scikit-learn), used where no downloaded dataset is present


def digits_pixels():
    """The 1797 8x8 handwritten digits bundled with scikit-learn, as uint8 [N,1,8,8]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    pixels = np.round(d.images * (255.0 / 16.0)).astype(np.uint8)[:, None]
    return pixels, d.target.astype(np.int64)


def load_digits(split="train", test_size=500, seed=0):
    """Deterministic train/test split of the bundled digits."""
    pixels, labels = digits_pixels()
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(labels))
    idx = order[test_size:] if split == "train" else order[:test_size]
    c = NORMALIZATION["digits"]
    return Dataset(standardize(pixels[idx], c["mean"], c["std"]), labels[idx], split, 10)


def load_dataset(kind, split, path=None, limit=None, **kw):
    if kind == "digits":
        ds = load_digits(split)
        return ds if limit is None else ds.subset(np.arange(min(limit, len(ds))))
    if kind == "cifar10":
        return load_cifar10(path, split, limit)
    if kind == "mnist":
        prefix = "train" if split == "train" else "t10k"
        return load_idx(
            os.path.join(path, f"{prefix}-images-idx3-ubyte"),
            os.path.join(path, f"{prefix}-labels-idx1-ubyte"),
            split,
            "mnist",
            limit=limit,
        )
    raise DataError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# augmentation and batching


def augment(images, cfg: AugmentConfig, rng, force_flip=None):
    """Zero-pad, take a random crop per image and optionally flip it horizontally."""
    n, c, h, w = images.shape
    crop = cfg.validate(h)
    if cfg.pad == 0 and crop == h and not cfg.hflip and force_flip is None:
        return images
    padded = np.pad(images, ((0, 0), (0, 0), (cfg.pad, cfg.pad), (cfg.pad, cfg.pad)))
    span = h + 2 * cfg.pad - crop + 1
    oy = rng.integers(0, span, size=n)
    ox = rng.integers(0, span, size=n)
    out = np.empty((n, c, crop, crop), dtype=images.dtype)
    for i in range(n):
        out[i] = padded[i, :, oy[i] : oy[i] + crop, ox[i] : ox[i] + crop]
    if force_flip is not None:
        flip = np.full(n, bool(force_flip))
    elif cfg.hflip:
        flip = rng.random(n) < 0.5
    else:
        flip = np.zeros(n, dtype=bool)
    out[flip] = out[flip][..., ::-1]
    return out


def crop_offsets(n, cfg: AugmentConfig, size, rng):
    """The offsets :func:`augment` would draw, exposed for statistical checks."""
    crop = cfg.validate(size)
    span = size + 2 * cfg.pad - crop + 1
    return rng.integers(0, span, size=n), rng.integers(0, span, size=n)


def batches(dataset: Dataset, batch_size, rng=None, shuffle=True):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
