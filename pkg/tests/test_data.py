import struct

import numpy as np
import pytest

from latentbnn import data as D
from latentbnn.errors import DataError
from latentbnn.tensor import Rng


def write_mnist_like(tmp_path, n=20, prefix="train"):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labs = rng.integers(0, 10, n).astype(np.uint8)
    D.write_idx(tmp_path / f"{prefix}-images-idx3-ubyte", imgs)
    D.write_idx(tmp_path / f"{prefix}-labels-idx1-ubyte", labs)
    return imgs, labs


def test_idx_roundtrip(tmp_path):
    imgs, labs = write_mnist_like(tmp_path)
    np.testing.assert_array_equal(D.read_idx(tmp_path / "train-images-idx3-ubyte"), imgs)
    np.testing.assert_array_equal(D.read_idx(tmp_path / "train-labels-idx1-ubyte"), labs)


def test_idx_header_is_big_endian(tmp_path):
    write_mnist_like(tmp_path, n=3)
    raw = (tmp_path / "train-images-idx3-ubyte").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 3, 28, 28)


def test_load_idx_standardizes(tmp_path):
    imgs, labs = write_mnist_like(tmp_path)
    ds = D.load_idx(tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    assert ds.images.shape == (20, 1, 28, 28) and ds.images.dtype == np.float32
    exp = (imgs[3, 5, 7] / 255.0 - 0.1307) / 0.3081
    assert ds.images[3, 0, 5, 7] == pytest.approx(exp, rel=1e-5)
    np.testing.assert_array_equal(ds.labels, labs)
    assert len(D.load_dataset("mnist", "train", str(tmp_path), limit=5)) == 5


def test_idx_errors(tmp_path):
    imgs, labs = write_mnist_like(tmp_path)
    p = tmp_path / "bad"
    p.write_bytes(b"\x00\x00\x09\x03" + bytes(12))
    with pytest.raises(D.IDXFormatError, match="magic"):
        D.read_idx(p)
    raw = (tmp_path / "train-images-idx3-ubyte").read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(D.IDXFormatError, match="truncated"):
        D.read_idx(p)
    D.write_idx(tmp_path / "short-labels", labs[:-1])
    with pytest.raises(DataError, match="mismatch"):
        D.load_idx(tmp_path / "train-images-idx3-ubyte", tmp_path / "short-labels")


def test_cifar_roundtrip_and_layout():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (D.CIFAR_BATCH_RECORDS, 3, 32, 32), dtype=np.uint8)
    labs = rng.integers(0, 10, D.CIFAR_BATCH_RECORDS)
    raw = D.serialize_cifar_batch(imgs, labs)
    assert len(raw) == 30_730_000
    # record layout: label byte then the red plane row-major
    assert raw[0] == labs[0] and raw[1] == imgs[0, 0, 0, 0] and raw[1 + 1024] == imgs[0, 1, 0, 0]
    im2, lb2 = D.parse_cifar_batch(raw)
    np.testing.assert_array_equal(im2, imgs)
    np.testing.assert_array_equal(lb2, labs)
    with pytest.raises(D.CifarFormatError):
        D.parse_cifar_batch(raw[:-1])


def test_load_cifar10_directory(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (D.CIFAR_BATCH_RECORDS, 3, 32, 32), dtype=np.uint8)
    labs = rng.integers(0, 10, D.CIFAR_BATCH_RECORDS)
    (tmp_path / "test_batch.bin").write_bytes(D.serialize_cifar_batch(imgs, labs))
    ds = D.load_cifar10(tmp_path, "test", limit=50)
    assert ds.images.shape == (50, 3, 32, 32)
    with pytest.raises(DataError, match="missing"):
        D.load_cifar10(tmp_path, "train")
    labs[5] = 11
    (tmp_path / "test_batch.bin").write_bytes(D.serialize_cifar_batch(imgs, labs))
    with pytest.raises(D.CifarFormatError):
        D.load_cifar10(tmp_path, "test")


def test_digits_split_deterministic_and_disjoint():
    tr, te = D.load_digits("train"), D.load_digits("test")
    assert len(tr) == 1297 and len(te) == 500
    np.testing.assert_array_equal(D.load_digits("train").images, tr.images)
    assert tr.images.shape[1:] == (1, 8, 8)


def test_digits_normalization_constants():
    pixels, _ = D.digits_pixels()
    mean, std = D.dataset_channel_stats(pixels)
    c = D.NORMALIZATION["digits"]
    assert mean[0] == pytest.approx(c["mean"][0], abs=1e-4)
    assert std[0] == pytest.approx(c["std"][0], abs=1e-4)


def test_dataset_validation():
    with pytest.raises(DataError):
        D.Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0))
    with pytest.raises(DataError):
        D.Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3))
    with pytest.raises(DataError):
        D.Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 10]))
    with pytest.raises(DataError):
        D.load_dataset("imagenet", "train")


def test_augment_identity_when_disabled():
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8)).astype(np.float32)
    assert D.augment(x, D.AugmentConfig(pad=0), Rng(0)) is x


def test_augment_forced_flip_mirrors():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 4)).astype(np.float32)
    out = D.augment(x, D.AugmentConfig(pad=0, hflip=False), Rng(0), force_flip=True)
    np.testing.assert_array_equal(out, x[..., ::-1])


def test_augment_crop_is_a_shifted_window():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = D.augment(x, D.AugmentConfig(pad=1), Rng(0))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = [padded[0, 0, i : i + 4, j : j + 4] for i in range(3) for j in range(3)]
    assert any(np.array_equal(out[0, 0], w) for w in windows)


def test_crop_offsets_uniform():
    oy, ox = D.crop_offsets(30000, D.AugmentConfig(pad=2), 8, Rng(0))
    counts = np.bincount(oy, minlength=5)
    assert oy.min() == 0 and oy.max() == 4
    assert np.all(np.abs(counts / 30000 - 0.2) < 0.01)


def test_augment_rejects_oversized_crop():
    with pytest.raises(ValueError):
        D.augment(np.zeros((1, 1, 4, 4)), D.AugmentConfig(pad=0, crop=5), Rng(0))


def test_batches_cover_every_sample_once():
    ds = D.Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10) % 3, num_classes=3)
    seen = np.concatenate([lab for _, lab in D.batches(ds, 4, Rng(0))])
    assert len(seen) == 10
    imgs = np.concatenate([im for im, _ in D.batches(ds, 4, Rng(0))]).ravel()
    assert sorted(imgs.tolist()) == list(range(10))
    first = [im.ravel().tolist() for im, _ in D.batches(ds, 4, Rng(5))]
    again = [im.ravel().tolist() for im, _ in D.batches(ds, 4, Rng(5))]
    assert first == again
    with pytest.raises(ValueError):
        list(D.batches(ds, 0))
