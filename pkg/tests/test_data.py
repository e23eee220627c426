import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qflsim.data import (
    CIFAR_RECORD,
    DatasetSpec,
    LoadError,
    downscale_28_to_8,
    load_cifar10_bin,
    load_dataset,
    load_mnist_idx,
    synthetic_blobs,
    write_mnist_idx,
)
from qflsim.model import Batch


def pool(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.integers(0, 256, (n, 784)) / 255.0, rng.integers(0, 10, n), 10)


class TestMnistIdx:
    def test_round_trip(self, tmp_path):
        src = pool()
        write_mnist_idx(src, tmp_path / "img", tmp_path / "lbl")
        back = load_mnist_idx(tmp_path / "img", tmp_path / "lbl")
        assert np.array_equal(back.inputs, src.inputs) and np.array_equal(back.labels, src.labels)

    def test_bad_magic(self, tmp_path):
        write_mnist_idx(pool(), tmp_path / "img", tmp_path / "lbl")
        raw = bytearray((tmp_path / "img").read_bytes())
        raw[:4] = b"\x00\x00\x00\x00"
        (tmp_path / "img").write_bytes(bytes(raw))
        with pytest.raises(LoadError, match="0x00000803"):
            load_mnist_idx(tmp_path / "img", tmp_path / "lbl")

    def test_truncated(self, tmp_path):
        write_mnist_idx(pool(), tmp_path / "img", tmp_path / "lbl")
        (tmp_path / "img").write_bytes((tmp_path / "img").read_bytes()[:-10])
        with pytest.raises(LoadError, match="byte offset"):
            load_mnist_idx(tmp_path / "img", tmp_path / "lbl")

    def test_count_mismatch(self, tmp_path):
        write_mnist_idx(pool(12), tmp_path / "img", tmp_path / "lbl")
        write_mnist_idx(pool(5), tmp_path / "img5", tmp_path / "lbl5")
        with pytest.raises(LoadError):
            load_mnist_idx(tmp_path / "img", tmp_path / "lbl5")

    def test_full_pixel_is_one(self, tmp_path):
        (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, 1, 28, 28) + b"\xff" * 784)
        (tmp_path / "lbl").write_bytes(struct.pack(">II", 0x801, 1) + b"\x03")
        b = load_mnist_idx(tmp_path / "img", tmp_path / "lbl")
        assert np.all(b.inputs == 1.0) and b.labels[0] == 3


class TestCifar:
    def test_single_record(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes([7]) + bytes(range(256)) * 12)
        b = load_cifar10_bin([tmp_path / "b.bin"])
        assert len(b) == 1 and b.labels[0] == 7
        assert b.inputs.shape == (1, 3072) and b.inputs.max() == 1.0

    def test_bad_size(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"\x00" * (CIFAR_RECORD + 5))
        with pytest.raises(LoadError, match="3073"):
            load_cifar10_bin(tmp_path / "b.bin")

    def test_bad_label(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes([10]) + b"\x00" * 3072)
        with pytest.raises(LoadError):
            load_cifar10_bin(tmp_path / "b.bin")

    def test_concatenates(self, tmp_path):
        for i in range(2):
            (tmp_path / f"{i}.bin").write_bytes((bytes([i]) + b"\x10" * 3072) * 3)
        b = load_cifar10_bin([tmp_path / "0.bin", tmp_path / "1.bin"])
        assert list(b.labels) == [0, 0, 0, 1, 1, 1]


class TestBlobs:
    def test_separable(self):
        rng = np.random.default_rng(0)
        train = synthetic_blobs(2, 500, 4, 10.0, rng)
        test = synthetic_blobs(2, 500, 4, 10.0, rng)
        # centres sit at 10*e0 and 10*e1: the Bayes rule compares those two coordinates
        pred = (test.inputs[:, 1] > test.inputs[:, 0]).astype(int)
        assert np.mean(pred == test.labels) >= 0.99
        assert train.n_classes == 2

    def test_no_separation(self):
        rng = np.random.default_rng(1)
        data = synthetic_blobs(4, 500, 4, 0.0, rng)
        centroids = np.array([data.inputs[data.labels == c].mean(axis=0) for c in range(4)])
        test = synthetic_blobs(4, 500, 4, 0.0, rng)
        pred = np.argmin(((test.inputs[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
        assert abs(np.mean(pred == test.labels) - 0.25) <= 0.05

    def test_seeded(self):
        a = synthetic_blobs(3, 10, 5, 2.0, np.random.default_rng(4))
        b = synthetic_blobs(3, 10, 5, 2.0, np.random.default_rng(4))
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)

    def test_bad_dim(self):
        with pytest.raises(ValueError):
            synthetic_blobs(2, 5, 0, 1.0, np.random.default_rng(0))


class TestLoadDataset:
    def test_digits_fallback(self, monkeypatch):
        monkeypatch.delenv("QFLSIM_DATA", raising=False)
        train, test, source = load_dataset(DatasetSpec("mnist8x8"), 0)
        assert source == "sklearn-digits-8x8"
        assert train.inputs.shape[1] == 64 and len(train) + len(test) <= 1797
        assert set(np.unique(train.labels)) == set(range(10))
        assert train.inputs.min() >= 0 and train.inputs.max() <= 1

    def test_idx_from_env(self, tmp_path, monkeypatch):
        for prefix, n in (("train", 30), ("t10k", 10)):
            write_mnist_idx(pool(n, seed=n), tmp_path / f"{prefix}-images-idx3-ubyte",
                            tmp_path / f"{prefix}-labels-idx1-ubyte")
        monkeypatch.setenv("QFLSIM_DATA", str(tmp_path))
        train, test, source = load_dataset(DatasetSpec("mnist8x8", train_size=20, test_size=None), 0)
        assert source == "mnist-idx" and len(train) == 20 and len(test) == 10
        assert train.inputs.shape[1] == 64

    def test_mnist_missing(self, monkeypatch, tmp_path):
        monkeypatch.setenv("QFLSIM_DATA", str(tmp_path))
        with pytest.raises(LoadError):
            load_dataset(DatasetSpec("mnist"), 0)

    def test_cifar_missing(self, monkeypatch):
        monkeypatch.delenv("QFLSIM_DATA", raising=False)
        with pytest.raises(LoadError):
            load_dataset(DatasetSpec("cifar10"), 0)

    def test_unknown(self):
        with pytest.raises(ValueError):
            DatasetSpec("imagenet")

    def test_blobs_deterministic(self):
        spec = DatasetSpec("synthetic_blobs")
        a, b = load_dataset(spec, 3), load_dataset(spec, 3)
        assert np.array_equal(a[0].inputs, b[0].inputs) and a[2] == "synthetic-blobs"


def test_downscale_block_average():
    img = np.zeros((1, 784))
    img[0, 2 * 28 + 2: 2 * 28 + 5] = 1.0  # three pixels of the first 3x3 block
    out = downscale_28_to_8(img)
    assert out.shape == (1, 64)
    assert_allclose(out[0, 0], 3 / 9)
    assert_allclose(out[0, 1:], 0)
