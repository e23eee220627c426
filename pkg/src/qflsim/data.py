"""Dataset loaders: MNIST IDX, CIFAR-10 binary batches, 8x8 digits, synthetic blobs."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072
DATA_ROOT_ENV = "QFLSIM_DATA"

DATASETS = ("mnist", "mnist8x8", "cifar10", "synthetic_blobs")


class LoadError(IOError):
    pass


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LoadError(f"{path}: truncated header at byte offset {len(raw)}, need {header} bytes")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise LoadError(f"{path}: bad magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise LoadError(
            f"{path}: truncated payload at byte offset {len(raw)}, expected {header + size} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Batch:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise LoadError(
            f"{images_path}: {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    if labels.size and labels.max() > 9:
        raise LoadError(f"{labels_path}: label {int(labels.max())} outside [0, 9]")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Batch(x, labels.astype(np.int64), 10)


def write_mnist_idx(batch: Batch, images_path, labels_path, side: int = 28) -> None:
    """Inverse of ``load_mnist_idx`` for pools whose pixels are multiples of 1/255."""
    pixels = np.rint(batch.inputs * 255.0).astype(np.uint8)
    n = pixels.shape[0]
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, side, side) + pixels.reshape(n, side * side).tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + batch.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(paths) -> Batch:
    """Concatenate CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    xs, ys = [], []
    for path in [paths] if isinstance(paths, (str, os.PathLike)) else paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise LoadError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD} "
                f"(trailing record starts at byte offset {len(raw) - len(raw) % CIFAR_RECORD})"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] > 9)[0]
        if bad.size:
            raise LoadError(f"{path}: label byte {int(rec[bad[0], 0])} at byte offset {int(bad[0]) * CIFAR_RECORD}")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].astype(np.float64) / 255.0)
    return Batch(np.concatenate(xs), np.concatenate(ys), 10)


def synthetic_blobs(n_classes: int, n_per_class: int, dim: int, separation: float, rng: np.random.Generator) -> Batch:
    """Unit-variance Gaussian clusters centred at ``separation * e_c`` (basis direction c mod dim)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    centers = np.zeros((n_classes, dim))
    for c in range(n_classes):
        centers[c, c % dim] = separation * (1 + c // dim)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return Batch(x[order], labels[order], n_classes)


def downscale_28_to_8(images: np.ndarray) -> np.ndarray:
    """Crop 28x28 to the central 24x24 and average 3x3 blocks."""
    img = images.reshape(-1, 28, 28)[:, 2:26, 2:26]
    return img.reshape(-1, 8, 3, 8, 3).mean(axis=(2, 4)).reshape(-1, 64)


def _stratified_split(batch: Batch, n_train: int, n_test: int, rng: np.random.Generator) -> tuple[Batch, Batch]:
    order = rng.permutation(len(batch))
    n_train = min(n_train, len(batch) - min(n_test, len(batch) // 3))
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:n_train + n_test])
    return batch.subset(train_idx), batch.subset(test_idx)


@dataclass(frozen=True)
class DatasetSpec:
    id: str = "mnist8x8"
    root: str | None = None
    train_size: int | None = 2000
    test_size: int | None = 1000
    blob_separation: float = 3.0
    blob_dim: int = 8
    blob_classes: int = 4
    blob_per_class: int = 300

    def __post_init__(self) -> None:
        if self.id not in DATASETS:
            raise ValueError(f"unknown dataset {self.id!r}; expected one of {DATASETS}")

    def data_root(self) -> Path | None:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        return Path(root) if root else None


def _mnist_files(root: Path) -> tuple[Path, Path, Path, Path] | None:
    names = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte", "t10k-images.idx3-ubyte", "t10k-labels.idx1-ubyte"),
    ]
    for base in (root, root / "mnist", root / "MNIST" / "raw"):
        for group in names:
            paths = tuple(base / n for n in group)
            if all(p.exists() for p in paths):
                return paths
    return None


def _take(batch: Batch, size: int | None, rng: np.random.Generator) -> Batch:
    if size is None or size >= len(batch):
        return batch
    return batch.subset(np.sort(rng.permutation(len(batch))[:size]))


def load_dataset(spec: DatasetSpec, seed: int = 0) -> tuple[Batch, Batch, str]:
    """Return ``(train, test, source)``; ``source`` names the data actually used."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0xDA7A])
    root = spec.data_root()
    if spec.id in ("mnist", "mnist8x8"):
        files = _mnist_files(root) if root else None
        if files is not None:
            train = load_mnist_idx(files[0], files[1])
            test = load_mnist_idx(files[2], files[3])
            if spec.id == "mnist8x8":
                train = Batch(downscale_28_to_8(train.inputs), train.labels)
                test = Batch(downscale_28_to_8(test.inputs), test.labels)
            return _take(train, spec.train_size, rng), _take(test, spec.test_size, rng), "mnist-idx"
        if spec.id == "mnist":
            raise LoadError(f"MNIST IDX files not found; set ${DATA_ROOT_ENV} to the directory holding them")
        # bundled 8x8 handwritten digits (1,797 images, pixel range 0..16)
        from sklearn.datasets import load_digits

        digits = load_digits()
        pool = Batch(digits.data / 16.0, digits.target, 10)
        n_test = min(spec.test_size or 600, len(pool) // 3)
        n_train = min(spec.train_size or len(pool), len(pool) - n_test)
        train, test = _stratified_split(pool, n_train, n_test, rng)
        return train, test, "sklearn-digits-8x8"
    if spec.id == "cifar10":
        if root is None:
            raise LoadError(f"CIFAR-10 binaries not found; set ${DATA_ROOT_ENV}")
        base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").exists() else root
        train_files = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
        test_file = base / "test_batch.bin"
        missing = [str(p) for p in train_files + [test_file] if not p.exists()]
        if missing:
            raise LoadError(f"missing CIFAR-10 files: {missing}")
        return (
            _take(load_cifar10_bin(train_files), spec.train_size, rng),
            _take(load_cifar10_bin(test_file), spec.test_size, rng),
            "cifar10-bin",
        )
    pool = synthetic_blobs(spec.blob_classes, spec.blob_per_class, spec.blob_dim, spec.blob_separation, rng)
    n_test = min(spec.test_size or len(pool) // 4, len(pool) // 2)
    train, test = _stratified_split(pool, len(pool) - n_test, n_test, rng)
    return train, test, "synthetic-blobs"
