"""Dataset loaders: MNIST IDX files and CIFAR-10 binary batches.

Pixels are scaled by 1/255 at load time; no mean subtraction, no
augmentation.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def take(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _read_idx_images(path):
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataFormatError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"{path}: bad image magic 0x{magic:08x}")
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if raw.size != count * rows * cols:
        raise DataFormatError(
            f"{path}: expected {count * rows * cols} pixels, found {raw.size}")
    return raw.reshape(count, 1, rows, cols)


def _read_idx_labels(path):
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataFormatError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"{path}: bad label magic 0x{magic:08x}")
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if raw.size != count:
        raise DataFormatError(f"{path}: expected {count} labels, found {raw.size}")
    return raw.astype(np.int64)


def _idx_split(directory, images_file, labels_file, split):
    images = _read_idx_images(os.path.join(directory, images_file))
    labels = _read_idx_labels(os.path.join(directory, labels_file))
    if len(images) != len(labels):
        raise DataFormatError(
            f"{split}: {len(images)} images vs {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels, split)


def load_mnist(directory):
    """(train, test) from the standard four IDX files."""
    train = _idx_split(directory, "train-images-idx3-ubyte",
                       "train-labels-idx1-ubyte", "train")
    test = _idx_split(directory, "t10k-images-idx3-ubyte",
                      "t10k-labels-idx1-ubyte", "test")
    return train, test


def _read_cifar_batch(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise DataFormatError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{path}: label byte > 9")
    images = recs[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory):
    """(train, test) from the binary-batch files."""
    imgs, labs = [], []
    for name in CIFAR_TRAIN_FILES:
        i, l = _read_cifar_batch(os.path.join(directory, name))
        imgs.append(i)
        labs.append(l)
    train = Dataset(np.concatenate(imgs).astype(np.float64) / 255.0,
                    np.concatenate(labs), "train")
    i, l = _read_cifar_batch(os.path.join(directory, CIFAR_TEST_FILE))
    test = Dataset(i.astype(np.float64) / 255.0, l, "test")
    return train, test


def split_validation(train, n_val=5000):
    """Last n_val training images become the validation split."""
    n = len(train) - n_val
    return (Dataset(train.images[:n], train.labels[:n], "train"),
            Dataset(train.images[n:], train.labels[n:], "val"))


def batch_iterator(ds, batch_size, seed):
    """Deterministic shuffled minibatches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(ds))
    for i in range(0, len(ds), batch_size):
        idx = order[i:i + batch_size]
        yield ds.images[idx], ds.labels[idx]


def resolve_data_dir(flag_value=None):
    """--data-dir flag, else BINREP_DATA_DIR."""
    if flag_value:
        return flag_value
    env = os.environ.get("BINREP_DATA_DIR")
    if env:
        return env
    raise DataFormatError("no data directory: pass --data-dir or set BINREP_DATA_DIR")
