"""Deterministic stand-in datasets written in the real on-disk formats.

This sandbox has no access to the MNIST/CIFAR-10 download hosts, so desk
experiments run on generated data instead:

- mnist-like: sklearn's 8x8 handwritten digits upscaled onto a 28x28
  canvas with random shifts and pixel noise, written as IDX files. Train
  and test draw from disjoint sets of source digits.
- cifar10-like: ten fixed smooth color-field class templates mixed with
  spatially-correlated noise, randomly shifted, with a configurable
  fraction of label noise, written as CIFAR-10 binary batches.
"""

import os
import struct

import numpy as np
from sklearn.datasets import load_digits

from .data import CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC


def write_idx_images(path, images):
    """images: uint8 [n, h, w]."""
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def _render_digits(bases, labels, n, rng, noise=8.0, jitter=2):
    """Place upscaled 8x8 digits on 28x28 canvases with jitter and noise."""
    idx = rng.integers(0, len(bases), size=n)
    out = np.zeros((n, 28, 28), dtype=np.float64)
    for i, j in enumerate(idx):
        glyph = np.kron(bases[j], np.ones((2, 2)))  # 16x16
        r, c = rng.integers(6 - jitter, 6 + jitter + 1, size=2)
        out[i, r:r + 16, c:c + 16] = glyph * (255.0 / 16.0)
    out += rng.normal(0.0, noise, size=out.shape)
    return np.clip(out, 0, 255).astype(np.uint8), labels[idx].astype(np.uint8)


def make_mnist_like(directory, n_train=6000, n_test=1000, seed=0, noise=8.0,
                    jitter=2):
    """Write train/test IDX files; returns the directory."""
    os.makedirs(directory, exist_ok=True)
    digits = load_digits()
    images = digits.images  # [1797, 8, 8] values 0..16
    labels = digits.target
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    cut = int(0.75 * len(images))
    tr_idx, te_idx = order[:cut], order[cut:]
    tr_imgs, tr_labs = _render_digits(images[tr_idx], labels[tr_idx], n_train,
                                      rng, noise, jitter)
    te_imgs, te_labs = _render_digits(images[te_idx], labels[te_idx], n_test,
                                      rng, noise, jitter)
    write_idx_images(os.path.join(directory, "train-images-idx3-ubyte"), tr_imgs)
    write_idx_labels(os.path.join(directory, "train-labels-idx1-ubyte"), tr_labs)
    write_idx_images(os.path.join(directory, "t10k-images-idx3-ubyte"), te_imgs)
    write_idx_labels(os.path.join(directory, "t10k-labels-idx1-ubyte"), te_labs)
    return directory


def _correlated_noise(rng, n, res=8):
    """Low-resolution uniform noise upsampled to 32x32: blobs, not static."""
    coarse = rng.uniform(0, 1, size=(n, 3, res, res))
    return np.kron(coarse, np.ones((1, 1, 32 // res, 32 // res)))


def make_cifar10_like(directory, n_train=5000, n_test=1000, seed=0,
                      label_noise=0.1, signal=0.45, jitter=2):
    """Write CIFAR-10 binary batch files; returns the directory.

    Each sample is signal * class_template + (1 - signal) * fresh
    correlated noise, shifted by up to `jitter` pixels, with a
    `label_noise` fraction of labels resampled uniformly.
    """
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = _correlated_noise(rng, 10, res=4)

    def make_split(n):
        labels = rng.integers(0, 10, size=n)
        images = (signal * templates[labels]
                  + (1.0 - signal) * _correlated_noise(rng, n))
        shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
        for i in range(n):
            images[i] = np.roll(images[i], shifts[i], axis=(1, 2))
        flip = rng.uniform(size=n) < label_noise
        labels[flip] = rng.integers(0, 10, size=int(flip.sum()))
        return (np.clip(images * 255.0, 0, 255).astype(np.uint8),
                labels.astype(np.uint8))

    tr_imgs, tr_labs = make_split(n_train)
    te_imgs, te_labs = make_split(n_test)

    def write_batch(path, imgs, labs):
        recs = np.concatenate(
            [labs[:, None], imgs.reshape(len(imgs), -1)], axis=1)
        recs.astype(np.uint8).tofile(path)

    per = int(np.ceil(n_train / len(CIFAR_TRAIN_FILES)))
    for b, name in enumerate(CIFAR_TRAIN_FILES):
        sl = slice(b * per, min((b + 1) * per, n_train))
        write_batch(os.path.join(directory, name), tr_imgs[sl], tr_labs[sl])
    write_batch(os.path.join(directory, CIFAR_TEST_FILE), te_imgs, te_labs)
    return directory
