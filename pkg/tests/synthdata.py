"""Synthetic image datasets for the test suite.

The generator builds class-template images with per-sample noise and a
configurable fraction of flipped labels.  Label flipping guarantees an
overfit classifier memorizes its training set instead of generalizing,
which is what membership experiments need to observe a train/test gap.
No network access; writers emit the same on-disk layouts the loaders read.
"""

import gzip
import os
import struct

import numpy as np


def template_images(n, num_classes=10, side=28, noise=0.35, label_noise=0.15, seed=0):
    """Images of per-class blob templates plus noise; returns (images, labels).

    images: float32 (n, side, side, 1) in [0,1]; labels: int64 (n,).
    ``label_noise`` is the fraction of samples whose label is re-drawn
    uniformly, decoupling those images from their class template.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    templates = []
    for c in range(num_classes):
        cx = side * (0.25 + 0.5 * ((c * 2654435761) % 97) / 97.0)
        cy = side * (0.25 + 0.5 * ((c * 40503) % 89) / 89.0)
        width = side * (0.12 + 0.10 * (c % 4) / 4.0)
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width**2)))
        stripe = 0.3 * (0.5 + 0.5 * np.sin(2.0 * np.pi * (xx * (c + 1) / side)))
        templates.append(np.clip(blob + stripe, 0.0, 1.0))
    templates = np.stack(templates)

    labels = rng.integers(0, num_classes, size=n)
    images = templates[labels] + noise * rng.standard_normal((n, side, side)).astype(
        np.float32
    )
    images = np.clip(images, 0.0, 1.0).astype(np.float32)[..., None]
    flip = rng.random(n) < label_noise
    labels = labels.copy()
    labels[flip] = rng.integers(0, num_classes, size=int(flip.sum()))
    return images, labels.astype(np.int64)


def write_idx_images(path, images_u8):
    """IDX3 (magic 0x00000803) uint8 image file, gzipped when path ends .gz."""
    n, h, w = images_u8.shape
    header = struct.pack(">IIII", 0x00000803, n, h, w)
    payload = header + images_u8.astype(np.uint8).tobytes()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def write_idx_labels(path, labels_u8):
    header = struct.pack(">II", 0x00000801, len(labels_u8))
    payload = header + labels_u8.astype(np.uint8).tobytes()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def write_fmnist_layout(root, n_train=2000, n_test=500, seed=0, **kwargs):
    """Materialize an fmnist-layout directory from template images."""
    base = os.path.join(root, "fmnist")
    os.makedirs(base, exist_ok=True)
    images, labels = template_images(n_train + n_test, seed=seed, **kwargs)
    u8 = (images[..., 0] * 255).round().astype(np.uint8)
    write_idx_images(os.path.join(base, "train-images-idx3-ubyte.gz"), u8[:n_train])
    write_idx_labels(os.path.join(base, "train-labels-idx1-ubyte.gz"), labels[:n_train])
    write_idx_images(os.path.join(base, "t10k-images-idx3-ubyte.gz"), u8[n_train:])
    write_idx_labels(os.path.join(base, "t10k-labels-idx1-ubyte.gz"), labels[n_train:])
    return base


def write_stl10_layout(root, n_train=40, n_test=20, seed=0):
    """Materialize an stl10-layout directory with random uint8 images."""
    base = os.path.join(root, "stl10")
    os.makedirs(base, exist_ok=True)
    rng = np.random.default_rng(seed)
    for prefix, count in (("train", n_train), ("test", n_test)):
        imgs = rng.integers(0, 256, size=(count, 3, 96, 96), dtype=np.uint8)
        labels = rng.integers(1, 11, size=count, dtype=np.uint8)
        imgs.tofile(os.path.join(base, f"{prefix}_X.bin"))
        labels.tofile(os.path.join(base, f"{prefix}_y.bin"))
    return base


def write_npz_dataset(root, name, n=400, seed=0, **kwargs):
    images, labels = template_images(n, seed=seed, **kwargs)
    path = os.path.join(root, f"{name}.npz")
    np.savez(path, images=images, labels=labels)
    return path
