"""Dataset ingestion, disjoint target/shadow partitioning, membership labels.

Datasets are kept as plain arrays: images shaped (N, H, W, C) with pixel
values in [0, 1], integer class labels in [0, K).  Splits are stored as
index manifests rather than copied data, so a run directory records which
samples went where without duplicating the dataset.
"""

import gzip
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DatasetDecodeError,
    DatasetNotFoundError,
    InsufficientDataError,
    InvalidInputError,
)

SPLIT_NAMES = ("target_train", "target_test", "shadow_train", "shadow_test")


@dataclass
class LabeledDataset:
    """Images plus integer class labels.

    images: float32 array (N, H, W, C), values in [0, 1].
    class_labels: int64 array (N,), values in [0, num_classes).
    """

    images: np.ndarray
    class_labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidInputError(
                f"images must be (N, H, W, C), got shape {self.images.shape}"
            )
        if len(self.images) != len(self.class_labels):
            raise InvalidInputError(
                f"{len(self.images)} images but {len(self.class_labels)} labels"
            )
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be at least 2")
        if len(self.class_labels):
            bad = np.flatnonzero(
                (self.class_labels < 0) | (self.class_labels >= self.num_classes)
            )
            if len(bad):
                raise DatasetDecodeError(
                    f"label out of range at record {bad[0]}", index=int(bad[0])
                )
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < 0.0 or hi > 1.0:
                raise InvalidInputError(
                    f"pixel values outside [0, 1]: range [{lo}, {hi}]"
                )

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        """New dataset restricted to ``indices``, order preserved."""
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[indices],
            class_labels=self.class_labels[indices],
            name=self.name,
            num_classes=self.num_classes,
        )


@dataclass
class SplitSpec:
    """Disjoint index sets carving one parent dataset into four splits."""

    target_train: np.ndarray
    target_test: np.ndarray
    shadow_train: np.ndarray
    shadow_test: np.ndarray
    seed: int

    def __post_init__(self):
        for name in SPLIT_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        parts = [getattr(self, name) for name in SPLIT_NAMES]
        total = sum(len(p) for p in parts)
        combined = np.concatenate(parts) if total else np.empty(0, dtype=np.int64)
        if len(np.unique(combined)) != total:
            raise InvalidInputError("split index sets overlap")

    def split(self, name):
        if name not in SPLIT_NAMES:
            raise InvalidInputError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def sizes(self):
        return tuple(len(getattr(self, name)) for name in SPLIT_NAMES)


@dataclass
class MembershipSet:
    """Sample indices with binary membership labels for one model role.

    Train-split samples carry y=1 (members), test-split samples y=0.
    """

    indices: np.ndarray
    labels: np.ndarray
    source: str

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.indices) != len(self.labels):
            raise InvalidInputError("indices and labels must align")
        if len(self.labels) and not np.isin(self.labels, (0, 1)).all():
            raise InvalidInputError("membership labels must be 0 or 1")

    def __len__(self):
        return len(self.indices)


def _read_idx(path):
    """Decode an IDX file (gzip or raw); returns an ndarray."""
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DatasetDecodeError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4:
        raise DatasetDecodeError(f"{path}: truncated header")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code != 0x08:
        raise DatasetDecodeError(f"{path}: bad magic {raw[:4].hex()}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise DatasetDecodeError(
            f"{path}: expected {expected} bytes of payload, found {data.size}"
        )
    return data.reshape(dims)


def _load_fmnist(root):
    base = os.path.join(root, "fmnist")
    names = {
        "train_images": "train-images-idx3-ubyte.gz",
        "train_labels": "train-labels-idx1-ubyte.gz",
        "test_images": "t10k-images-idx3-ubyte.gz",
        "test_labels": "t10k-labels-idx1-ubyte.gz",
    }
    paths = {k: os.path.join(base, v) for k, v in names.items()}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise DatasetNotFoundError(f"fmnist files missing under {base}: {missing}")
    images = np.concatenate(
        [_read_idx(paths["train_images"]), _read_idx(paths["test_images"])]
    )
    labels = np.concatenate(
        [_read_idx(paths["train_labels"]), _read_idx(paths["test_labels"])]
    )
    images = images.astype(np.float32)[..., None] / 255.0
    return LabeledDataset(images, labels.astype(np.int64), "fmnist", 10)


def _load_stl10(root):
    base = os.path.join(root, "stl10")
    files = ["train_X.bin", "train_y.bin", "test_X.bin", "test_y.bin"]
    paths = [os.path.join(base, f) for f in files]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise DatasetNotFoundError(f"stl10 files missing under {base}: {missing}")
    chunks, label_chunks = [], []
    for xpath, ypath in ((paths[0], paths[1]), (paths[2], paths[3])):
        data = np.fromfile(xpath, dtype=np.uint8)
        if data.size % (3 * 96 * 96):
            raise DatasetDecodeError(f"{xpath}: size not a multiple of one image")
        # stored channel-first, column-major within each channel
        imgs = data.reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1)
        labels = np.fromfile(ypath, dtype=np.uint8)
        if len(labels) != len(imgs):
            raise DatasetDecodeError(f"{ypath}: {len(labels)} labels for {len(imgs)} images")
        chunks.append(imgs)
        label_chunks.append(labels)
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    labels = np.concatenate(label_chunks).astype(np.int64) - 1  # stored 1-based
    return LabeledDataset(images, labels, "stl10", 10)


def _load_npz(name, root):
    path = os.path.join(root, f"{name}.npz")
    if not os.path.exists(path):
        raise DatasetNotFoundError(f"no dataset {name!r} under {root}")
    try:
        with np.load(path) as payload:
            images = payload["images"]
            labels = payload["labels"]
    except (KeyError, ValueError, OSError) as exc:
        raise DatasetDecodeError(f"{path}: {exc}") from exc
    if images.ndim == 3:
        images = images[..., None]
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    labels = labels.astype(np.int64)
    num_classes = int(labels.max()) + 1 if len(labels) else 2
    return LabeledDataset(images.astype(np.float32), labels, name, max(num_classes, 2))


def load_dataset(name, root):
    """Load a dataset by name from the storage root.

    Recognized layouts: ``fmnist`` (gzipped IDX files under root/fmnist),
    ``stl10`` (binary files under root/stl10), and ``<name>.npz`` with
    ``images``/``labels`` arrays for anything else.  Train and test files
    are concatenated; partitioning owns all split decisions.
    """
    if not os.path.isdir(root):
        raise DatasetNotFoundError(f"storage root {root!r} does not exist")
    if name == "fmnist":
        return _load_fmnist(root)
    if name == "stl10":
        return _load_stl10(root)
    return _load_npz(name, root)


def partition(dataset, sizes, seed):
    """Carve four disjoint class-stratified splits out of ``dataset``.

    ``sizes`` gives (target_train, target_test, shadow_train, shadow_test)
    counts.  Per split, each class contributes its proportional share with
    largest-remainder rounding, so class fractions stay within one sample
    of exact stratification.  Deterministic in ``seed``.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != len(SPLIT_NAMES):
        raise InvalidInputError(f"need {len(SPLIT_NAMES)} sizes, got {len(sizes)}")
    if any(s < 0 for s in sizes):
        raise InvalidInputError("split sizes must be non-negative")
    total = sum(sizes)
    n = len(dataset)
    if total > n:
        raise InsufficientDataError(f"requested {total} samples from {n}")

    rng = np.random.default_rng(seed)
    labels = dataset.class_labels
    classes = np.arange(dataset.num_classes)
    pools = {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        pools[c] = idx[rng.permutation(len(idx))]
    cursor = {c: 0 for c in classes}
    class_fracs = np.array([len(pools[c]) for c in classes], dtype=np.float64) / max(n, 1)

    arrays = []
    for size in sizes:
        exact = size * class_fracs
        quota = np.floor(exact).astype(np.int64)
        remainder = exact - quota
        short = size - int(quota.sum())
        if short > 0:
            for c in np.lexsort((classes, -remainder))[:short]:
                quota[c] += 1
        chosen = []
        deficit = 0
        for c in classes:
            available = len(pools[c]) - cursor[c]
            take = min(int(quota[c]), available)
            deficit += int(quota[c]) - take
            chosen.append(pools[c][cursor[c] : cursor[c] + take])
            cursor[c] += take
        # backfill from the deepest remaining pools when a class ran dry
        while deficit > 0:
            spare = [(len(pools[c]) - cursor[c], -c) for c in classes]
            richest = -max(spare)[1]
            if len(pools[richest]) - cursor[richest] <= 0:
                raise InsufficientDataError("class pools exhausted during stratification")
            chosen.append(pools[richest][cursor[richest] : cursor[richest] + 1])
            cursor[richest] += 1
            deficit -= 1
        arrays.append(np.sort(np.concatenate(chosen)) if chosen else np.empty(0, np.int64))
    return SplitSpec(*arrays, seed=int(seed))


def label_membership(split, source):
    """Membership labels for one model role: train → y=1, test → y=0."""
    if source == "target":
        train, test = split.target_train, split.target_test
    elif source == "shadow":
        train, test = split.shadow_train, split.shadow_test
    else:
        raise InvalidInputError(f"source must be 'target' or 'shadow', got {source!r}")
    indices = np.concatenate([train, test])
    labels = np.concatenate(
        [np.ones(len(train), dtype=np.int64), np.zeros(len(test), dtype=np.int64)]
    )
    return MembershipSet(indices=indices, labels=labels, source=source)


def save_split(split, path):
    """Write a SplitSpec as a JSON manifest; byte-stable across runs."""
    payload = {
        "seed": int(split.seed),
        "sizes": list(split.sizes),
    }
    for name in SPLIT_NAMES:
        payload[name] = [int(i) for i in getattr(split, name)]
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_split(path):
    if not os.path.exists(path):
        raise DatasetNotFoundError(f"split manifest {path} does not exist")
    with open(path) as fh:
        payload = json.load(fh)
    return SplitSpec(
        *[np.asarray(payload[name], dtype=np.int64) for name in SPLIT_NAMES],
        seed=int(payload["seed"]),
    )
