"""CIFAR binary ingestion, normalization/augmentation and a synthetic dataset."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFileError, MissingFileError

IMAGE_BYTES = 3 * 32 * 32
CIFAR10_FILES = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}
CIFAR100_FILES = {"train": ["train.bin"], "test": ["test.bin"]}
SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}

NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}


@dataclass
class DatasetSplit:
    """A split held as arrays.

    ``images`` is uint8 ``[N, 3, H, W]`` for CIFAR (raw bytes) or float
    ``[N, 3, H, W]`` already in normalized space for synthetic data.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    mean: tuple = None
    std: tuple = None
    coarse_labels: np.ndarray = field(default=None, repr=False)
    shuffle_seed: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def raw(self):
        return self.images.dtype == np.uint8


def record_size(dataset):
    if dataset == "cifar10":
        return 1 + IMAGE_BYTES
    if dataset == "cifar100":
        return 2 + IMAGE_BYTES
    raise ConfigError(f"unknown CIFAR variant {dataset!r}")


def parse_batch(data, dataset="cifar10", source="<bytes>"):
    """Parse one binary batch. Returns ``(labels, images, coarse_or_None)``."""
    rs = record_size(dataset)
    if len(data) % rs:
        raise CorruptFileError(f"{source}: size {len(data)} is not a multiple of the {rs}-byte record")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, rs)
    if dataset == "cifar10":
        return arr[:, 0].astype(np.int64), arr[:, 1:].reshape(-1, 3, 32, 32).copy(), None
    return arr[:, 1].astype(np.int64), arr[:, 2:].reshape(-1, 3, 32, 32).copy(), arr[:, 0].astype(np.int64)


def serialize_batch(labels, images, dataset="cifar10", coarse=None):
    """Inverse of :func:`parse_batch`."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), IMAGE_BYTES)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if dataset == "cifar100":
        coarse = np.zeros(len(labels), dtype=np.uint8) if coarse is None else np.asarray(coarse, dtype=np.uint8)
        cols.insert(0, coarse[:, None])
    return np.concatenate(cols + [images], axis=1).tobytes()


def _find_dir(root, dataset):
    root = Path(root)
    sub = root / SUBDIRS[dataset]
    return sub if sub.is_dir() else root


def load_cifar(root, dataset="cifar10"):
    """Load ``(train, test)`` splits from the standard binary batch files."""
    if dataset not in SUBDIRS:
        raise ConfigError(f"unknown CIFAR variant {dataset!r}")
    d = _find_dir(root, dataset)
    names = CIFAR10_FILES if dataset == "cifar10" else CIFAR100_FILES
    expected = [d / n for split in ("train", "test") for n in names[split]]
    missing = [p.name for p in expected if not p.exists()]
    if missing:
        raise MissingFileError(f"{d}: missing CIFAR files {missing} (expected {[p.name for p in expected]})")
    mean, std = NORMALIZATION[dataset]
    n_classes = 10 if dataset == "cifar10" else 100
    splits = []
    for split in ("train", "test"):
        parts = [parse_batch((d / n).read_bytes(), dataset, str(d / n)) for n in names[split]]
        labels = np.concatenate([p[0] for p in parts])
        images = np.concatenate([p[1] for p in parts])
        coarse = None if dataset == "cifar10" else np.concatenate([p[2] for p in parts])
        splits.append(DatasetSplit(images, labels, split, n_classes, mean, std, coarse))
    return splits[0], splits[1]


def normalize(images, mean, std):
    x = images.astype(np.float64) / 255.0
    return (x - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]


def random_crop_flip(x, rng, pad=4, flip=None):
    """Pad-and-crop back to the input size plus horizontal flip (probability 0.5).

    ``flip`` forces the flip decision for every image when given.
    """
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    flips = rng.random(n) < 0.5 if flip is None else np.full(n, bool(flip))
    out[flips] = out[flips][..., ::-1]
    return out


def hflip(x):
    return x[..., ::-1].copy()


def normalize_augment(split, idx, mode, rng=None, augment=True):
    """Batch of model inputs for rows ``idx`` of ``split``.

    Eval mode only normalizes; train mode may also crop and flip.
    """
    imgs = split.images[idx]
    x = normalize(imgs, split.mean, split.std) if split.raw else np.array(imgs, dtype=np.float64)
    if mode == "train" and augment:
        if rng is None:
            raise ConfigError("train-mode augmentation needs an rng")
        x = random_crop_flip(x, rng)
    return x


def _class_patterns(rng, classes, size, amplitude):
    """One mean image per class: a class colour plus an oriented grating."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    pats = np.empty((classes, 3, size, size))
    for c in range(classes):
        theta = np.pi * c / classes + rng.uniform(-0.1, 0.1)
        freq = 3.0 + (c % 3)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        colour = rng.normal(0.0, 0.5, 3)
        mix = rng.uniform(0.5, 1.0, 3)
        pats[c] = colour[:, None, None] + amplitude * mix[:, None, None] * wave[None]
    return pats


def synth_dataset(n, classes, seed=0, n_test=None, image_size=32, noise=1.0, amplitude=1.0):
    """Class-conditional Gaussian images around per-class mean patterns.

    Each image is ``contrast * pattern[label] + shift + noise`` with a random
    per-image contrast and per-channel shift. Labels cycle through the classes,
    so ``n`` divisible by ``classes`` gives a balanced split.
    """
    if n < classes:
        raise ConfigError(f"synth_dataset: n={n} must be >= classes={classes}")
    n_test = max(classes, n // 4) if n_test is None else n_test
    rng = np.random.default_rng(seed)
    patterns = _class_patterns(rng, classes, image_size, amplitude)

    def make(count, split):
        labels = np.arange(count, dtype=np.int64) % classes
        labels = labels[rng.permutation(count)]
        contrast = rng.uniform(0.5, 1.5, count)[:, None, None, None]
        shift = rng.normal(0.0, 0.3, (count, 3, 1, 1))
        x = contrast * patterns[labels] + shift + rng.normal(0.0, noise, (count, 3, image_size, image_size))
        return DatasetSplit(x, labels, split, classes, shuffle_seed=seed)

    return make(n, "train"), make(n_test, "test")


def batches(n, batch_size, rng=None, drop_last=False):
    """Index arrays for one epoch; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for lo in range(0, stop, batch_size):
        yield order[lo : lo + batch_size]
