"""Datasets: MNIST IDX files, normalization and synthetic Gaussian blobs."""
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_ITEMS = 2 ** 31 - 1

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class DimensionOverflowError(IdxError):
    pass


class LabelRangeError(IdxError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    n_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel rates must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        if n is None or n >= len(self):
            return self
        return LabeledDataset(self.images[:n], self.labels[:n], self.name, self.n_classes)


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndim, path):
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, too short for a magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = 1
    for d in dims:
        n *= d
    if n > MAX_ITEMS:
        raise DimensionOverflowError(f"{path}: dimensions {dims} describe {n} bytes")
    if len(raw) - header < n:
        raise TruncatedFileError(f"{path}: expected {n} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx_images(path):
    """Raw ``(count, rows, cols)`` uint8 array from an IDX3 image file (optionally gzipped)."""
    return _parse_idx(_read_bytes(path), IMAGE_MAGIC, 3, path)


def load_idx_labels(path, n_classes=10):
    labels = _parse_idx(_read_bytes(path), LABEL_MAGIC, 1, path)
    if labels.size and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise LabelRangeError(f"{path}: label {labels[bad]} at index {bad} is out of range")
    return labels


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def normalize(raw):
    """Bytes 0..255 to rates in [0, 1], flattened row-major per image."""
    raw = np.asarray(raw)
    return raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0


def load_mnist(root, split="train"):
    images_file, labels_file = MNIST_FILES[split]
    images = load_idx_images(_find(root, images_file))
    labels = load_idx_labels(_find(root, labels_file))
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return LabeledDataset(normalize(images), labels.astype(np.int64), f"mnist-{split}")


def _find(root, name):
    for candidate in (name, name + ".gz"):
        path = os.path.join(root, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{name}[.gz] not found in {root}")


def synth_blobs(classes=3, per_class=100, dim=2, separation=0.5, seed=0, spread=None,
                max_tries=10_000):
    """Isotropic Gaussian clusters in the unit cube, one per class.

    Centers are drawn uniformly with rejection until every pair is at least
    ``separation`` apart; samples are clipped to ``[0, 1]^dim``. ``spread``
    (the per-axis standard deviation) defaults to ``separation / 8``.
    """
    if not separation > 0:
        raise ValueError("separation must be positive")
    if per_class < 1 or classes < 1:
        raise ValueError("need at least one example per class")
    if classes > 1 and separation > np.sqrt(dim):
        raise ValueError(f"separation {separation} exceeds the diameter of [0,1]^{dim}")
    spread = separation / 8.0 if spread is None else spread
    rng = np.random.default_rng(seed)
    centers = []
    tries = 0
    while len(centers) < classes:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {classes} centers {separation} apart in [0,1]^{dim}")
        c = rng.uniform(0, 1, size=dim)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
    centers = np.array(centers)
    labels = np.repeat(np.arange(classes), per_class)
    images = np.clip(centers[labels] + spread * rng.standard_normal((len(labels), dim)), 0.0, 1.0)
    return LabeledDataset(images, labels, f"blobs-{classes}x{per_class}-s{seed}", n_classes=classes)


def blob_centers(dataset):
    """Per-class mean of the inputs."""
    return np.array([dataset.images[dataset.labels == c].mean(axis=0) for c in range(dataset.n_classes)])


def nearest_centroid_error(train, test=None):
    test = train if test is None else test
    centers = blob_centers(train)
    d = ((test.images[:, None, :] - centers[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) != test.labels))
