"""Dataset ingestion: IDX files, synthetic Gaussian blobs, bundled digits.

Real MNIST is read from the standard big-endian IDX pair when the files are
available. The bundled fallback for image-scale experiments upscales the
8x8 handwritten digits that ship with scikit-learn to 28x28, which keeps
the pixel range, geometry, and class structure of MNIST-style inputs
without requiring any download.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArtifactMissingError, IdxFormatError, InvalidInputError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class LabeledDataset:
    """Inputs in [0, 1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise InvalidInputError("inputs and labels must have equal counts")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise InvalidInputError("inputs must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise InvalidInputError("labels must be non-negative class indices")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDataset(self.inputs[idx], self.labels[idx])


def load_idx(images_path, labels_path):
    """Parse an MNIST-style IDX image/label file pair."""
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image count {len(images)} != label count {len(labels)}")
    return LabeledDataset(images, labels)


def _read_exact(fh, count, path, offset):
    raw = fh.read(count)
    if len(raw) != count:
        raise IdxFormatError(
            f"{path}: truncated at byte {offset + len(raw)}",
            offset=offset + len(raw))
    return raw


def _read_idx_images(path):
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, path, 0)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{path}: bad image magic {magic} at byte 0", offset=0)
        raw = _read_exact(fh, count * rows * cols, path, 16)
    pixels = np.frombuffer(raw, dtype=np.uint8)
    return pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def _read_idx_labels(path):
    with open(path, "rb") as fh:
        header = _read_exact(fh, 8, path, 0)
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{path}: bad label magic {magic} at byte 0", offset=0)
        raw = _read_exact(fh, count, path, 8)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@dataclass
class BlobsTask:
    """Two-Gaussian dataset plus its ground-truth separating hyperplane.

    The optimal boundary is the perpendicular bisector of the class means:
    ``normal . x + offset = 0`` with positive side labeled 1.
    """

    dataset: LabeledDataset
    means: np.ndarray  # (2, dims)
    sigma: float
    normal: np.ndarray
    offset: float

    def margin(self, x):
        return float(np.dot(self.normal, np.ravel(x)) + self.offset)

    def distance_to_boundary(self, x):
        return abs(self.margin(x)) / float(np.linalg.norm(self.normal))

    @property
    def bayes_accuracy(self):
        from scipy.stats import norm as _norm
        half_gap = np.linalg.norm(self.means[1] - self.means[0]) / 2.0
        return float(_norm.cdf(half_gap / self.sigma))


def make_blobs(n, dims, separation, rng, box_span=0.5):
    """Two spherical Gaussian classes scaled into the unit box.

    ``separation`` is the mean gap in units of the cluster sigma; the
    absolute geometry is rescaled so samples stay inside [0, 1]^dims.
    """
    if separation <= 0:
        raise InvalidInputError("separation must be positive")
    direction = rng.standard_normal(dims)
    direction /= np.linalg.norm(direction)
    gap = box_span / np.sqrt(dims) if dims > 4 else box_span * 0.5
    sigma = gap / separation
    center = np.full(dims, 0.5)
    means = np.stack([center - direction * gap / 2.0,
                      center + direction * gap / 2.0])
    labels = rng.integers(0, 2, size=n)
    points = means[labels] + rng.standard_normal((n, dims)) * sigma
    points = np.clip(points, 0.0, 1.0)
    normal = means[1] - means[0]
    offset = -float(np.dot(normal, center))
    return BlobsTask(LabeledDataset(points, labels), means, sigma,
                     normal, offset)


def load_digits28():
    """Bundled 28x28 ten-class digit images in [0, 1], deterministic."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = raw.images / 16.0
    up = ndimage.zoom(imgs, (1.0, 3.5, 3.5), order=1, mode="nearest")
    up = np.clip(up, 0.0, 1.0)
    return LabeledDataset(up[:, None, :, :], raw.target)


def split_dataset(data, test_fraction, rng):
    """Deterministic shuffled train/test split."""
    n = len(data)
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return data.subset(order[n_test:]), data.subset(order[:n_test])


def resolve_dataset(tag, data_dir=None):
    """Map a dataset tag to (train, test) splits plus image shape.

    ``mnist`` requires the four standard IDX files under ``data_dir``;
    ``digits`` is the bundled 28x28 fallback; ``blobs`` is handled by the
    caller through :func:`make_blobs`.
    """
    if tag == "mnist":
        root = Path(data_dir or ".")
        names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        paths = [root / n for n in names]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ArtifactMissingError(
                "mnist IDX files not found: " + ", ".join(missing)
                + " (pass --data-dir or use --dataset digits)")
        train = load_idx(paths[0], paths[1])
        test = load_idx(paths[2], paths[3])
        return train, test
    if tag == "digits":
        data = load_digits28()
        rng = np.random.default_rng(20240201)
        return split_dataset(data, 0.25, rng)
    raise InvalidInputError(f"unknown dataset tag {tag!r}")
