"""Datasets: MNIST IDX files, per-class subsets, a Gaussian toy, mean subtraction."""

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, ShapeError
from .numerics import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


@dataclass
class Dataset:
    """``images`` is (N, ...) float, ``labels`` (N,) int, ``index`` the source row of each sample."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidInputError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def take(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.index[idx])

    def astype(self, dtype):
        return replace(self, images=self.images.astype(dtype))


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip container ({exc})", field="gzip") from None
    return raw


def _header(raw, path, magic, ndim):
    need = 4 * (1 + ndim)
    if len(raw) < need:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)", field="header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}", field="magic")
    return struct.unpack(">" + "I" * ndim, raw[4:need]), need


def read_idx_images(path, expected_shape=(28, 28)):
    raw = _read_bytes(path)
    (n, rows, cols), off = _header(raw, path, IMAGE_MAGIC, 3)
    if expected_shape is not None and (rows, cols) != tuple(expected_shape):
        raise FormatError(f"{path}: image dims {rows}x{cols}, expected "
                          f"{expected_shape[0]}x{expected_shape[1]}", field="dims")
    size = n * rows * cols
    if len(raw) - off < size:
        raise FormatError(f"{path}: truncated pixel data ({len(raw) - off} of {size} bytes)", field="pixels")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=off).reshape(n, rows, cols)


def read_idx_labels(path):
    raw = _read_bytes(path)
    (n,), off = _header(raw, path, LABEL_MAGIC, 1)
    if len(raw) - off < n:
        raise FormatError(f"{path}: truncated label data ({len(raw) - off} of {n} bytes)", field="labels")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=off)


def load_mnist_idx(images_path, labels_path, expected_shape=(28, 28), class_count=10):
    """Load an IDX image/label pair (optionally gzipped) with pixels scaled to [0, 1].

    Images come back as (N, 1, rows, cols) float64.
    """
    images = read_idx_images(images_path, expected_shape)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels", field="count")
    if len(labels) and labels.max() >= class_count:
        raise FormatError(f"label {labels.max()} outside [0, {class_count})", field="labels")
    x = images.astype(np.float64)[:, None] / 255.0
    return Dataset(x, labels.astype(np.int64), class_count)


def write_idx(path, array):
    """Write a uint8 array as IDX (magic ``0x0803`` for 3-d, ``0x0801`` for 1-d).  ``.gz`` paths are gzipped."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    if a.ndim == 3:
        head = struct.pack(">IIII", IMAGE_MAGIC, *a.shape)
    elif a.ndim == 1:
        head = struct.pack(">II", LABEL_MAGIC, a.shape[0])
    else:
        raise ShapeError(f"IDX writer supports 1-d labels or 3-d images, got {a.ndim}-d")
    payload = head + a.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def subset_per_class(ds, per_class, seed):
    """Sample ``per_class`` items of every class without replacement, reproducibly per ``seed``.

    The result is ordered class by class; within a class the order is random.
    """
    if per_class < 1:
        raise InvalidInputError(f"per_class must be positive, got {per_class}")
    counts = np.bincount(ds.labels, minlength=ds.class_count)
    short = [c for c in range(ds.class_count) if counts[c] < per_class]
    if short:
        raise InvalidInputError(f"classes {short} have fewer than {per_class} samples")
    rng = Rng(seed)
    picks = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        order = rng.substream(c).permutation(len(members))
        picks.append(members[order[:per_class]])
    return ds.take(np.concatenate(picks))


def synthetic_two_gaussians(n_per_class, dim, separation, seed):
    """Two unit-covariance Gaussians centred at ``-/+ separation/2`` along the first axis."""
    if n_per_class < 1 or dim < 1 or separation < 0:
        raise InvalidInputError("need n_per_class >= 1, dim >= 1, separation >= 0")
    rng = Rng(seed)
    x = rng.normal((2 * n_per_class, dim))
    y = np.repeat([0, 1], n_per_class)
    x[:, 0] += np.where(y == 0, -0.5, 0.5) * separation
    return Dataset(x, y, 2)


def mean_subtract(train, others=()):
    """Subtract the per-feature mean of ``train`` from ``train`` and every dataset in ``others``."""
    mean = train.images.mean(axis=0)
    out = []
    for ds in others:
        if ds.sample_shape != train.sample_shape:
            raise ShapeError(f"sample shape {ds.sample_shape} does not match train {train.sample_shape}")
        out.append(replace(ds, images=ds.images - mean))
    return replace(train, images=train.images - mean), out, mean


@dataclass
class DatasetSpec:
    """Where a train/test pair comes from.

    ``kind="mnist_idx"`` reads the four IDX paths (relative paths resolve
    against ``base_dir`` in :func:`load_datasets`) and optionally keeps
    ``per_class`` training digits per class.  ``kind="synthetic"`` draws the
    two-Gaussian toy with independent train and test samples.
    """

    kind: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    per_class: int = 0
    subset_seed: int = 0
    n_per_class: int = 100
    test_per_class: int = 500
    dim: int = 2
    separation: float = 4.0
    seed: int = 0
    mean_subtract: bool = True

    def __post_init__(self):
        if self.kind not in ("mnist_idx", "synthetic"):
            raise InvalidInputError(f"dataset kind must be 'mnist_idx' or 'synthetic', got {self.kind!r}")
        if self.per_class < 0:
            raise InvalidInputError("per_class must be >= 0 (0 keeps every sample)")


def load_datasets(spec, base_dir=None):
    """Materialise ``(train, test)`` for ``spec``, mean-subtracted with the training mean if requested."""
    if spec.kind == "mnist_idx":
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        paths = [base / p for p in (spec.train_images, spec.train_labels, spec.test_images, spec.test_labels)]
        train = load_mnist_idx(paths[0], paths[1])
        test = load_mnist_idx(paths[2], paths[3])
        if spec.per_class:
            train = subset_per_class(train, spec.per_class, spec.subset_seed)
    else:
        train = synthetic_two_gaussians(spec.n_per_class, spec.dim, spec.separation, spec.seed)
        test = synthetic_two_gaussians(spec.test_per_class, spec.dim, spec.separation, spec.seed + 1)
    if spec.mean_subtract:
        train, (test,), _ = mean_subtract(train, [test])
    return train, test
