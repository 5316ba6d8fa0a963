"""Datasets and non-IID client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class IdxFormatError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ClientSplit:
    train: np.ndarray
    test: np.ndarray
    conformal: np.ndarray


def dirichlet_partition(labels, n_clients: int, alpha: float, rng: np.random.Generator,
                        min_per_client: int = 10, max_attempts: int = 1000) -> list[np.ndarray]:
    """Allocate each class across clients with Dirichlet(alpha) proportions.

    The whole allocation is redrawn until every client holds at least
    ``min_per_client`` samples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n_clients < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if n_clients * min_per_client > n:
        raise ValueError(
            f"cannot give {n_clients} clients {min_per_client} samples each from {n} samples"
        )
    classes = np.unique(labels)
    by_class = [np.flatnonzero(labels == c) for c in classes]
    for _ in range(max_attempts):
        parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for idx in by_class:
            idx = rng.permutation(idx)
            g = rng.gamma(alpha, 1.0, size=n_clients)
            total = g.sum()
            props = g / total if total > 0 else np.full(n_clients, 1.0 / n_clients)
            cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(p) for p in out) >= min_per_client:
            return out
    raise ValueError(
        f"no allocation with >= {min_per_client} samples per client after {max_attempts} draws "
        f"(alpha={alpha}, clients={n_clients}, samples={n})"
    )


def split_721(indices, rng: np.random.Generator) -> ClientSplit:
    idx = np.asarray(indices, dtype=np.int64)
    n = idx.shape[0]
    if n < 10:
        raise ValueError(f"7:2:1 split needs at least 10 indices, got {n}")
    idx = rng.permutation(idx)
    n_train = (7 * n) // 10
    n_test = (2 * n) // 10
    return ClientSplit(idx[:n_train], idx[n_train : n_train + n_test], idx[n_train + n_test :])


def synth_gaussian(n_classes: int, dim: int, n_per_class: int, spread: float, seed: int,
                   noise: float = 1.0, clusters_per_class: int = 1) -> Dataset:
    """Isotropic Gaussian blobs around random unit directions scaled by ``spread``.

    With ``clusters_per_class > 1`` each class is an equal mixture of that many
    blobs, which makes the classes non-linearly separable.
    """
    if n_classes < 2 or dim < 2 or n_per_class < 1 or clusters_per_class < 1:
        raise ValueError("need n_classes >= 2, dim >= 2, n_per_class >= 1, clusters_per_class >= 1")
    if spread < 0 or noise < 0:
        raise ValueError("spread and noise must be >= 0")
    rng = np.random.default_rng(seed)
    n_centres = n_classes * clusters_per_class
    directions = rng.standard_normal((n_centres, dim))
    if dim >= n_centres:
        q, _ = np.linalg.qr(directions.T)
        directions = q.T[:n_centres]
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = spread * directions
    labels = np.repeat(np.arange(n_classes), n_per_class)
    centre = labels
    if clusters_per_class > 1:
        centre = labels * clusters_per_class + rng.integers(clusters_per_class, size=labels.shape[0])
    X = means[centre] + noise * rng.standard_normal((labels.shape[0], dim))
    order = rng.permutation(labels.shape[0])
    return Dataset(X[order], labels[order], n_classes)


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: missing magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    need = int(np.prod(shape))
    if len(body) < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(body)}")
    return shape, body[:need]


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Read an MNIST-style image/label IDX pair; pixels are scaled to [0, 1]."""
    img_shape, img_body = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    (n_labels,), lab_body = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if img_shape[0] != n_labels:
        raise IdxCountMismatchError(f"{img_shape[0]} images but {n_labels} labels")
    n, rows, cols = img_shape
    X = np.frombuffer(img_body, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lab_body, dtype=np.uint8).astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if n else 1
    return Dataset(X, y, n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_idx` for uint8 arrays of shape (n, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())
