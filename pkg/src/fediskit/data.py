"""Datasets: IDX loading, synthetic generation, client partitioning, proxy extraction.

Feature vectors are float64 and normalized to [0, 1] for image data, so
distance thresholds live on a stable scale across datasets.  All operations
are pure functions of (inputs, seed); returned arrays are read-only.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataMismatchError, IdxFormatError, InfeasibleError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

STRONG_NONIID = "strong_noniid"
WEAK_NONIID = "weak_noniid"
IID = "iid"
SCHEMES = (STRONG_NONIID, WEAK_NONIID, IID)

# Attempts at drawing weak non-IID label assignments that cover every label.
_WEAK_ASSIGNMENT_ATTEMPTS = 10_000


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """One feature vector with its integer class label."""

    features: np.ndarray
    label: int


class Dataset:
    """A feature matrix (n, d) with integer labels (n,)."""

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        features = np.array(features, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise DataMismatchError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        if features.size and not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        self.features = _frozen(features)
        self.labels = _frozen(labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.features[i], int(self.labels[i]))

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def label_set(self) -> frozenset[int]:
        return frozenset(int(v) for v in np.unique(self.labels))

    @property
    def num_classes(self) -> int:
        """Label ids are assumed dense in [0, L)."""
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """A client's private data."""

    client_id: int
    data: Dataset

    def __post_init__(self):
        if len(self.data) == 0:
            raise InfeasibleError(f"client {self.client_id} received no samples")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def features(self) -> np.ndarray:
        return self.data.features

    @property
    def labels(self) -> np.ndarray:
        return self.data.labels

    @property
    def label_set(self) -> frozenset[int]:
        return self.data.label_set


class ProxyDataset:
    """Pooled proxy samples with per-client provenance.

    The protocol layer may read only ``features``.  True labels are kept for
    filter-quality diagnostics and are exposed solely through
    :meth:`diagnostic_labels`, which no protocol code path calls.
    """

    def __init__(self, features: np.ndarray,
                 hidden_labels: np.ndarray,
                 contributions: dict[int, np.ndarray]):
        features = np.array(features, dtype=np.float64)
        hidden_labels = np.array(hidden_labels, dtype=np.int64)
        if features.shape[0] != hidden_labels.shape[0]:
            raise DataMismatchError("proxy features/labels length mismatch")
        total = features.shape[0]
        seen = np.concatenate([np.asarray(v, dtype=np.int64) for v in contributions.values()]) \
            if contributions else np.empty(0, dtype=np.int64)
        if len(seen) != total or (total and not np.array_equal(np.sort(seen), np.arange(total))):
            raise DataMismatchError("contributions must partition the proxy index range")
        self.features = _frozen(features)
        self._labels = _frozen(hidden_labels)
        self.contributions = {
            int(c): _frozen(np.array(v, dtype=np.int64)) for c, v in contributions.items()
        }

    def __len__(self) -> int:
        return self.features.shape[0]

    def diagnostic_labels(self) -> np.ndarray:
        """True labels of the proxy samples.  Diagnostics only — never protocol."""
        return self._labels


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients."""

    scheme: str
    num_clients: int
    labels_per_client: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.labels_per_client < 1:
            raise ValueError("labels_per_client must be >= 1")


def _read_idx_header(raw: bytes, path: str, expected_magic: int, expected_dims: int):
    if len(raw) < 4 * (1 + expected_dims):
        raise IdxFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{expected_dims}I", raw[4:4 + 4 * expected_dims])
    return dims, raw[4 + 4 * expected_dims:]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label file pair (the MNIST family format).

    Pixel bytes are scaled to [0, 1] and images flattened to d = rows*cols.
    """
    with open(images_path, "rb") as f:
        img_raw = f.read()
    with open(labels_path, "rb") as f:
        lab_raw = f.read()
    (n_img, rows, cols), img_body = _read_idx_header(
        img_raw, images_path, IDX_IMAGE_MAGIC, 3)
    (n_lab,), lab_body = _read_idx_header(lab_raw, labels_path, IDX_LABEL_MAGIC, 1)
    if n_img != n_lab:
        raise DataMismatchError(
            f"{n_img} images in {images_path} but {n_lab} labels in {labels_path}")
    d = rows * cols
    if len(img_body) < n_img * d:
        raise IdxFormatError(f"{images_path}: expected {n_img * d} pixel bytes")
    if len(lab_body) < n_lab:
        raise IdxFormatError(f"{labels_path}: expected {n_lab} label bytes")
    pixels = np.frombuffer(img_body, dtype=np.uint8, count=n_img * d)
    features = pixels.reshape(n_img, d).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_body, dtype=np.uint8, count=n_lab).astype(np.int64)
    return Dataset(features, labels)


def load_digits_dataset() -> Dataset:
    """The bundled 8x8 handwritten-digits corpus (1797 samples, 10 classes).

    Features are rescaled from the 0..16 ink scale to [0, 1].
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    return Dataset(raw.data / 16.0, raw.target)


def gen_gaussian_mixture(num_classes: int, per_class: int, dim: int,
                         class_means: np.ndarray, stddev: float,
                         seed: int) -> Dataset:
    """Isotropic Gaussian blobs, one per class; ground truth for ID/OOD tests."""
    if stddev <= 0:
        raise ValueError("stddev must be positive")
    means = np.asarray(class_means, dtype=np.float64)
    if means.shape != (num_classes, dim):
        raise ValueError(f"class_means must have shape ({num_classes}, {dim})")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((num_classes * per_class, dim))
    return Dataset(means[labels] + stddev * noise, labels)


def _deal_round_robin(indices: np.ndarray, owners: list[int], offset: int,
                      out: list[list[int]]) -> None:
    # Shares of `indices` across `owners` differ by at most one sample.
    for i, idx in enumerate(indices):
        out[owners[(offset + i) % len(owners)]].append(int(idx))


def _assign_weak_labels(num_labels: int, spec: PartitionSpec,
                        rng: np.random.Generator) -> list[np.ndarray]:
    # Independent per-client label draws, redrawn until every label is owned
    # by someone so that no sample is orphaned.
    if spec.num_clients * spec.labels_per_client < num_labels:
        raise InfeasibleError(
            f"{spec.num_clients} clients x {spec.labels_per_client} labels "
            f"cannot cover {num_labels} labels")
    for _ in range(_WEAK_ASSIGNMENT_ATTEMPTS):
        picks = [rng.choice(num_labels, size=spec.labels_per_client, replace=False)
                 for _ in range(spec.num_clients)]
        if len(np.unique(np.concatenate(picks))) == num_labels:
            return picks
    raise InfeasibleError("could not draw a label assignment covering all labels")


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Split a dataset into per-client private datasets.

    strong_noniid: clients own pairwise-disjoint label groups and receive
    every sample of their labels.  weak_noniid: each client draws
    ``labels_per_client`` labels (overlaps allowed); each label's samples are
    split evenly among its owners.  iid: per-label round-robin deal, so every
    client's label histogram is within one sample of uniform.
    """
    labels_present = sorted(dataset.label_set)
    num_labels = len(labels_present)
    if num_labels == 0:
        raise InfeasibleError("cannot partition an empty dataset")
    rng = np.random.default_rng(spec.seed)
    per_client: list[list[int]] = [[] for _ in range(spec.num_clients)]

    if spec.scheme == STRONG_NONIID:
        if spec.num_clients > num_labels:
            raise InfeasibleError(
                f"strong non-IID needs num_clients <= {num_labels} labels, "
                f"got {spec.num_clients}")
        order = rng.permutation(num_labels)
        for pos, lab_idx in enumerate(order):
            lab = labels_present[lab_idx]
            owner = pos % spec.num_clients
            per_client[owner].extend(np.flatnonzero(dataset.labels == lab).tolist())
    elif spec.scheme == WEAK_NONIID:
        if spec.labels_per_client > num_labels:
            raise InfeasibleError(
                f"labels_per_client={spec.labels_per_client} exceeds "
                f"{num_labels} available labels")
        picks = _assign_weak_labels(num_labels, spec, rng)
        owners_of = {lab_idx: sorted(c for c, p in enumerate(picks) if lab_idx in p)
                     for lab_idx in range(num_labels)}
        for lab_idx in range(num_labels):
            lab = labels_present[lab_idx]
            idx = rng.permutation(np.flatnonzero(dataset.labels == lab))
            _deal_round_robin(idx, owners_of[lab_idx], lab_idx, per_client)
    else:  # IID
        for lab_idx, lab in enumerate(labels_present):
            idx = rng.permutation(np.flatnonzero(dataset.labels == lab))
            _deal_round_robin(idx, list(range(spec.num_clients)), lab_idx, per_client)

    clients = []
    for cid, idx_list in enumerate(per_client):
        idx = np.sort(np.array(idx_list, dtype=np.int64))
        if idx.size == 0:
            raise InfeasibleError(f"client {cid} received no samples")
        clients.append(ClientDataset(
            cid, Dataset(dataset.features[idx], dataset.labels[idx])))
    return clients


def extract_proxy(clients: list[ClientDataset], alpha: float,
                  seed: int) -> tuple[ProxyDataset, list[ClientDataset]]:
    """Pool a fraction alpha of every client's data into the shared proxy set.

    Each client donates ceil(alpha * n) samples drawn uniformly without
    replacement.  Donations are copies: the samples remain in the donor's
    private set.  Global proxy indices run in client order, then donation
    order.  Returns the proxy pool and the (unchanged) clients.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    feats, labs, contributions = [], [], {}
    start = 0
    for client in clients:
        k = math.ceil(alpha * len(client))
        donated = rng.choice(len(client), size=k, replace=False)
        feats.append(client.features[donated])
        labs.append(client.labels[donated])
        contributions[client.client_id] = np.arange(start, start + k, dtype=np.int64)
        start += k
    proxy = ProxyDataset(np.concatenate(feats), np.concatenate(labs), contributions)
    return proxy, clients


def train_test_split(dataset: Dataset, test_fraction: float,
                     seed: int) -> tuple[Dataset, Dataset]:
    """Per-label stratified split; the test side stays class-balanced."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_idx = []
    for lab in sorted(dataset.label_set):
        idx = rng.permutation(np.flatnonzero(dataset.labels == lab))
        n_test = max(1, int(round(test_fraction * idx.size)))
        test_idx.extend(idx[:n_test].tolist())
    mask = np.zeros(len(dataset), dtype=bool)
    mask[test_idx] = True
    train = Dataset(dataset.features[~mask], dataset.labels[~mask])
    test = Dataset(dataset.features[mask], dataset.labels[mask])
    return train, test
