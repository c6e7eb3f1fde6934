"""Datasets with stable sample ids, content fingerprints, unlearn-set
selection and backdoor poisoning."""

from __future__ import annotations

import csv
import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import keyed_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

BLOB_CENTER_SCALE = 2.0


class UnknownSampleError(KeyError):
    pass


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled sample table.

    Rows are kept sorted by ``ids``; constructing from a permuted table
    yields the same object (and the same fingerprint).
    """

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    fingerprint: bytes = field(init=False, repr=False)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, copy=True)
        ids = np.array(self.ids, copy=True)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"features must be a non-empty n x d matrix, got shape {x.shape}")
        n = x.shape[0]
        if y.shape != (n,) or ids.shape != (n,):
            raise ValueError("labels and ids must be vectors of length n")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if np.issubdtype(ids.dtype, np.signedinteger) and np.any(ids < 0):
            raise ValueError("ids must be non-negative")
        ids = ids.astype(np.uint64)
        k = int(self.num_classes)
        if k < 2:
            raise ValueError(f"num_classes must be >= 2, got {k}")
        if np.any(y < 0) or np.any(y >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        order = np.argsort(ids, kind="stable")
        x, y, ids = x[order], y[order], ids[order]
        if n > 1 and np.any(ids[1:] == ids[:-1]):
            raise ValueError("sample ids must be unique")
        object.__setattr__(self, "features", _readonly(np.ascontiguousarray(x)))
        object.__setattr__(self, "labels", _readonly(y))
        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "num_classes", k)
        object.__setattr__(self, "fingerprint", fingerprint(self))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def rows(self, ids) -> np.ndarray:
        """Row positions of ``ids`` (in the given order)."""
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        pos = np.searchsorted(self.ids, ids)
        pos = np.minimum(pos, self.n - 1)
        bad = self.ids[pos] != ids
        if np.any(bad):
            raise UnknownSampleError(f"unknown sample id {int(ids[np.argmax(bad)])}")
        return pos

    def contains(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        pos = np.minimum(np.searchsorted(self.ids, ids), self.n - 1)
        return self.ids[pos] == ids

    def take(self, ids):
        """Features and labels for ``ids``, ordered by ascending id.

        Duplicated ids are kept (stable order). The ascending-id order is
        what makes batch gradients independent of batch listing order.
        """
        ids = np.sort(np.asarray(ids, dtype=np.uint64).reshape(-1), kind="stable")
        pos = self.rows(ids)
        return self.features[pos], self.labels[pos]

    def subset(self, ids) -> "Dataset":
        pos = self.rows(np.unique(np.asarray(ids, dtype=np.uint64)))
        return Dataset(self.features[pos], self.labels[pos], self.ids[pos], self.num_classes)

    def retained_ids(self, unlearn_ids) -> np.ndarray:
        return self.ids[~np.isin(self.ids, np.asarray(unlearn_ids, dtype=np.uint64))]

    @cached_property
    def sample_hashes(self) -> list:
        """SHA-256 of each row's content (label and features, not the id)."""
        out = []
        for label, row in zip(self.labels, self.features):
            h = hashlib.sha256(struct.pack("<Q", int(label)))
            h.update(row.astype("<f8").tobytes())
            out.append(h.digest())
        return out

    def content_hashes(self, ids) -> list:
        table = self.sample_hashes
        return [table[i] for i in self.rows(ids)]


def fingerprint(dataset) -> bytes:
    """SHA-256 over header (n, d, K) then (id, label, features) per sample in
    id order, all little-endian."""
    x = np.asarray(dataset.features, dtype=np.float64)
    n, d = x.shape
    order = np.argsort(np.asarray(dataset.ids), kind="stable")
    rec = np.empty(n, dtype=[("id", "<u8"), ("label", "<u8"), ("x", "<f8", (d,))])
    rec["id"] = np.asarray(dataset.ids, dtype=np.uint64)[order]
    rec["label"] = np.asarray(dataset.labels, dtype=np.uint64)[order]
    rec["x"] = x[order]
    h = hashlib.sha256(struct.pack("<QQQ", n, d, int(dataset.num_classes)))
    h.update(rec.tobytes())
    return h.digest()


def _infer_classes(labels, source):
    k = int(labels.max()) + 1
    present = np.unique(labels)
    if len(present) < k:
        missing = sorted(set(range(k)) - set(present.tolist()))
        warnings.warn(f"{source}: classes {missing} have no samples (num_classes inferred as {k})",
                      stacklevel=3)
    return max(k, 2)


def _parse_float(cell):
    try:
        return float(cell)
    except ValueError:
        return None


def load_csv(path, label_column=-1) -> Dataset:
    """Load a CSV table; the first row is treated as a header when any of its
    cells does not parse as a number. ``label_column`` is a header name or a
    column index."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = None
    first_line = 1
    if any(_parse_float(c) is None for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_line = 2
        if not rows:
            raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not found in header")
        label_idx = header.index(label_column)
    else:
        label_idx = int(label_column) % width
    if width < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")

    feats = np.empty((len(rows), width - 1))
    labels = np.empty(len(rows), dtype=np.int64)
    for r, row in enumerate(rows):
        line = first_line + r
        if len(row) != width:
            raise ValueError(f"{path}: row {line} has {len(row)} columns, expected {width}")
        j = 0
        for c, cell in enumerate(row):
            if c == label_idx:
                try:
                    lab = int(cell.strip())
                except ValueError:
                    raise ValueError(f"{path}: row {line}, column {c}: bad label {cell!r}") from None
                if lab < 0:
                    raise ValueError(f"{path}: row {line}, column {c}: negative label {lab}")
                labels[r] = lab
                continue
            v = _parse_float(cell)
            if v is None:
                raise ValueError(f"{path}: row {line}, column {c}: cannot parse {cell!r}")
            if not math.isfinite(v):
                raise ValueError(f"{path}: row {line}, column {c}: non-finite value {cell.strip()!r}")
            feats[r, j] = v
            j += 1
    k = _infer_classes(labels, path.name)
    return Dataset(feats, labels, np.arange(len(rows), dtype=np.uint64), k)


def _read_idx(path, magic, ndim):
    data = Path(path).read_bytes()
    head = 4 + 4 * ndim
    if len(data) < head:
        raise ValueError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise ValueError(f"{path}: magic mismatch (expected {magic:#010x}, got {got:#010x})")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    size = int(np.prod(dims))
    if len(data) - head < size:
        raise ValueError(f"{path}: truncated IDX body ({len(data) - head} of {size} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-style IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    n = images.shape[0]
    x = images.reshape(n, -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    k = _infer_classes(y, Path(labels_path).name)
    return Dataset(x, y, np.arange(n, dtype=np.uint64), k)


def gen_blobs(num_classes, dim, per_class, spread, seed) -> Dataset:
    """Gaussian blobs; class ``c`` is centred at ``BLOB_CENTER_SCALE * e_c``."""
    if num_classes < 2 or per_class < 1 or not spread > 0:
        raise ValueError("need num_classes >= 2, per_class >= 1 and spread > 0")
    if dim < num_classes:
        raise ValueError(f"dim ({dim}) must be >= num_classes ({num_classes})")
    centers = BLOB_CENTER_SCALE * np.eye(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = keyed_rng(seed, "blobs").standard_normal((labels.size, dim))
    x = centers[labels] + spread * noise
    return Dataset(x, labels, np.arange(labels.size, dtype=np.uint64), num_classes)


def split_random(dataset, fraction, seed) -> np.ndarray:
    """Uniformly choose ``round(fraction * n)`` ids without replacement."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    count = math.floor(fraction * dataset.n + 0.5)
    if count <= 0 or count >= dataset.n:
        raise ValueError(f"fraction {fraction} selects {count} of {dataset.n} samples")
    rng = keyed_rng(seed, "split-random", dataset.fingerprint)
    pick = rng.choice(dataset.n, size=count, replace=False)
    return np.sort(dataset.ids[pick])


def largest_remainder(weights, total) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``; leftover
    units go to the largest fractional parts, ties to the lowest index."""
    w = np.asarray(weights, dtype=np.float64)
    quota = w / w.sum() * total
    counts = np.floor(quota).astype(np.int64)
    left = total - int(counts.sum())
    if left > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:left]] += 1
    return counts


def dirichlet_partition(dataset, alpha, pieces, seed):
    """Class-wise Dirichlet partition of the dataset ids.

    Returns ``(parts, proportions)`` where ``parts[i]`` is the sorted id
    array of piece ``i`` and ``proportions[c]`` the Dirichlet draw of class c.
    """
    if not alpha > 0 or pieces < 2:
        raise ValueError("need alpha > 0 and pieces >= 2")
    rng = keyed_rng(seed, "split-dirichlet", dataset.fingerprint)
    parts = [[] for _ in range(pieces)]
    props = np.zeros((dataset.num_classes, pieces))
    for c in range(dataset.num_classes):
        q = rng.dirichlet(np.full(pieces, float(alpha)))
        props[c] = q
        members = dataset.ids[dataset.labels == c]
        members = members[rng.permutation(members.size)]
        counts = largest_remainder(q, members.size)
        start = 0
        for i, cnt in enumerate(counts):
            parts[i].append(members[start:start + cnt])
            start += cnt
    parts = [np.sort(np.concatenate(p)).astype(np.uint64) for p in parts]
    return parts, props


def split_dirichlet(dataset, alpha, pieces, piece_index, seed) -> np.ndarray:
    if not 0 <= piece_index < pieces:
        raise ValueError(f"piece_index must be in [0, {pieces})")
    parts, _ = dirichlet_partition(dataset, alpha, pieces, seed)
    if parts[piece_index].size == 0:
        raise ValueError(f"Dirichlet piece {piece_index} is empty")
    return parts[piece_index]


@dataclass(frozen=True)
class BackdoorSpec:
    trigger_indices: Sequence[int]
    target_label: int
    alternate_trigger_indices: Sequence[int]
    alternate_label: int
    trigger_value: float = 1.0
    poison_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "trigger_indices", tuple(int(i) for i in self.trigger_indices))
        object.__setattr__(self, "alternate_trigger_indices",
                           tuple(int(i) for i in self.alternate_trigger_indices))
        if set(self.trigger_indices) & set(self.alternate_trigger_indices):
            raise ValueError("primary and alternate trigger coordinates must be disjoint")
        if self.target_label == self.alternate_label:
            raise ValueError("target and alternate labels must differ")
        if not 0 < self.poison_fraction <= 1:
            raise ValueError("poison_fraction must be in (0, 1]")

    def check(self, dim, num_classes):
        for i in self.trigger_indices + self.alternate_trigger_indices:
            if not 0 <= i < dim:
                raise ValueError(f"trigger index {i} out of range for dim {dim}")
        for lab in (self.target_label, self.alternate_label):
            if not 0 <= lab < num_classes:
                raise ValueError(f"label {lab} out of range for {num_classes} classes")


def apply_trigger(features, indices, value):
    x = np.array(features, dtype=np.float64, copy=True)
    if len(indices):
        x[:, list(indices)] = value
    return x


def inject_backdoor(dataset, spec: BackdoorSpec, unlearn_ids, seed):
    """Stamp the primary trigger onto a random share of ``unlearn_ids`` and
    relabel those samples to ``spec.target_label``.

    Returns ``(poisoned_dataset, poisoned_ids)``; the input is not modified.
    """
    spec.check(dataset.dim, dataset.num_classes)
    pool = np.unique(np.asarray(unlearn_ids, dtype=np.uint64))
    if pool.size == 0:
        raise ValueError("unlearn set is empty")
    count = max(1, math.floor(spec.poison_fraction * pool.size + 0.5))
    rng = keyed_rng(seed, "backdoor", dataset.fingerprint)
    chosen = np.sort(pool[rng.choice(pool.size, size=count, replace=False)])
    rows = dataset.rows(chosen)
    x = np.array(dataset.features)
    y = np.array(dataset.labels)
    if spec.trigger_indices:
        x[np.ix_(rows, list(spec.trigger_indices))] = spec.trigger_value
    y[rows] = spec.target_label
    return Dataset(x, y, dataset.ids, dataset.num_classes), chosen
