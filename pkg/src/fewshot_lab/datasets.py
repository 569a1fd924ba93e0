"""Class-labelled vector datasets, meta-splits and the merged training task."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import InvalidInputError, SeededRng


class FormatError(ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LabeledVectorDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise InvalidInputError(f"features {feats.shape} and labels {labels.shape} disagree")
        if not np.all(np.isfinite(feats)):
            raise InvalidInputError("features contain non-finite values")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidInputError("label outside [0, num_classes)")
        counts = np.bincount(labels, minlength=self.num_classes)
        if np.any(counts == 0):
            raise InvalidInputError(f"class {int(np.argmin(counts))} has no samples")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def indices_by_class(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(self.class_counts())[:-1]
        return np.split(order, bounds)


@dataclass(frozen=True)
class MetaSplit:
    train_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def __post_init__(self):
        for name in ("train_classes", "val_classes", "test_classes"):
            object.__setattr__(self, name, tuple(sorted(int(c) for c in getattr(self, name))))
        a, b, c = map(set, (self.train_classes, self.val_classes, self.test_classes))
        if a & b or a & c or b & c:
            raise InvalidInputError("meta-split class sets overlap")
        if not (a and b and c):
            raise InvalidInputError("every meta-split set needs at least one class")

    def classes(self, which: str) -> tuple[int, ...]:
        try:
            return {"train": self.train_classes, "val": self.val_classes,
                    "test": self.test_classes}[which]
        except KeyError:
            raise InvalidInputError(f"unknown split {which!r}") from None

    def validate_for(self, dataset: LabeledVectorDataset) -> None:
        every = self.train_classes + self.val_classes + self.test_classes
        if max(every) >= dataset.num_classes or min(every) < 0:
            raise InvalidInputError("meta-split references classes absent from the dataset")


@dataclass(frozen=True)
class MergedTask:
    features: np.ndarray
    labels: np.ndarray
    label_map: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def original_class(self, merged_label: int) -> int:
        inverse = {v: k for k, v in self.label_map.items()}
        return inverse[int(merged_label)]


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 100
    dim: int = 32
    samples_per_class: int = 60
    between_class_sigma: float = 1.0
    within_class_sigma: float = 1.0

    def __post_init__(self):
        if min(self.num_classes, self.dim, self.samples_per_class) < 1:
            raise InvalidInputError("synthetic counts must be >= 1")
        if self.between_class_sigma <= 0 or self.within_class_sigma <= 0:
            raise InvalidInputError("synthetic sigmas must be > 0")


def generate_synthetic(spec: SyntheticSpec, seed: int) -> LabeledVectorDataset:
    """Isotropic Gaussian classes: mean ~ N(0, sb^2 I), sample ~ N(mean, sw^2 I)."""
    rng = SeededRng(seed)
    means = rng.child("means").normal((spec.num_classes, spec.dim), spec.between_class_sigma)
    noise = rng.child("samples").normal(
        (spec.num_classes, spec.samples_per_class, spec.dim), spec.within_class_sigma)
    feats = (means[:, None, :] + noise).reshape(-1, spec.dim)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    return LabeledVectorDataset(feats, labels, spec.num_classes)


def make_meta_split(dataset: LabeledVectorDataset, fractions=(0.64, 0.16, 0.20),
                    seed: int = 0) -> MetaSplit:
    """Shuffle class ids by ``seed`` and cut them into train/val/test.

    Train and val get ``floor(fraction * C)`` classes (at least one each) and
    test takes the remainder; if that leaves test empty, train gives one up.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise InvalidInputError(f"fractions must be three positive reals summing to 1, got {fractions}")
    c = dataset.num_classes
    if c < 3:
        raise InvalidInputError(f"need at least 3 classes for a meta-split, have {c}")
    # the epsilon keeps 0.16 * 100 from flooring to 15
    n_train = max(1, int(np.floor(fr[0] * c + 1e-9)))
    n_val = max(1, int(np.floor(fr[1] * c + 1e-9)))
    if n_train + n_val >= c:
        n_train = c - n_val - 1
    if n_train < 1:
        raise InvalidInputError(f"{c} classes are too few for fractions {fractions}")
    order = SeededRng(seed).permutation(c)
    return MetaSplit(tuple(order[:n_train]), tuple(order[n_train:n_train + n_val]),
                     tuple(order[n_train + n_val:]))


def merge_meta_train(dataset: LabeledVectorDataset, split: MetaSplit) -> MergedTask:
    if not split.train_classes:
        raise InvalidInputError("no meta-training classes to merge")
    split.validate_for(dataset)
    label_map = {c: i for i, c in enumerate(sorted(split.train_classes))}
    lookup = np.full(dataset.num_classes, -1, dtype=np.int64)
    for c, i in label_map.items():
        lookup[c] = i
    new_labels = lookup[dataset.labels]
    keep = new_labels >= 0
    feats = dataset.features[keep]
    labels = new_labels[keep]
    feats.setflags(write=False)
    labels.setflags(write=False)
    return MergedTask(feats, labels, label_map)


# --------------------------------------------------------------------------
# FSD1 / FSE1 files: magic, u32 version=1, u32 n, u32 d, u32 num_classes,
# then n records of [u32 label, d x f32]


_HEADER = struct.Struct("<4sIIII")


def write_labeled_vectors(path, magic: bytes, features: np.ndarray, labels: np.ndarray,
                          num_classes: int) -> None:
    n, d = features.shape
    rec = np.zeros(n, dtype=np.dtype([("label", "<u4"), ("x", "<f4", (d,))]))
    rec["label"] = labels
    rec["x"] = features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, 1, n, d, num_classes))
        fh.write(rec.tobytes())


def read_labeled_vectors(path, magic: bytes) -> tuple[np.ndarray, np.ndarray, int]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != magic:
        raise FormatError(f"bad magic, expected {magic.decode()}", 0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    _, version, n, d, num_classes = _HEADER.unpack_from(data)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    rec_size = 4 + 4 * d
    have = len(data) - _HEADER.size
    if have < n * rec_size:
        full = have // rec_size
        raise FormatError(f"truncated payload: header declares {n} records, found {full}",
                          _HEADER.size + full * rec_size)
    rec = np.frombuffer(data, dtype=np.dtype([("label", "<u4"), ("x", "<f4", (d,))]),
                        count=n, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {labels[i]} >= num_classes {num_classes}",
                          _HEADER.size + i * rec_size)
    return rec["x"].astype(np.float64).reshape(n, d), labels, num_classes


def save_dataset(dataset: LabeledVectorDataset, path) -> None:
    write_labeled_vectors(path, b"FSD1", dataset.features, dataset.labels, dataset.num_classes)


def load_dataset(path) -> LabeledVectorDataset:
    feats, labels, c = read_labeled_vectors(path, b"FSD1")
    return LabeledVectorDataset(feats, labels, c)
