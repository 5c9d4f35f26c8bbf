"""Datasets: ingestion (CSV, IDX), splitting, standardization and synthetic blobs."""
from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Sample

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PROVENANCES = ("csv", "idx", "synthetic")


class DataFormatError(ValueError):
    """Malformed input file; the message carries the offending line or field."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    name: str = "dataset"
    provenance: str = "synthetic"
    class_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be an (n, d) matrix")
        if n < 1:
            raise ValueError("a dataset needs at least one sample")
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("labels and ids must have one entry per row")
        if n > 1 and not np.all(np.diff(self.ids) > 0):
            raise ValueError("ids must be strictly increasing")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], float(self.labels[i]), int(self.ids[i]))

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask_or_index, name: str | None = None) -> "Dataset":
        index = np.asarray(mask_or_index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        index = np.sort(index)
        return Dataset(self.features[index], self.labels[index], self.ids[index],
                       name or self.name, self.provenance, self.class_names)

    def drop(self, ids: Iterable[int]) -> "Dataset":
        """All rows whose id is not in ``ids``, in their original order."""
        gone = np.fromiter((int(i) for i in ids), dtype=np.int64)
        keep = ~np.isin(self.ids, gone)
        if not keep.any():
            raise ValueError("dropping these ids leaves an empty dataset")
        return self.subset(keep)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.ids):
            h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


@dataclass
class PlantedTruth:
    flipped_ids: set[int] = field(default_factory=set)
    original_labels: dict[int, int] = field(default_factory=dict)


# -- CSV ------------------------------------------------------------------

@dataclass
class CsvSchema:
    label_column: str = "label"
    feature_columns: Sequence[str] | None = None
    task: str = "classification"
    classes: Sequence[str] | None = None


def load_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Read a headered CSV. Labels may be integer indices or class names.

    Class names are mapped to indices in sorted order unless ``schema.classes``
    fixes the vocabulary, in which case unknown names are rejected.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file (no header)") from None
        if schema.label_column not in header:
            raise DataFormatError(f"{path}:1: no label column {schema.label_column!r} in header")
        label_pos = header.index(schema.label_column)
        if schema.feature_columns is None:
            feat_pos = [i for i, h in enumerate(header) if i != label_pos]
        else:
            missing = [c for c in schema.feature_columns if c not in header]
            if missing:
                raise DataFormatError(f"{path}:1: missing feature columns {missing}")
            feat_pos = [header.index(c) for c in schema.feature_columns]
        if not feat_pos:
            raise DataFormatError(f"{path}:1: no feature columns")

        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in feat_pos])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            raw_labels.append((lineno, row[label_pos].strip()))

    if not rows:
        raise DataFormatError(f"{path}: no data rows")

    class_names = None
    if schema.task == "regression":
        try:
            labels = [float(v) for _, v in raw_labels]
        except ValueError:
            raise DataFormatError(f"{path}: non-numeric regression target") from None
    else:
        labels, class_names = _encode_labels(path, raw_labels, schema.classes)

    n = len(rows)
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=np.float64),
                   np.arange(n), path.stem, "csv", class_names)


def _encode_labels(path, raw_labels, classes):
    if classes is not None:
        lookup = {c: i for i, c in enumerate(classes)}
        out = []
        for lineno, v in raw_labels:
            if v in lookup:
                out.append(lookup[v])
            elif v.isdigit() and int(v) < len(classes):
                out.append(int(v))
            else:
                raise DataFormatError(f"{path}:{lineno}: unknown label class {v!r}")
        return out, list(classes)
    if all(v.isdigit() for _, v in raw_labels):
        return [int(v) for _, v in raw_labels], None
    names = sorted({v for _, v in raw_labels})
    lookup = {c: i for i, c in enumerate(names)}
    return [lookup[v] for _, v in raw_labels], names


def save_csv(dataset: Dataset, path, label_column: str = "label",
             feature_names: Sequence[str] | None = None, regression: bool = False) -> None:
    names = list(feature_names or [f"x{i}" for i in range(dataset.input_dim)])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + [label_column])
        for row, lab in zip(dataset.features, dataset.labels):
            if regression:
                lab_s = repr(float(lab))
            elif dataset.class_names:
                lab_s = dataset.class_names[int(lab)]
            else:
                lab_s = str(int(lab))
            # repr() round-trips float64 exactly
            w.writerow([repr(float(v)) for v in row] + [lab_s])


# -- IDX ------------------------------------------------------------------

def _read_idx_header(buf: bytes, magic: int, path) -> tuple[list[int], int]:
    if len(buf) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = list(struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim]))
    return dims, 4 + 4 * ndim


def load_idx(image_path, label_path) -> Dataset:
    """Read an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1]."""
    img = Path(image_path).read_bytes()
    lab = Path(label_path).read_bytes()
    idims, ioff = _read_idx_header(img, IDX_IMAGES_MAGIC, image_path)
    ldims, loff = _read_idx_header(lab, IDX_LABELS_MAGIC, label_path)
    count, rows, cols = idims
    if ldims[0] != count:
        raise DataFormatError(f"image count {count} != label count {ldims[0]}")
    if count < 1:
        raise DataFormatError(f"{image_path}: no images")
    if len(img) - ioff != count * rows * cols or len(lab) - loff != count:
        raise DataFormatError("IDX payload size does not match header dimensions")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=ioff).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=loff)
    return Dataset(pixels.astype(np.float64) / 255.0, labels.astype(np.float64),
                   np.arange(count), Path(image_path).stem, "idx")


def save_idx(images: np.ndarray, labels: np.ndarray, image_path, label_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# -- splitting & preprocessing -------------------------------------------

def split(dataset: Dataset, val_fraction: float, seed: int,
          stratified: bool = False) -> tuple[Dataset, Dataset]:
    """Seeded train/validation split; both sides keep the original row order."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"val_fraction {val_fraction} on {n} samples leaves one side empty")
    rng = np.random.default_rng(seed)
    if not stratified:
        val_idx = rng.permutation(n)[:n_val]
    else:
        classes, inverse = np.unique(dataset.labels, return_inverse=True)
        counts = np.bincount(inverse)
        quota = val_fraction * counts
        take = np.floor(quota).astype(int)
        # hand the remaining slots to the largest fractional remainders
        short = n_val - take.sum()
        if short > 0:
            order = np.argsort(-(quota - take), kind="stable")
            take[order[:short]] += 1
        val_idx = np.concatenate([
            rng.permutation(np.flatnonzero(inverse == c))[:take[c]] for c in range(len(classes))
        ]).astype(np.int64)
    mask = np.zeros(n, dtype=bool)
    mask[val_idx] = True
    return (dataset.subset(~mask, f"{dataset.name}-train"),
            dataset.subset(mask, f"{dataset.name}-val"))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, dataset: Dataset) -> "Standardizer":
        std = dataset.features.std(axis=0)
        return cls(dataset.features.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, dataset: Dataset) -> Dataset:
        return Dataset((dataset.features - self.mean) / self.std, dataset.labels, dataset.ids,
                       dataset.name, dataset.provenance, dataset.class_names)


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Standardize every set with statistics from ``train`` only."""
    st = Standardizer.fit(train)
    return [st.apply(train)] + [st.apply(d) for d in others]


# -- synthetic ------------------------------------------------------------

def blob_centers(input_dim: int, classes: int, separation: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xB10B])
    scale = max(separation, 1e-12)
    for attempt in range(10_000):
        c = rng.normal(0.0, scale, size=(classes, input_dim))
        dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= separation:
            return c
        if attempt % 100 == 99:
            scale *= 1.25
    raise RuntimeError("could not place blob centers")  # pragma: no cover


def synth_blobs(n: int, input_dim: int, classes: int, separation: float,
                flip_fraction: float, seed: int, center_seed: int | None = None,
                id_offset: int = 0) -> tuple[Dataset, PlantedTruth]:
    """Unit-variance Gaussian clusters with a known set of corrupted labels.

    ``center_seed`` (default ``seed``) lets independent draws share clusters,
    e.g. a noisy training set and a clean validation set.
    """
    if classes > n:
        raise ValueError("more classes than samples")
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= flip_fraction < 0.5:
        raise ValueError("flip_fraction must lie in [0, 0.5)")
    centers = blob_centers(input_dim, classes, separation,
                           seed if center_seed is None else center_seed)
    rng = np.random.default_rng([seed, 0x5A3])
    labels = rng.permutation(np.arange(n) % classes)
    X = centers[labels] + rng.normal(size=(n, input_dim))
    n_flip = int(math.floor(flip_fraction * n))
    flipped = np.sort(rng.choice(n, size=n_flip, replace=False))
    noisy = labels.copy()
    noisy[flipped] = (labels[flipped] + rng.integers(1, classes, size=n_flip)) % classes
    ids = np.arange(n) + id_offset
    truth = PlantedTruth({int(ids[i]) for i in flipped},
                         {int(ids[i]): int(labels[i]) for i in flipped})
    return Dataset(X, noisy, ids, f"blobs-s{seed}", "synthetic"), truth
