"""Datasets, their on-disk format, and a seeded Gaussian-blob generator.

On-disk layout of one split (``<dir>/<split>.bin`` + ``<dir>/<split>.labels``):

* ``.bin``: 16-byte header ``b"FFDS"``, then ``n, d, l`` as little-endian
  uint32, followed by ``n*d`` little-endian float32 values (row-major).
* ``.labels``: ``n`` little-endian int32 labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_MAGIC = b"FFDS"
_HEADER = struct.Struct("<4sIII")


class DatasetMissing(FileNotFoundError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_labels: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels disagree on n")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise ValueError(f"labels must lie in [0, {self.num_labels})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_labels, split or self.split)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_labels)

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(np.concatenate([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       parts[0].num_labels, parts[0].split)


def save_dataset(ds: Dataset, directory: str | Path, split: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split = split or ds.split
    n, d = ds.features.shape
    with open(directory / f"{split}.bin", "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, n, d, ds.num_labels))
        fh.write(ds.features.astype("<f4").tobytes())
    (directory / f"{split}.labels").write_bytes(ds.labels.astype("<i4").tobytes())
    return directory


def load_dataset(directory: str | Path, split: str = "train") -> Dataset:
    directory = Path(directory)
    fpath, lpath = directory / f"{split}.bin", directory / f"{split}.labels"
    if not fpath.exists() or not lpath.exists():
        raise DatasetMissing(f"no {split} split in {directory}")
    raw = fpath.read_bytes()
    magic, n, d, l = _HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise ValueError(f"{fpath} is not a dataset file")
    feats = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=n * d).reshape(n, d)
    labels = np.frombuffer(lpath.read_bytes(), dtype="<i4")
    if len(labels) != n:
        raise ValueError(f"{lpath} holds {len(labels)} labels, expected {n}")
    return Dataset(feats.copy(), labels.astype(np.int64), int(l), split)


def read_header(path: str | Path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        magic, n, d, l = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != DATA_MAGIC:
        raise ValueError(f"{path} is not a dataset file")
    return n, d, l


def make_blobs(n: int, num_features: int, num_labels: int, separation: float = 3.0,
               seed: int = 0, balanced: bool = True) -> Dataset:
    """Gaussian class blobs: unit-variance clouds around random centers.

    ``separation`` scales the spread of the centers; larger means easier.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(num_labels, num_features))
    if balanced:
        labels = np.arange(n) % num_labels
        rng.shuffle(labels)
    else:
        labels = rng.integers(0, num_labels, size=n)
    feats = centers[labels] + rng.normal(size=(n, num_features))
    return Dataset(feats.astype(np.float32), labels, num_labels)


def train_val_split(ds: Dataset, val_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    return ds.subset(perm[n_val:], "train"), ds.subset(perm[:n_val], "validation")
