"""Dataset loading, splitting, standardization and batching."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

STD_EPS = 1e-12
CIFAR_RECORD = 3073


class DatasetFormatError(ValueError):
    pass


class IngestionError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.name}: non-finite feature values")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    valid: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.valid + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if min(self.train, self.valid, self.test) <= 0:
            raise ValueError("every split fraction must be positive")


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path.resolve()}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _parse_idx(blob: bytes, path) -> np.ndarray:
    if len(blob) < 4:
        raise DatasetFormatError(f"{path}: truncated IDX header at offset 0 ({len(blob)} bytes)")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", blob, 0)
    if zero != 0 or dtype_code != 0x08:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{blob[:4].hex()} at offset 0 (expected unsigned-byte data)")
    if len(blob) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated IDX dimension block at offset 4")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims)) if dims else 0
    if len(blob) - start != need:
        raise DatasetFormatError(
            f"{path}: expected {need} data bytes after offset {start}, found {len(blob) - start}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=start).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10, name: str = "idx") -> Dataset:
    """MNIST-style IDX pair. Pixels are scaled to [0, 1], shape N x 1 x 28 x 28."""
    images = _parse_idx(_read_bytes(images_path), images_path)
    labels = _parse_idx(_read_bytes(labels_path), labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise DatasetFormatError(f"{images_path}: expected 3-d images and 1-d labels")
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= n_classes:
        raise DatasetFormatError(f"{labels_path}: label {labels.max()} out of range")
    feats = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(feats, labels.astype(np.int64), n_classes, name)


def load_cifar10_binary(paths, name: str = "cifar10") -> Dataset:
    """One or more CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    feats, labels = [], []
    for path in paths:
        blob = _read_bytes(path)
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            whole = len(blob) // CIFAR_RECORD
            raise DatasetFormatError(f"{path}: truncated record at offset {whole * CIFAR_RECORD} ({len(blob)} bytes)")
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] > 9)
        if bad.size:
            raise DatasetFormatError(f"{path}: label byte {rec[bad[0], 0]} at offset {bad[0] * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        feats.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(feats), np.concatenate(labels), 10, name)


def load_csv_tabular(path, label_column: str, name: str | None = None) -> Dataset:
    """Numeric CSV with a header row. Labels must be integers 0..C-1."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path.resolve()}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DatasetFormatError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        rows, labels = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
            vals = []
            for c, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetFormatError(
                        f"{path}: non-numeric cell {cell!r} at row {r}, column {c + 1} ({header[c]})"
                    ) from None
                if not np.isfinite(v):
                    raise DatasetFormatError(f"{path}: non-finite cell at row {r}, column {c + 1}")
                vals.append(v)
            lab = vals.pop(li)
            if lab != int(lab) or lab < 0:
                raise DatasetFormatError(f"{path}: label {lab} at row {r} is not a non-negative integer")
            rows.append(vals)
            labels.append(int(lab))
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    return Dataset(np.asarray(rows), y, int(y.max()) + 1 if y.max() >= 1 else 2, name or path.stem)


def synth_tabular(seed: int, n: int = 20_000, d: int = 24, classes: int = 2,
                  cells: int = 3, separation: float = 1.0, noise: float = 0.4) -> Dataset:
    """Gaussian checkerboard on two informative dims, the rest pure noise.

    Dims 0 and 1 place a sample in one of ``cells x cells`` grid clusters
    (centres ``2 * separation`` apart, isotropic N(0, noise^2) spread). Cell
    ``(i, j)`` carries label ``(i + j) mod classes``; with ``cells=2`` and two
    classes this is XOR of the quadrant signs. Labels are drawn uniformly
    first and a matching cell uniformly after, so classes stay balanced. The
    remaining ``d - 2`` dims are standard normal noise.
    """
    if n < 2 or d < 2 or classes < 2 or cells < 2:
        raise ValueError("synth_tabular needs n >= 2, d >= 2, classes >= 2, cells >= 2")
    grid = np.array([(i, j) for i in range(cells) for j in range(cells)])
    by_label = [grid[grid.sum(axis=1) % classes == c] for c in range(classes)]
    if any(len(g) == 0 for g in by_label):
        raise ValueError(f"a {cells}x{cells} grid cannot hold {classes} classes")
    rng = np.random.default_rng([seed, 0x5A17])
    y = rng.integers(0, classes, size=n)
    pick = rng.random(n)
    cell = np.empty((n, 2), dtype=np.int64)
    for c, options in enumerate(by_label):
        rows = y == c
        cell[rows] = options[(pick[rows] * len(options)).astype(np.int64)]
    x = rng.standard_normal((n, d))
    x[:, :2] = (2 * cell - (cells - 1)) * separation + noise * rng.standard_normal((n, 2))
    return Dataset(x, y, classes, f"synth-tabular-{seed}")


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng([spec.seed, 0x5B17]).permutation(n)
    n_train = int(round(spec.train * n))
    n_valid = int(round(spec.valid * n))
    if n_train < 1 or n_valid < 1 or n - n_train - n_valid < 1:
        raise ValueError(f"{n} samples cannot fill every split of {spec}")
    return perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:]


def standardize(train: Dataset, *others: Dataset, per_channel: bool | None = None):
    """Zero-mean, unit-variance features using train statistics only.

    Image tensors (N x C x H x W) are standardized per channel, tabular data per
    feature. Constant features map to 0.
    """
    x = train.features
    if per_channel is None:
        per_channel = x.ndim == 4
    axes = (0, 2, 3) if per_channel else (0,)
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    scale = np.where(std > STD_EPS, std, np.inf)
    out = [replace(ds, features=(ds.features - mean) / scale) for ds in (train,) + others]
    return out if others else out[0]


@dataclass
class Splits:
    train: Dataset
    valid: Dataset
    test: Dataset


def make_splits(dataset: Dataset, spec: SplitSpec, normalize: bool = True) -> Splits:
    tr, va, te = split_indices(len(dataset), spec)
    parts = [dataset.subset(tr), dataset.subset(va), dataset.subset(te)]
    if normalize:
        parts = standardize(*parts)
    return Splits(*parts)


def iterate_batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield ``(x, y)`` batches; shuffled when ``rng`` is given. The last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]


def split_and_batch(dataset: Dataset, spec: SplitSpec, batch_size: int, epoch_seed: int):
    """Train-split batches for one epoch, shuffled by ``epoch_seed``."""
    splits = make_splits(dataset, spec)
    return iterate_batches(splits.train, batch_size, np.random.default_rng(epoch_seed))


# ---------------------------------------------------------------------------
# named datasets
# ---------------------------------------------------------------------------

DATA_DIR_ENV = "DSTLAB_DATA_DIR"


def data_root() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _find(root: Path, *candidates: str) -> Path:
    for c in candidates:
        for p in (root / c, root / (c + ".gz")):
            if p.exists():
                return p
    raise IngestionError(
        f"none of {list(candidates)} found under {root.resolve()} (set {DATA_DIR_ENV} to the dataset root)"
    )


def load_named(name: str, *, seed: int = 0, samples: int = 20_000, features: int = 24,
               cells: int = 3, label_column: str = "label") -> tuple[Dataset, Dataset | None]:
    """Resolve a dataset key. Returns ``(data, fixed_test_or_None)``.

    Keys: ``synth-tabular``, ``csv:<path>``, ``fashion-mnist``, ``mnist``,
    ``cifar10``. Image datasets come with their standard test split.
    """
    if name == "synth-tabular":
        return synth_tabular(seed=seed, n=samples, d=features, cells=cells), None
    if name.startswith("csv:"):
        return load_csv_tabular(name[4:], label_column), None
    root = data_root()
    if name in ("fashion-mnist", "mnist"):
        sub = root / name
        train = load_idx(_find(sub, "train-images-idx3-ubyte"), _find(sub, "train-labels-idx1-ubyte"), name=name)
        test = load_idx(_find(sub, "t10k-images-idx3-ubyte"), _find(sub, "t10k-labels-idx1-ubyte"), name=name)
        return train, test
    if name == "cifar10":
        sub = root / "cifar-10-batches-bin"
        train = load_cifar10_binary([_find(sub, f"data_batch_{i}.bin") for i in range(1, 6)])
        test = load_cifar10_binary(_find(sub, "test_batch.bin"))
        return train, test
    raise IngestionError(f"unknown dataset {name!r}; expected synth-tabular, csv:<path>, fashion-mnist, mnist or cifar10")
