"""Dataset ingestion, z-scoring, and seeded train/validation/test splits."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    class_names: list[str]
    feature_names: list[str] = field(default_factory=list)
    fingerprint: str = ""

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] == 0 or self.X.shape[1] == 0:
            raise ValueError(f"feature matrix must be non-empty 2-D, got {self.X.shape}")
        if self.Y.shape != (self.X.shape[0], len(self.class_names)):
            raise ValueError(f"label matrix shape {self.Y.shape} does not match data")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("feature matrix contains non-finite values")
        if not self.fingerprint:
            self.fingerprint = fingerprint(self.X, self.labels)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def c(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Y, axis=1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx], self.class_names, self.feature_names)


def fingerprint(X: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    # adding 0.0 maps -0.0 to 0.0 so equal values hash equally
    h.update(np.ascontiguousarray(X + 0.0, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    h.update(str(X.shape).encode())
    return h.hexdigest()[:16]


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    Y = np.zeros((len(labels), n_classes))
    Y[np.arange(len(labels)), labels] = 1.0
    return Y


def _map_labels(raw: list[str]) -> tuple[np.ndarray, list[str]]:
    names: dict[str, int] = {}
    ids = [names.setdefault(r, len(names)) for r in raw]
    return np.array(ids, dtype=np.int64), list(names)


def parse_libsvm(text: str, n_features: int | None = None) -> Dataset:
    """Parse ``label idx:val ...`` lines with 1-based increasing indices."""
    raw_labels: list[str] = []
    rows: list[tuple[list[int], list[float]]] = []
    width = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        label = tokens[0]
        if ":" in label:
            raise ParseError(f"missing label before {label!r}", lineno)
        idx, vals = [], []
        prev = 0
        for tok in tokens[1:]:
            key, sep, val = tok.partition(":")
            if not sep:
                raise ParseError(f"malformed token {tok!r}", lineno)
            try:
                i = int(key)
                v = float(val)
            except ValueError:
                raise ParseError(f"malformed token {tok!r}", lineno) from None
            if i < 1:
                raise ParseError(f"feature index {i} is not 1-based", lineno)
            if i <= prev:
                raise ParseError(f"feature index {i} does not increase (previous {prev})", lineno)
            if not np.isfinite(v):
                raise ParseError(f"non-finite value {val!r}", lineno)
            prev = i
            idx.append(i - 1)
            vals.append(v)
        width = max(width, prev)
        raw_labels.append(label)
        rows.append((idx, vals))
    if not rows:
        raise ParseError("no data lines", 1)
    if n_features is not None:
        if n_features < width:
            raise ParseError(f"feature index {width} exceeds declared width {n_features}")
        width = n_features
    if width == 0:
        raise ParseError("no features in any line", 1)
    X = np.zeros((len(rows), width))
    for r, (idx, vals) in enumerate(rows):
        X[r, idx] = vals
    ids, names = _map_labels(raw_labels)
    return Dataset(X, one_hot(ids, len(names)), names, [f"f{j + 1}" for j in range(width)])


def serialize_libsvm(ds: Dataset) -> str:
    out = io.StringIO()
    # an all-zero trailing column would otherwise vanish on reparse
    pad_last = not ds.X[:, -1].any()
    for r, (x, k) in enumerate(zip(ds.X, ds.labels)):
        parts = [ds.class_names[k]]
        parts += [f"{j + 1}:{float(v)!r}" for j, v in enumerate(x) if v != 0.0]
        if pad_last and r == 0:
            parts.append(f"{ds.d}:0.0")
        out.write(" ".join(parts) + "\n")
    return out.getvalue()


def parse_dense_csv(text: str, label_column: str | int = -1) -> Dataset:
    """Header row plus numeric cells; one column holds the class label."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not in header", 1)
        lc = header.index(label_column)
    else:
        lc = int(label_column) % len(header)
    feat_cols = [j for j in range(len(header)) if j != lc]
    raw_labels, rows = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(row)}", lineno)
        vals = []
        for j in feat_cols:
            try:
                v = float(row[j])
            except ValueError:
                raise ParseError(f"non-numeric cell {row[j]!r}", lineno, j + 1) from None
            if not np.isfinite(v):
                raise ParseError(f"non-finite cell {row[j]!r}", lineno, j + 1)
            vals.append(v)
        raw_labels.append(row[lc].strip())
        rows.append(vals)
    if not rows:
        raise ParseError("no data rows", 2)
    ids, names = _map_labels(raw_labels)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_cols))
    return Dataset(X, one_hot(ids, len(names)), names, [header[j] for j in feat_cols])


def load_dataset(path, fmt: str | None = None, label_column: str | int = -1) -> Dataset:
    path = str(path)
    if fmt is None:
        fmt = "csv" if path.endswith(".csv") else "libsvm"
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if fmt == "csv":
        return parse_dense_csv(text, label_column)
    if fmt == "libsvm":
        return parse_libsvm(text)
    raise ValueError(f"unknown format {fmt!r}")


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple[float, float] = (0.7, 0.1)


def make_splits(ds: Dataset | int, seed: int, ratios: tuple[float, float] = (0.7, 0.1)) -> Splits:
    n = ds if isinstance(ds, int) else ds.n
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    return Splits(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train : n_train + n_val]),
        test=np.sort(perm[n_train + n_val :]),
        seed=seed,
        ratios=ratios,
    )


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std < 1e-12, 1.0, std))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def standardize(splits: Splits, ds: Dataset) -> tuple[Dataset, Standardizer]:
    """Z-score every row with statistics of the training rows."""
    st = Standardizer.fit(ds.X[splits.train])
    out = Dataset(st.transform(ds.X), ds.Y, ds.class_names, ds.feature_names)
    return out, st
