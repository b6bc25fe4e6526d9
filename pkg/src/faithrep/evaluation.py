"""Accuracy, faithfulness, top-U sweeps, explanations, and cross-seed aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import TrainedModel, argmax_rows, features

DEFAULT_U_GRID = (1, 2, 5, 10, 20, 50, 100, None)

CSV_FIELDS = [
    "dataset",
    "method",
    "seed",
    "eta",
    "lambda",
    "U",
    "accuracy",
    "faithfulness",
    "train_seconds",
]


def _check_nonempty(X: np.ndarray) -> None:
    if len(X) == 0:
        raise ValueError("evaluation set is empty")


def predicted_labels(model: TrainedModel, X: np.ndarray, U: int | None = None) -> np.ndarray:
    """Labels from the model's predictor: g, or h itself for RPS-style methods."""
    if model.W is None:
        return argmax_rows(model.h_logits(X, U))
    return argmax_rows(model.g_proba(X))


def accuracy(model: TrainedModel, X: np.ndarray, y: np.ndarray, U: int | None = None) -> float:
    _check_nonempty(X)
    return float(np.mean(predicted_labels(model, X, U) == np.asarray(y)))


def faithfulness(model: TrainedModel, X: np.ndarray, U: int | None = None) -> float:
    """Fraction of points where argmax g equals argmax of the U-truncated h.

    Methods that predict with h are faithful by construction.
    """
    _check_nonempty(X)
    if model.W is None:
        return 1.0
    g = argmax_rows(model.g_proba(X))
    h = argmax_rows(model.h_logits(X, U))
    return float(np.mean(g == h))


def resolve_u_grid(grid, n_entries: int) -> list[int]:
    """Clip a U grid to the number of coefficient entries; ``None`` means all."""
    out = []
    for u in grid:
        u = n_entries if u is None else min(int(u), n_entries)
        if u not in out:
            out.append(u)
    return sorted(out)


@dataclass
class EvalRow:
    U: int
    accuracy: float
    faithfulness: float


def sweep_u(model: TrainedModel, X: np.ndarray, y: np.ndarray, U_list) -> list[EvalRow]:
    rows = []
    for U in U_list:
        rows.append(EvalRow(U, accuracy(model, X, y, U), faithfulness(model, X, U)))
    return rows


@dataclass
class ExplanationRecord:
    n: int
    c: int
    coefficient: float
    similarity: float
    contribution: float


@dataclass
class Explanation:
    g_label: int | None
    h_label: int
    faithful: bool
    records: list[ExplanationRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "g_label": self.g_label,
            "h_label": self.h_label,
            "faithful": self.faithful,
            "records": [asdict(r) for r in self.records],
        }


def explain(model: TrainedModel, x: np.ndarray, top_m: int, U: int | None = None) -> Explanation:
    """Largest-|contribution| training examples for h's predicted class."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    coef = model.truncated(U)
    sims = model.explainer.F_train @ features(model.net, x)[0]
    h_logits = sims @ coef
    h_label = int(np.argmax(h_logits))
    g_label = None if model.W is None else int(np.argmax(model.g_proba(x)[0]))
    faithful = True if g_label is None else g_label == h_label
    contrib = coef[:, h_label] * sims
    nz = np.flatnonzero(coef[:, h_label])
    order = nz[np.argsort(-np.abs(contrib[nz]), kind="stable")][: max(top_m, 0)]
    records = [
        ExplanationRecord(int(n), h_label, float(coef[n, h_label]), float(sims[n]), float(contrib[n]))
        for n in order
    ]
    return Explanation(g_label, h_label, faithful, records)


@dataclass
class Aggregate:
    mean: np.ndarray
    se: np.ndarray
    n_runs: int


def aggregate(runs) -> Aggregate:
    """Mean and standard error (sample std / sqrt(R)) across runs."""
    arrs = [np.asarray(r, dtype=np.float64) for r in runs]
    if len(arrs) < 2:
        raise ValueError("aggregation needs at least two runs")
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ValueError(f"run shapes differ: {shape} vs {a.shape}")
    stack = np.stack(arrs)
    R = stack.shape[0]
    return Aggregate(stack.mean(axis=0), stack.std(axis=0, ddof=1) / np.sqrt(R), R)


def rows_to_csv(rows: list[dict], fields=CSV_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v
