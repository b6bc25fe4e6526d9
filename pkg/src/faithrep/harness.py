"""Benchmark orchestration: per-seed runs, eta tuning, sweeps, and aggregation.

One *unit* is a (dataset, seed, method, lambda) tuple.  Each unit trains the
method (tuning eta on the grid for gate methods unless eta is pinned),
evaluates the selected model over the U grid on the test split, and is cached
as JSON under ``<out>/runs/`` keyed by the configuration hash so interrupted
benchmarks resume and finished ones are not retrained.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, load_dataset, make_splits, standardize
from .evaluation import aggregate, resolve_u_grid, rows_to_csv, sweep_u
from .gates import open_gate_count
from .objectives import Method
from .trainer import Hyperparams, TuneResult, _with, phase1_params, train, tune_eta

log = logging.getLogger(__name__)

METRIC_FIELDS = ["dataset", "method", "seed", "eta", "lambda", "U", "accuracy", "faithfulness"]
RUN_FIELDS = METRIC_FIELDS + ["train_seconds"]


@dataclass
class DatasetSpec:
    name: str
    path: str
    fmt: str | None = None
    label_column: str | int = -1
    standardize: bool | None = None
    hidden: int | None = None

    def load(self) -> Dataset:
        return load_dataset(self.path, self.fmt, self.label_column)

    def key_dict(self) -> dict:
        """Identity for caching: file contents rather than location."""
        d = vars(self).copy()
        d["path"] = Path(self.path).name
        try:
            d["sha256"] = hashlib.sha256(Path(self.path).read_bytes()).hexdigest()
        except OSError:
            # unreadable files fail later, per run
            d["sha256"] = None
        return d

    @property
    def z_score(self) -> bool:
        if self.standardize is not None:
            return self.standardize
        return not str(self.path).endswith(".csv")


@dataclass
class BenchConfig:
    datasets: list[DatasetSpec]
    methods: list[str]
    seeds: list[int]
    hp: Hyperparams = field(default_factory=Hyperparams)
    u_grid: list[int | None] = field(default_factory=lambda: [1, 2, 5, 10, 20, 50, 100, None])
    pin_eta: bool = False
    lambda_grid: list[float] | None = None
    lambda_methods: list[str] = field(default_factory=lambda: ["ours"])

    def to_dict(self) -> dict:
        return {
            "datasets": [vars(d) for d in self.datasets],
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "hp": self.hp.to_dict(),
            "u_grid": list(self.u_grid),
            "pin_eta": self.pin_eta,
            "lambda_grid": self.lambda_grid,
            "lambda_methods": self.lambda_methods,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        return cls(
            datasets=[DatasetSpec(**x) for x in d["datasets"]],
            methods=d["methods"],
            seeds=d["seeds"],
            hp=Hyperparams(**d.get("hp", {})),
            u_grid=d.get("u_grid", [1, 2, 5, 10, 20, 50, 100, None]),
            pin_eta=d.get("pin_eta", False),
            lambda_grid=d.get("lambda_grid"),
            lambda_methods=d.get("lambda_methods", ["ours"]),
        )


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Unit:
    dataset: DatasetSpec
    seed: int
    method: str
    lam: float
    hp: Hyperparams
    u_grid: list
    pin_eta: bool

    def key_dict(self) -> dict:
        hp = self.hp.to_dict()
        hp.pop("seed")
        hp.pop("lam")
        if not self.pin_eta:
            hp.pop("eta")
        return {
            "version": __version__,
            "dataset": self.dataset.key_dict(),
            "method": self.method,
            "hp": hp,
            "u_grid": self.u_grid,
            "pin_eta": self.pin_eta,
        }

    @property
    def group_hash(self) -> str:
        """Hash of everything except the swept fields (seed, lambda)."""
        return config_hash(self.key_dict())

    @property
    def filename(self) -> str:
        return f"{self.dataset.name}-{self.method}-s{self.seed}-l{self.lam:g}-{self.group_hash}.json"


def prepare(spec: DatasetSpec, seed: int):
    ds = spec.load()
    splits = make_splits(ds, seed)
    if spec.z_score:
        ds, _ = standardize(splits, ds)
    return ds, splits


def _eval_rows(unit: Unit, model, ds, splits, eta: float) -> list[dict]:
    X, y = ds.X[splits.test], ds.labels[splits.test]
    us = resolve_u_grid(unit.u_grid, model.coefficients().size)
    return [
        {
            "dataset": unit.dataset.name,
            "method": unit.method,
            "seed": unit.seed,
            "eta": float(eta),
            "lambda": float(unit.lam),
            "U": r.U,
            "accuracy": r.accuracy,
            "faithfulness": r.faithfulness,
        }
        for r in sweep_u(model, X, y, us)
    ]


def run_unit(unit: Unit) -> dict:
    """Train and evaluate one unit; returns a JSON-serializable record."""
    method = Method.parse(unit.method)
    hp = _with(unit.hp, seed=unit.seed, lam=unit.lam)
    if unit.dataset.hidden:
        hp = _with(hp, hidden=unit.dataset.hidden)
    ds, splits = prepare(unit.dataset, unit.seed)

    pretrained = None
    pretrain_seconds = 0.0
    if method.two_phase:
        t0 = time.perf_counter()
        base, _ = train(Method.PRETRAIN, ds, splits, hp, phase1_only=True)
        pretrain_seconds = time.perf_counter() - t0
        pretrained = phase1_params(base)

    t0 = time.perf_counter()
    if method.uses_gates and not unit.pin_eta:
        tuned = tune_eta(method, ds, splits, hp, pretrained)
    else:
        eta = hp.eta if method.uses_gates else 0.0
        model, hist = train(method, ds, splits, _with(hp, eta=eta), pretrained)
        tuned = TuneResult(eta, {}, {eta: (model, hist)})
    seconds = time.perf_counter() - t0

    model, hist = tuned.runs[tuned.best_eta]
    record = {
        "unit": unit.key_dict() | {"seed": unit.seed, "lambda": unit.lam},
        "group_hash": unit.group_hash,
        "best_eta": tuned.best_eta,
        "val_scores": {repr(k): v for k, v in tuned.scores.items()},
        "rows": _eval_rows(unit, model, ds, splits, tuned.best_eta),
        "train_seconds": hist.seconds,
        "tuning_seconds": seconds,
        "pretrain_seconds": pretrain_seconds,
        "best_epoch": {str(k): v for k, v in hist.best_epoch.items()},
        "eta_runs": [],
    }
    for eta, (m, h) in sorted(tuned.runs.items()):
        record["eta_runs"].append(
            {
                "eta": eta,
                "open_gates": open_gate_count(m.gates) if m.gates is not None else int(np.count_nonzero(m.A)),
                "n_entries": int(m.coefficients().size),
                "train_seconds": h.seconds,
                "rows": _eval_rows(unit, m, ds, splits, eta),
            }
        )
    return record


def _run_and_store(unit: Unit, path: Path) -> dict:
    rec = run_unit(unit)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(rec, sort_keys=True))
    os.replace(tmp, path)
    return rec


def units_for(cfg: BenchConfig) -> list[Unit]:
    units = []
    swept = {Method.parse(m) for m in cfg.lambda_methods}
    for spec in cfg.datasets:
        for seed in cfg.seeds:
            for name in cfg.methods:
                m = Method.parse(name)
                lam_values = [cfg.hp.lam]
                if m in swept and cfg.lambda_grid:
                    lam_values = sorted({cfg.hp.lam, *cfg.lambda_grid})
                for lam in lam_values:
                    units.append(Unit(spec, seed, m.value, float(lam), cfg.hp, list(cfg.u_grid), cfg.pin_eta))
    return units


def run_benchmark(cfg: BenchConfig, out_dir, workers: int = 1) -> tuple[list[dict], list[str]]:
    """Run (or resume) every unit; returns completed records and failure messages."""
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    units = units_for(cfg)
    records, failures, todo = [], [], []
    for u in units:
        p = out / "runs" / u.filename
        if p.exists():
            records.append(json.loads(p.read_text()))
        else:
            todo.append((u, p))
    log.info("%d units cached, %d to run", len(records), len(todo))
    if workers <= 1:
        for u, p in todo:
            try:
                records.append(_run_and_store(u, p))
                log.info("done %s", p.name)
            except Exception as exc:  # reported per run, aggregation continues
                failures.append(f"{p.name}: {exc}")
                log.warning("failed %s: %s", p.name, exc)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_run_and_store, u, p): p for u, p in todo}
            for fut in as_completed(futs):
                try:
                    records.append(fut.result())
                except Exception as exc:
                    failures.append(f"{futs[fut].name}: {exc}")
                    log.warning("failed %s: %s", futs[fut].name, exc)
    return records, failures


def check_mergeable(records: list[dict]) -> None:
    """Refuse to merge runs whose configs differ in anything but the swept fields."""
    groups = {}
    for r in records:
        key = (r["unit"]["dataset"]["name"], r["unit"]["method"])
        groups.setdefault(key, set()).add(r["group_hash"])
    bad = {k: v for k, v in groups.items() if len(v) > 1}
    if bad:
        raise ValueError(f"runs with differing configurations cannot be merged: {sorted(bad)}")


def _agg_rows(rows: list[dict], keys: tuple[str, ...]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for k, rs in sorted(groups.items()):
        entry = dict(zip(keys, k))
        entry["n_runs"] = len(rs)
        for metric in ("accuracy", "faithfulness", "train_seconds", "open_gates"):
            vals = [r[metric] for r in rs if r.get(metric) is not None]
            if not vals:
                continue
            if len(vals) >= 2:
                a = aggregate(vals)
                entry[f"{metric}_mean"], entry[f"{metric}_se"] = float(a.mean), float(a.se)
            else:
                entry[f"{metric}_mean"], entry[f"{metric}_se"] = float(vals[0]), 0.0
        out.append(entry)
    return out


@dataclass
class Tables:
    metrics: list[dict]
    runs: list[dict]
    eta_sweep: list[dict]
    lambda_sweep: list[dict]
    gates: list[dict]
    aggregate: list[dict]
    eta_aggregate: list[dict]
    lambda_aggregate: list[dict]
    timing: list[dict]


def tabulate(records: list[dict], base_lambda: float = 1.0) -> Tables:
    check_mergeable(records)
    records = sorted(records, key=lambda r: (r["unit"]["dataset"]["name"], r["unit"]["method"], r["unit"]["seed"], r["unit"]["lambda"]))
    metrics, runs, eta_rows, lam_rows, gates = [], [], [], [], []
    for r in records:
        main = r["unit"]["lambda"] == base_lambda
        for row in r["rows"]:
            if main:
                metrics.append(row)
                runs.append(row | {"train_seconds": r["train_seconds"]})
            lam_rows.append(row)
        for er in r["eta_runs"]:
            g = {
                "dataset": r["unit"]["dataset"]["name"],
                "method": r["unit"]["method"],
                "seed": r["unit"]["seed"],
                "lambda": r["unit"]["lambda"],
                "eta": er["eta"],
                "open_gates": er["open_gates"],
                "n_entries": er["n_entries"],
            }
            gates.append(g)
            if main:
                eta_rows.extend(row | {"train_seconds": er["train_seconds"]} for row in er["rows"])
    timing = [
        {"dataset": r["unit"]["dataset"]["name"], "method": r["unit"]["method"], "seed": r["unit"]["seed"], "train_seconds": r["train_seconds"]}
        for r in records
        if r["unit"]["lambda"] == base_lambda
    ]
    return Tables(
        metrics=metrics,
        runs=runs,
        eta_sweep=eta_rows,
        lambda_sweep=lam_rows,
        gates=gates,
        aggregate=_agg_rows(runs, ("dataset", "method", "U")),
        eta_aggregate=_agg_rows(eta_rows, ("dataset", "method", "eta", "U")),
        lambda_aggregate=_agg_rows(lam_rows, ("dataset", "method", "lambda", "U")),
        timing=_agg_rows(timing, ("dataset", "method")),
    )


def _csv(rows: list[dict], fields: list[str], chash: str) -> str:
    return f"# config_hash: {chash}\n" + rows_to_csv(rows, fields)


def write_tables(tables: Tables, out_dir, cfg: BenchConfig, sweeps=None) -> dict[str, Path]:
    """Write every table; eta-sweep tables only when ``sweeps`` is None or names "eta"."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg.to_dict())
    agg_fields = ["dataset", "method", "U", "n_runs", "accuracy_mean", "accuracy_se", "faithfulness_mean", "faithfulness_se"]
    files = {
        "metrics.csv": _csv(tables.metrics, METRIC_FIELDS, chash),
        "runs.csv": _csv(tables.runs, RUN_FIELDS, chash),
        "aggregate.csv": _csv(tables.aggregate, agg_fields, chash),
        "gates.csv": _csv(tables.gates, ["dataset", "method", "seed", "lambda", "eta", "open_gates", "n_entries"], chash),
        "timing.csv": _csv(tables.timing, ["dataset", "method", "n_runs", "train_seconds_mean", "train_seconds_se"], chash),
    }
    if sweeps is None or "eta" in sweeps:
        files["eta_sweep.csv"] = _csv(tables.eta_sweep, RUN_FIELDS, chash)
        files["eta_aggregate.csv"] = _csv(
            tables.eta_aggregate, agg_fields[:2] + ["eta"] + agg_fields[2:], chash
        )
    if cfg.lambda_grid:
        files["lambda_sweep.csv"] = _csv(tables.lambda_sweep, METRIC_FIELDS, chash)
        files["lambda_aggregate.csv"] = _csv(
            tables.lambda_aggregate, agg_fields[:2] + ["lambda"] + agg_fields[2:], chash
        )
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths[name] = p
    cfg_doc = cfg.to_dict() | {"config_hash": chash}
    (out / "config.json").write_text(json.dumps(cfg_doc, indent=2, sort_keys=True))
    return paths
