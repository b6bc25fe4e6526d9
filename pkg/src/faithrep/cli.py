"""Command-line entry point: ``train``, ``benchmark`` and ``explain``.

Exit codes are 0 on success, 1 on a runtime failure (one-line diagnostic on
stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import make_splits, standardize
from .evaluation import explain, resolve_u_grid, rows_to_csv, sweep_u
from .harness import (
    METRIC_FIELDS,
    BenchConfig,
    DatasetSpec,
    config_hash,
    run_benchmark,
    tabulate,
    write_tables,
)
from .model import load_checkpoint, save_checkpoint
from .objectives import Method
from .trainer import Hyperparams, TuneResult, _with, phase1_params, train, tune_eta

log = logging.getLogger("faithrep")

# flag -> Hyperparams field
HP_FLAGS = {
    "lambda": "lam",
    "eta": "eta",
    "sigma": "sigma",
    "mc_samples": "mc_samples",
    "batch": "batch",
    "hidden": "hidden",
    "dropout": "dropout",
    "max_epochs": "max_epochs",
    "patience": "patience",
    "top_u": "top_u",
    "lr": "lr",
    "layers": "n_layers",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything that determines a run; stored as JSON beside its outputs."""

    data: list[str]
    fmt: str | None = None
    label_column: str | int = -1
    standardize: bool | None = None
    methods: list[str] = field(default_factory=lambda: ["ours"])
    hp: Hyperparams = field(default_factory=Hyperparams)
    pin_eta: bool = False
    u_grid: list[int | None] = field(default_factory=lambda: [1, 2, 5, 10, 20, 50, 100, None])
    out: str = "out"
    seeds: list[int] = field(default_factory=lambda: [0])
    lambda_grid: list[float] | None = None
    sweeps: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "data": list(self.data),
            "fmt": self.fmt,
            "label_column": self.label_column,
            "standardize": self.standardize,
            "methods": list(self.methods),
            "hp": self.hp.to_dict(),
            "pin_eta": self.pin_eta,
            "u_grid": list(self.u_grid),
            "out": self.out,
            "seeds": list(self.seeds),
            "lambda_grid": self.lambda_grid,
            "sweeps": list(self.sweeps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("config_hash", None)  # derived, written for reference only
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("data"), str):
            d["data"] = [d["data"]]
        hp = d.pop("hp", {}) or {}
        try:
            d["hp"] = Hyperparams(**hp)
        except TypeError as exc:
            raise UsageError(f"bad hyperparameters in config: {exc}") from exc
        return cls(**d)

    def dataset_specs(self) -> list[DatasetSpec]:
        return [
            DatasetSpec(Path(p).stem, p, self.fmt, self.label_column, self.standardize) for p in self.data
        ]

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)


def _int_list(text: str) -> list[int]:
    """``"0-9"`` or ``"0,3,5"``."""
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def _u_grid(text: str) -> list[int | None]:
    return [None if x.strip() == "all" else int(x) for x in text.split(",")]


def _method(text: str) -> str:
    try:
        return Method.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; explicit flags override it")
    p.add_argument("--data", action="append", help="dataset file (LIBSVM or CSV); repeatable")
    p.add_argument("--format", dest="fmt", choices=["libsvm", "csv"])
    p.add_argument("--label-column", help="CSV label column name or index (default: last)")
    p.add_argument("--no-standardize", action="store_true", help="skip z-scoring of features")
    p.add_argument("--out", help="output directory")
    p.add_argument("--u-grid", type=_u_grid, help="comma-separated U values, 'all' for no truncation")
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--lambda", dest="lambda", type=float, help="weight of the matching term")
    g.add_argument("--eta", type=float, help="sparsity weight; pins eta instead of tuning it")
    g.add_argument("--sigma", type=float, help="gate noise standard deviation")
    g.add_argument("--mc-samples", type=int, help="gate draws per step (J)")
    g.add_argument("--batch", type=int)
    g.add_argument("--hidden", type=int, help="hidden width (also the feature dimension)")
    g.add_argument("--layers", type=int, help="number of hidden layers")
    g.add_argument("--dropout", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--max-epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--top-u", type=int, help="U used when scoring eta on validation data")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="faithrep", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one method and write a checkpoint")
    _add_common(p)
    p.add_argument("--method", type=_method)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("benchmark", help="run methods over seeds and aggregate")
    _add_common(p)
    p.add_argument("--methods", type=lambda s: [_method(m) for m in s.split(",")])
    p.add_argument("--seeds", type=_int_list, help="e.g. 0-9 or 0,1,2")
    p.add_argument("--sweep", action="append", choices=["lambda", "eta"], default=[])
    p.add_argument("--lambda-grid", type=_float_list, help="values for --sweep lambda")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("explain", help="show the training examples behind a prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="the training data file the checkpoint was fit on")
    p.add_argument("--format", dest="fmt", choices=["libsvm", "csv"])
    p.add_argument("--label-column")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--index", type=int, help="row index into the test split")
    which.add_argument("--row", help="comma-separated raw feature values")
    p.add_argument("--top-m", type=int, default=5)
    p.add_argument("--top-u", type=int, help="truncate to the U highest-ranked entries first")
    p.add_argument("--json", action="store_true", help="print a JSON document instead of text")
    return ap


def _label_column(v):
    if v is None:
        return None
    return int(v) if v.lstrip("-").isdigit() else v


def resolve_config(args) -> RunConfig:
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        cfg = RunConfig.from_dict(doc)
    else:
        if not args.data:
            raise UsageError("--data or --config is required")
        cfg = RunConfig(data=[])
    if args.data:
        cfg.data = list(args.data)
    if args.fmt:
        cfg.fmt = args.fmt
    if args.label_column is not None:
        cfg.label_column = _label_column(args.label_column)
    if args.no_standardize:
        cfg.standardize = False
    if args.out:
        cfg.out = args.out
    if args.u_grid:
        cfg.u_grid = args.u_grid
    changes = {HP_FLAGS[k]: getattr(args, k) for k in HP_FLAGS if getattr(args, k) is not None}
    if args.eta is not None:
        cfg.pin_eta = True
    if args.command == "train":
        if args.method:
            cfg.methods = [args.method]
        if args.seed is not None:
            cfg.seeds = [args.seed]
        if len(cfg.methods) != 1:
            raise UsageError("train takes exactly one method")
    else:
        if args.methods:
            cfg.methods = args.methods
        if args.seeds:
            cfg.seeds = args.seeds
        if args.sweep:
            cfg.sweeps = sorted(set(args.sweep))
        if args.lambda_grid:
            cfg.lambda_grid = args.lambda_grid
        if "lambda" in cfg.sweeps and not cfg.lambda_grid:
            raise UsageError("--sweep lambda needs --lambda-grid")
        if "eta" in cfg.sweeps and cfg.pin_eta:
            raise UsageError("--sweep eta cannot be combined with a pinned --eta")
    try:
        cfg.hp = _with(cfg.hp, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg.methods = [_method(m) for m in cfg.methods]
    return cfg


def _train_one(cfg: RunConfig, spec: DatasetSpec, seed: int, out: Path) -> None:
    method = Method(cfg.methods[0])
    hp = _with(cfg.hp, seed=seed)
    raw = spec.load()
    splits = make_splits(raw, seed)
    ds, st = standardize(splits, raw) if spec.z_score else (raw, None)

    pretrained = None
    if method.two_phase:
        base, _ = train(Method.PRETRAIN, ds, splits, hp, phase1_only=True)
        pretrained = phase1_params(base)
    if method.uses_gates and not cfg.pin_eta:
        tuned = tune_eta(method, ds, splits, hp, pretrained)
    else:
        model, hist = train(method, ds, splits, hp, pretrained)
        tuned = TuneResult(hp.eta, {}, {hp.eta: (model, hist)})
    model, hist = tuned.runs[tuned.best_eta]

    chash = cfg.hash
    model.meta |= {
        "config_hash": chash,
        "data_file": Path(spec.path).name,
        "data_fingerprint": raw.fingerprint,
        "standardized": st is not None,
        "eta": tuned.best_eta,
    }
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", model)
    (out / "history.log").write_text(f"# config_hash: {chash}\n" + "\n".join(hist.lines()) + "\n")

    X, y = ds.X[splits.test], ds.labels[splits.test]
    rows = [
        {
            "dataset": spec.name,
            "method": method.value,
            "seed": seed,
            "eta": float(tuned.best_eta),
            "lambda": float(hp.lam),
            "U": r.U,
            "accuracy": r.accuracy,
            "faithfulness": r.faithfulness,
        }
        for r in sweep_u(model, X, y, resolve_u_grid(cfg.u_grid, model.coefficients().size))
    ]
    (out / "metrics.csv").write_text(f"# config_hash: {chash}\n" + rows_to_csv(rows, METRIC_FIELDS))
    metadata = {
        "config_hash": chash,
        "dataset": spec.name,
        "data_fingerprint": raw.fingerprint,
        "method": method.value,
        "seed": seed,
        "eta": tuned.best_eta,
        "val_scores": {repr(k): v for k, v in tuned.scores.items()},
        "best_epoch": {str(k): v for k, v in hist.best_epoch.items()},
        "steps": hist.steps,
        "train_seconds": hist.seconds,
        "max_epochs": hp.max_epochs,
    }
    (out / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_dict() | {"config_hash": chash}, indent=2) + "\n")
    print(f"wrote {out}")


def cmd_train(cfg: RunConfig) -> int:
    specs = cfg.dataset_specs()
    multi = len(specs) * len(cfg.seeds) > 1
    for spec in specs:
        for seed in cfg.seeds:
            out = Path(cfg.out) / f"{spec.name}-seed{seed}" if multi else Path(cfg.out)
            _train_one(cfg, spec, seed, out)
    return 0


def cmd_benchmark(cfg: RunConfig, workers: int) -> int:
    bench = BenchConfig(
        datasets=cfg.dataset_specs(),
        methods=cfg.methods,
        seeds=cfg.seeds,
        hp=cfg.hp,
        u_grid=cfg.u_grid,
        pin_eta=cfg.pin_eta,
        lambda_grid=cfg.lambda_grid if "lambda" in cfg.sweeps else None,
    )
    records, failures = run_benchmark(bench, cfg.out, workers)
    for f in failures:
        print(f"warning: run failed: {f}", file=sys.stderr)
    if not records:
        raise RuntimeError("no run completed")
    if failures:
        print(f"warning: aggregating {len(records)} completed runs", file=sys.stderr)
    paths = write_tables(tabulate(records, cfg.hp.lam), cfg.out, bench, sweeps=cfg.sweeps)
    (Path(cfg.out) / "run_config.json").write_text(
        json.dumps(cfg.to_dict() | {"config_hash": cfg.hash}, indent=2) + "\n"
    )
    for p in paths.values():
        print(f"wrote {p}")
    return 0


def cmd_explain(args) -> int:
    model = load_checkpoint(args.checkpoint)
    meta = model.meta
    label_column = _label_column(args.label_column)
    spec = DatasetSpec(
        Path(args.data).stem, args.data, args.fmt, -1 if label_column is None else label_column,
        meta.get("standardized"),
    )
    raw = spec.load()
    expected = meta.get("data_fingerprint")
    if expected is None or raw.fingerprint != expected:
        raise RuntimeError(
            f"{args.data} does not match the data this checkpoint was trained on "
            f"(fingerprint {raw.fingerprint[:12]} vs {str(expected)[:12]})"
        )
    splits = make_splits(raw, meta["split_seed"])
    ds, st = standardize(splits, raw) if meta.get("standardized") else (raw, None)
    if args.row is not None:
        try:
            x = np.array([float(v) for v in args.row.split(",")])
        except ValueError as exc:
            raise UsageError(f"--row: {exc}") from exc
        if x.size != raw.d:
            raise UsageError(f"--row has {x.size} values, the data has {raw.d} features")
        x = st.transform(x[None, :]) if st is not None else x[None, :]
        source = "row"
    else:
        if not 0 <= args.index < len(splits.test):
            raise UsageError(f"--index must lie in [0, {len(splits.test)})")
        x = ds.X[splits.test[args.index]][None, :]
        source = f"test[{args.index}] = row {int(splits.test[args.index])}"
    ex = explain(model, x, args.top_m, args.top_u)
    names = meta.get("class_names") or ds.class_names

    def cls(c):
        return "-" if c is None else names[c]

    if args.json:
        doc = ex.to_dict() | {"source": source, "method": model.method}
        for r in doc["records"]:
            r["row"] = int(splits.train[r["n"]])
            r["class"] = names[r["c"]]
        print(json.dumps(doc, indent=2))
        return 0
    print(f"input: {source}")
    print(f"g predicts: {cls(ex.g_label)}")
    print(f"h predicts: {cls(ex.h_label)}")
    print(f"faithful: {'yes' if ex.faithful else 'no'}")
    if ex.records:
        print("rank\ttrain_row\tclass\tcoefficient\tsimilarity\tcontribution")
    for i, r in enumerate(ex.records, 1):
        print(
            f"{i}\t{int(splits.train[r.n])}\t{names[r.c]}\t{r.coefficient:.6g}\t{r.similarity:.6g}\t{r.contribution:.6g}"
        )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        if args.command == "explain":
            return cmd_explain(args)
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_benchmark(cfg, args.workers)
    except UsageError as exc:
        print(f"faithrep: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"faithrep: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
