"""Produce the cached benchmark runs read by the acceptance suite.

Runs Glass (with the lambda sweep for OURS) and Vehicle, 10 seeds, all six
methods, eta tuned on the grid, with the epoch cap reduced to 2,000.  Runs are
cached under results/acceptance/<dataset>/runs, so the script resumes after an
interruption.

    python tools/acceptance_bench.py [--workers N]
"""

import argparse
import logging
from pathlib import Path

from faithrep.harness import BenchConfig, DatasetSpec, run_benchmark, tabulate, write_tables
from faithrep.trainer import Hyperparams

ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "results" / "acceptance"
METHODS = ["ours", "joint", "rps", "rpsr", "pretrain", "pretrainr"]
SEEDS = list(range(10))
EPOCH_CAP = 2000


def configs() -> dict[str, BenchConfig]:
    hp = Hyperparams(max_epochs=EPOCH_CAP)
    return {
        "glass": BenchConfig(
            [DatasetSpec("glass", str(ROOT / "datasets" / "glass.libsvm"))],
            METHODS, SEEDS, hp, lambda_grid=[0.01, 1.0, 100.0],
        ),
        "vehicle": BenchConfig(
            [DatasetSpec("vehicle", str(ROOT / "datasets" / "vehicle.libsvm"))], METHODS, SEEDS, hp
        ),
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", choices=["glass", "vehicle"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name, cfg in configs().items():
        if args.only and name != args.only:
            continue
        records, failures = run_benchmark(cfg, OUT / name, args.workers)
        for f in failures:
            logging.warning("failed: %s", f)
        write_tables(tabulate(records, cfg.hp.lam), OUT / name, cfg)


if __name__ == "__main__":
    main()
