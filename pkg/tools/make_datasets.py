"""Rebuild datasets/*.libsvm from the KEEL copies shipped in the keel-ds wheel.

    pip download keel-ds==0.2.5 --no-deps -d /tmp/keel
    python -m zipfile -e /tmp/keel/keel_ds-0.2.5-py3-none-any.whl /tmp/keel/x
    python tools/make_datasets.py /tmp/keel/x/keel_ds/data

KEEL distributes Glass only as one-vs-rest binary files over the same rows.
The multi-class labels are recovered by matching each file's positive rows
(glass0 -> 1, glass1 -> 2, glass4 -> 5, glass5 -> 6, glass6 -> 7) against
glass0.dat; the 17 rows left over are class 3.  glass2.dat cannot be used
for this because it carries different feature values.
"""

import sys
from collections import Counter
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "datasets"


def rows(path):
    out = []
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        *x, label = [t.strip() for t in line.split(",")]
        out.append((tuple(x), label))
    return out


def write(path, data):
    with open(path, "w") as fh:
        for x, label in data:
            feats = " ".join(f"{i + 1}:{float(v):.10g}" for i, v in enumerate(x) if float(v) != 0.0)
            fh.write(f"{label} {feats}\n")


def glass(raw: Path):
    base = rows(raw / "glass0.dat")
    labels = [None] * len(base)
    for name, cls in [("glass0", 1), ("glass1", 2), ("glass4", 5), ("glass5", 6), ("glass6", 7)]:
        pos = Counter(x for x, lab in rows(raw / f"{name}.dat") if lab == "positive")
        for i, (x, _) in enumerate(base):
            if pos[x] > 0 and labels[i] is None:
                labels[i] = cls
                pos[x] -= 1
        if sum(pos.values()):
            raise SystemExit(f"{name}: unmatched positive rows")
    return [(x, 3 if lab is None else lab) for (x, _), lab in zip(base, labels)]


def main(data_dir: str) -> None:
    root = Path(data_dir)
    write(OUT / "glass.libsvm", glass(root / "imbalanced" / "raw"))
    write(OUT / "vehicle.libsvm", rows(root / "balanced" / "raw" / "vehicle.dat"))
    write(OUT / "segment.libsvm", rows(root / "balanced" / "raw" / "segment.dat"))


if __name__ == "__main__":
    main(sys.argv[1])
