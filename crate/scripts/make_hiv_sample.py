"""Writes the small synthetic HIV snapshot used by tests and examples.

The matrix mimics the shape of protease mutation data: sparse 0/1 indicators
labelled by position and residue, a few rare mutations that the occurrence
filter removes, seven drugs with missing outcomes (one mostly missing) and a
handful of nonpositive measurements. Log fold-change depends on a few
mutations at listed positions plus noise.

    python3 scripts/make_hiv_sample.py data/hiv-sample
"""

import sys
from pathlib import Path

import numpy as np

DRUGS = ["APV", "ATV", "IDV", "LPV", "NFV", "RTV", "SQV"]
RESIDUES = "ACDEFGHIKLMNPQRSTVWY"


def main(out: Path) -> None:
    rng = np.random.default_rng(20240611)
    n = 240
    positions = sorted(rng.choice(np.arange(1, 100), size=30, replace=False).tolist())
    labels = []
    for pos in positions:
        for res in rng.choice(list(RESIDUES), size=rng.integers(1, 3), replace=False):
            labels.append(f"P{pos}{res}")
    p = len(labels)
    freq = rng.beta(0.6, 6.0, size=p)
    freq[:4] = [0.004, 0.008, 0.01, 0.012]  # rare: at most a few carriers
    x = (rng.random((n, p)) < freq).astype(int)

    tsm_positions = sorted(rng.choice(positions, size=12, replace=False).tolist())
    common = [j for j in range(p) if x[:, j].sum() >= 10]
    at_tsm = [j for j in common if int(labels[j][1:-1]) in tsm_positions]

    out.mkdir(parents=True, exist_ok=True)
    patients = [f"S{i:04d}" for i in range(n)]
    with open(out / "mutations.tsv", "w") as f:
        f.write("patient\t" + "\t".join(labels) + "\n")
        for i in range(n):
            f.write(patients[i] + "\t" + "\t".join(map(str, x[i])) + "\n")

    missing_rate = {d: 0.08 for d in DRUGS}
    missing_rate["ATV"] = 0.6
    columns = []
    for d in DRUGS:
        signal = rng.choice(at_tsm, size=min(6, len(at_tsm)), replace=False)
        beta = np.zeros(p)
        beta[signal] = rng.uniform(1.5, 2.5, size=len(signal))
        fold = np.exp(x @ beta + rng.normal(0.0, 0.5, size=n))
        col = [f"{v:.4g}" for v in fold]
        for i in np.flatnonzero(rng.random(n) < missing_rate[d]):
            col[i] = "NA"
        for i in rng.choice(n, size=2, replace=False):
            col[i] = "0"
        columns.append(col)
    with open(out / "susceptibility.tsv", "w") as f:
        f.write("patient\t" + "\t".join(DRUGS) + "\n")
        for i in range(n):
            f.write(patients[i] + "\t" + "\t".join(c[i] for c in columns) + "\n")

    with open(out / "tsm.txt", "w") as f:
        f.write("# treatment-selected mutation positions\n")
        for pos in tsm_positions:
            f.write(f"{pos}\n")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "data/hiv-sample"))
