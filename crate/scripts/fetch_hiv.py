"""Downloads the protease-inhibitor genotype/phenotype data and the TSM list
and converts them to the snapshot layout read by `knockoffs hiv`.

    python3 scripts/fetch_hiv.py data/hiv

Sources default to the Stanford HIVDB published-analysis files; pass
--data-url / --tsm-url (or local paths) to override. A row is kept only if
every position cell is `.`, `-` or a run of residue letters (`i` insertion,
`d` deletion). Each residue letter present at a position becomes one 0/1
indicator labelled `P<position><residue>`.
"""

import argparse
import re
import sys
import urllib.request
from pathlib import Path

BASE = "http://hivdb.stanford.edu/pages/published_analysis/genophenoPNAS2006"
DATA_URL = f"{BASE}/DATA/PI_DATA.txt"
TSM_URL = f"{BASE}/MUTATION_LISTS/TSM/PI.txt"
DRUGS = ["APV", "ATV", "IDV", "LPV", "NFV", "RTV", "SQV"]
VALID = re.compile(r"^(\.|-|[A-Zid]+)$")
RESIDUES = [chr(c) for c in range(ord("A"), ord("Z") + 1)] + ["i", "d"]


def read(source: str) -> str:
    if Path(source).exists():
        return Path(source).read_text()
    with urllib.request.urlopen(source, timeout=60) as resp:
        return resp.read().decode("utf-8", errors="replace")


def convert(data_text: str, tsm_text: str, out: Path) -> None:
    lines = [l.rstrip("\r\n") for l in data_text.splitlines() if l.strip()]
    header = lines[0].split("\t")
    pos_cols = [i for i, h in enumerate(header) if re.fullmatch(r"P\d+", h)]
    drug_cols = {d: header.index(d) for d in DRUGS if d in header}
    id_col = header.index("SeqID") if "SeqID" in header else 0

    rows = []
    for line in lines[1:]:
        fields = line.split("\t")
        fields += [""] * (len(header) - len(fields))
        cells = [fields[i].strip() for i in pos_cols]
        if all(VALID.match(c) for c in cells):
            rows.append((fields[id_col].strip(), cells, fields))

    counts = {}
    indicators = []
    for _, cells, _ in rows:
        present = set()
        for col, cell in zip(pos_cols, cells):
            for res in RESIDUES:
                if res in cell:
                    present.add(f"{header[col]}{res}")
        indicators.append(present)
        for label in present:
            counts[label] = counts.get(label, 0) + 1

    def key(label):
        return int(re.match(r"P(\d+)", label).group(1)), label

    labels = sorted(counts, key=key)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mutations.tsv", "w") as f:
        f.write("patient\t" + "\t".join(labels) + "\n")
        for (pid, _, _), present in zip(rows, indicators):
            f.write(pid + "\t" + "\t".join("1" if l in present else "0" for l in labels) + "\n")
    with open(out / "susceptibility.tsv", "w") as f:
        f.write("patient\t" + "\t".join(drug_cols) + "\n")
        for pid, _, fields in rows:
            vals = [fields[i].strip() or "NA" for i in drug_cols.values()]
            f.write(pid + "\t" + "\t".join(vals) + "\n")
    with open(out / "tsm.txt", "w") as f:
        f.write("# position\tresidues\n")
        for line in tsm_text.splitlines():
            parts = line.split("\t")
            if parts and parts[0].strip().isdigit():
                f.write("\t".join(p.strip() for p in parts[:2]) + "\n")
    print(f"{len(rows)} patients, {len(labels)} position/residue pairs -> {out}")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", nargs="?", default="data/hiv")
    ap.add_argument("--data-url", default=DATA_URL)
    ap.add_argument("--tsm-url", default=TSM_URL)
    args = ap.parse_args()
    try:
        data_text = read(args.data_url)
        tsm_text = read(args.tsm_url)
    except OSError as e:
        print(f"fetch failed: {e}", file=sys.stderr)
        return 1
    convert(data_text, tsm_text, Path(args.out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
