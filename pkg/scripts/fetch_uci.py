#!/usr/bin/env python3
"""Download the UCI regression benchmarks and convert them to dgbm CSVs.

Files come from the widely used mirror of the standard UCI splits
(whitespace-separated ``data.txt`` plus ``index_target.txt``). Each output
CSV has feature columns ``x0..x{p-1}`` followed by ``y``.

No checksums are bundled. The script prints the sha256 of every file it
downloads; pass ``--manifest manifest.json`` (``{"boston": "<sha256>", ...}``)
to verify against digests you recorded yourself.

Usage:
    python3 scripts/fetch_uci.py --out uci/ [--datasets boston,yacht] [--manifest m.json]
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import urllib.request

import numpy as np

BASE = "https://raw.githubusercontent.com/yaringal/DropoutUncertaintyExps/master/UCI_Datasets"
DATASETS = {
    "boston": "bostonHousing",
    "concrete": "concrete",
    "kin8nm": "kin8nm",
    "naval": "naval-propulsion-plant",
    "protein": "protein-tertiary-structure",
    "yacht": "yacht",
}


def _download(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=60) as resp:
        return resp.read()


def convert(raw: bytes, target_index: int) -> np.ndarray:
    """Whitespace table to a matrix with the target moved to the last column."""
    rows = [line.split() for line in raw.decode("utf-8").splitlines() if line.strip()]
    arr = np.array(rows, dtype=np.float64)
    features = np.delete(arr, target_index, axis=1)
    return np.column_stack([features, arr[:, target_index]])


def write_csv(path: str, table: np.ndarray) -> None:
    p = table.shape[1] - 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join([f"x{i}" for i in range(p)] + ["y"]) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--datasets", default=",".join(DATASETS))
    ap.add_argument("--manifest", help="JSON mapping dataset name to expected sha256 of data.txt")
    args = ap.parse_args(argv)

    expected = {}
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as fh:
            expected = json.load(fh)
    os.makedirs(args.out, exist_ok=True)
    status = 0
    for name in [d.strip() for d in args.datasets.split(",") if d.strip()]:
        if name not in DATASETS:
            print(f"{name}: unknown dataset; choose from {', '.join(DATASETS)}", file=sys.stderr)
            status = 2
            continue
        root = f"{BASE}/{DATASETS[name]}/data"
        try:
            raw = _download(f"{root}/data.txt")
            target = int(_download(f"{root}/index_target.txt").decode().split()[0])
        except OSError as exc:
            print(f"{name}: download failed ({exc}); place {name}.csv in {args.out} by hand", file=sys.stderr)
            status = 1
            continue
        digest = hashlib.sha256(raw).hexdigest()
        if name in expected and expected[name] != digest:
            print(f"{name}: sha256 mismatch, got {digest}, expected {expected[name]}", file=sys.stderr)
            status = 1
            continue
        path = os.path.join(args.out, f"{name}.csv")
        write_csv(path, convert(raw, target))
        print(f"{name}: {path} sha256={digest}")
    return status


if __name__ == "__main__":
    sys.exit(main())
