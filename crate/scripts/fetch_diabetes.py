#!/usr/bin/env python3
"""Write the diabetes regression data (raw, unscaled) to data/diabetes.csv and check its schema.

Usage: fetch_diabetes.py [--out PATH] [--check PATH]
"""
import argparse
import csv
import math
import sys

COLUMNS = ["age", "sex", "bmi", "bp", "s1", "s2", "s3", "s4", "s5", "s6", "y"]
ACCEPTED_ROWS = (442, 484)


def fetch(out):
    from sklearn.datasets import load_diabetes

    d = load_diabetes(scaled=False)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS)
        for row, target in zip(d.data, d.target):
            w.writerow([repr(float(v)) for v in row] + [repr(float(target))])


def check(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if rows[0] != COLUMNS:
        sys.exit(f"{path}: header {rows[0]} != {COLUMNS}")
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(COLUMNS):
            sys.exit(f"{path}: row {i} has {len(row)} fields")
        for j, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                sys.exit(f"{path}: row {i}, column {j}: '{cell}' is not a number")
            if not math.isfinite(v):
                sys.exit(f"{path}: row {i}, column {j}: non-finite value")
    n = len(rows) - 1
    if n not in ACCEPTED_ROWS:
        sys.exit(f"{path}: {n} rows, expected one of {ACCEPTED_ROWS}")
    print(f"{path}: ok ({n} rows, {len(COLUMNS) - 1} features)")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/diabetes.csv")
    ap.add_argument("--check", metavar="PATH")
    args = ap.parse_args()
    if args.check:
        check(args.check)
    else:
        fetch(args.out)
        check(args.out)
