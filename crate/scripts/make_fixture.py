#!/usr/bin/env python3
"""Write the 20-row synthetic regression fixture and its ridge solution.

The ridge solution is computed on the standardized design (columns centred to
unit L2 norm, response centred): b = (XᵀX + (g2/v) I)⁻¹ Xᵀy.
"""
import csv

import numpy as np

rng = np.random.default_rng(20)
n, p = 20, 4
x = rng.normal(size=(n, p)) * [1.0, 3.0, 0.5, 2.0] + [0.0, 10.0, -1.0, 4.0]
y = x @ np.array([2.0, -0.5, 0.0, 1.0]) + 5.0 + 0.1 * rng.normal(size=n)

with open("data/synthetic20.csv", "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["x1", "x2", "x3", "x4", "target"])
    for row, t in zip(x, y):
        w.writerow([repr(float(v)) for v in row] + [repr(float(t))])

xc = x - x.mean(axis=0)
xs = xc / np.linalg.norm(xc, axis=0)
yc = y - y.mean()
g2, v = 0.01, 4.0
b = np.linalg.solve(xs.T @ xs + (g2 / v) * np.eye(p), xs.T @ yc)
with open("data/synthetic20_ridge.csv", "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["gamma_sq", "prior_variance"] + [f"b{j + 1}" for j in range(p)])
    w.writerow([repr(g2), repr(v)] + [repr(float(c)) for c in b])
