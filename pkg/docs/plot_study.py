#!/usr/bin/env python3
"""Plot a study CSV: covariance trace and bias norm against batch size.

Usage: python docs/plot_study.py out/study/study.csv [plot.png]
"""

import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main() -> int:
    path = sys.argv[1] if len(sys.argv) > 1 else "out/study/study.csv"
    out = sys.argv[2] if len(sys.argv) > 2 else "study.png"
    rows = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows[rec["estimator"]].append(
                (int(rec["n"]), float(rec["bias_norm"]),
                 float(rec["cov_trace"])))
    fig, (ax_var, ax_bias) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, points in sorted(rows.items()):
        points.sort()
        ns = [p[0] for p in points]
        if len(ns) < 2:
            continue
        ax_bias.plot(ns, [p[1] for p in points], marker="o", label=name)
        ax_var.plot(ns, [p[2] for p in points], marker="o", label=name)
    for ax, title in ((ax_var, "covariance trace"), (ax_bias, "bias norm")):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("calibration batch size n")
        ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
    ax_var.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
