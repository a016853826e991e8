#!/usr/bin/env python3
"""Print per-forward-step medians and return correlations from a report.csv
produced by the evaluate stage."""

import argparse
import sys

from weightpath import evalkit


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", help="path to report.csv")
    args = ap.parse_args(argv)

    report = evalkit.read_report_csv(args.csv)
    if not report.rows:
        print("empty report")
        return 0
    med_wpe = report.median_per_step("wpe")
    med_repw = report.median_per_step("repw")
    print(f"{'step':>4}  {'median WPE':>12}  {'median REPW':>12}")
    for s in sorted(med_wpe):
        print(f"{s:>4}  {med_wpe[s]:>12.4e}  {med_repw[s]:>12.4f}")
    try:
        pts, pearson, spearman = evalkit.scatter_table(report)
        print(f"\nreturn scatter: {len(pts)} points, "
              f"pearson {pearson}, spearman {spearman}")
    except evalkit.EvalError as e:
        print(f"\nreturn scatter unavailable: {e}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
