"""Hyperparameter grids: alpha/r x lr_ratio, and the rank sweep.

Both grids share one pretrained base. Each cell is a full FedPelad run, so
the 4x4 grid alone is ~16 default-run equivalents of FedPelad.

    python3 scripts/sweep_tables.py [--quick]
"""

import argparse
import csv
import logging
from pathlib import Path

from fedpelad.config import parse_config
from fedpelad.experiment import prepare, sweep


def pivot(cells, row_key, col_key):
    rows = sorted({getattr(c, row_key) for c in cells})
    cols = sorted({getattr(c, col_key) for c in cells})
    table = {(getattr(c, row_key), getattr(c, col_key)): c.nmse_db_avg for c in cells}
    head = f"| {row_key} \\ {col_key} | " + " | ".join(f"{c:g}" for c in cols) + " |"
    lines = [head, "|" + "---|" * (len(cols) + 1)]
    for r in rows:
        lines.append(f"| {r:g} | " + " | ".join(f"{table[r, c]:.2f}" for c in cols) + " |")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.cfg")
    ap.add_argument("--out", default="results/sweeps")
    ap.add_argument("--quick", action="store_true", help="2x2 ratio grid and ranks 2,8 only")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base_cfg = parse_config(args.config)
    prep = prepare(base_cfg)
    alphas = (1.0, 4.0) if args.quick else (0.5, 1.0, 2.0, 4.0)
    ratios = (0.5, 5.0) if args.quick else (0.5, 1.0, 5.0, 10.0)
    ranks = (2, 8) if args.quick else (2, 4, 8, 16, 32)

    grid = sweep(base_cfg.with_overrides(out_dir=str(Path(args.out) / "ratio_grid")),
                 {"alpha_ratio": alphas, "lr_ratio": ratios}, prepared=prep)
    print("average NMSE (dB), FedPelad")
    print(pivot(grid, "alpha_ratio", "lr_ratio"))

    rank_cells = sweep(base_cfg.with_overrides(out_dir=str(Path(args.out) / "rank")),
                       {"rank": ranks}, prepared=prep)
    print()
    print("| r | avg NMSE (dB) | rCUC |")
    print("|---|---|---|")
    for c in rank_cells:
        print(f"| {c.rank} | {c.nmse_db_avg:.2f} | {100 * float(c.rcuc):.2f}% |")


if __name__ == "__main__":
    main()
