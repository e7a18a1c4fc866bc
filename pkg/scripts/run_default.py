"""Run the default five-strategy comparison and print the per-UE table.

    python3 scripts/run_default.py [--config configs/default.cfg] [--out results/default]
"""

import argparse
import logging

from fedpelad.config import parse_config
from fedpelad.experiment import comparison_markdown, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.cfg")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = parse_config(args.config)
    if args.out:
        cfg = cfg.with_overrides(out_dir=args.out)
    bundle = run_experiment(cfg)
    print(comparison_markdown(bundle.comparison))
    for s, h in bundle.histories.items():
        print(f"{s.value:>13}: round 0 {h.records[0].nmse_db_avg:7.2f} dB -> final {h.final.nmse_db_avg:7.2f} dB")
    print(f"artifacts in {cfg.run.out_dir}")


if __name__ == "__main__":
    main()
