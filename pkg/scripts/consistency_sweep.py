"""Median complete-data sup error against sample size for the bump/logistic example.

    python3 scripts/consistency_sweep.py --threads 2
"""

import argparse
from dataclasses import replace
from pathlib import Path

from msnar.experiments import load_config, run

HERE = Path(__file__).resolve().parent


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=HERE / "configs" / "consistency_sweep.json")
    p.add_argument("--output-dir", type=Path, default=Path("out/sweep"))
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    cfg = load_config(args.config, "consistency-sweep")
    cfg = replace(cfg, output_dir=args.output_dir, threads=args.threads)
    table = run(cfg)["results"]["sweep"]
    print(f"{'n':>6}  " + "  ".join(f"regime {i + 1:>2}" for i in range(cfg.model.m)))
    for n, row in zip(table["ns"], table["median_sup_error"]):
        print(f"{n:>6}  " + "  ".join(f"{v:9.4f}" for v in row))
    print("monotone nonincreasing:", table["monotone_nonincreasing"])
    print("last/first:", ", ".join(f"{v:.3f}" for v in table["last_over_first"]))


if __name__ == "__main__":
    main()
