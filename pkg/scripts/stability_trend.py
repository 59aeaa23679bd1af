"""Per-step grad-norm spread of PCR versus the plain sum across seeds.

Trains the engineered-conflict reverse task once per (seed, mode) and writes a
CSV with the grad-norm standard deviation, conflict fraction, final reward and
final KL to the frozen reference.

    python scripts/stability_trend.py --config configs/reverse_conflict.ini --seeds 5 --out results/trend.csv
"""

import argparse
from pathlib import Path

from pcr_lab.harness.config import load_config
from pcr_lab.harness.trend import compare, wins, write_outcomes_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "reverse_conflict.ini"))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--modes", default="pcr,sum")
    ap.add_argument("--out", default="results/trend.csv")
    args = ap.parse_args()

    cfg = load_config(args.config)
    modes = tuple(args.modes.split(","))
    outcomes = compare(cfg, range(args.seeds), modes)
    for o in outcomes:
        print(f"seed {o.seed} {o.mode:11s} grad-norm std {o.grad_norm_std:.4f} mean {o.grad_norm_mean:.4f} "
              f"conflict {o.conflict_fraction:.3f} reward {o.final_reward:.3f} kl {o.final_kl:.3f}")
    if {"pcr", "sum"} <= set(modes):
        won, n = wins(outcomes)
        print(f"PCR spread <= sum spread in {won}/{n} seeds")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_outcomes_csv(outcomes, out)


if __name__ == "__main__":
    main()
