"""Baseline tracking error against maximum joint speed (no training needed)."""
import argparse

from flexjoint import pipeline as pl
from flexjoint.sim import ArmConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-joints", type=int, default=3)
    ap.add_argument("--tests", type=int, default=20)
    ap.add_argument("--speeds", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 1.0, 1.2])
    args = ap.parse_args()
    cfg = pl.ExperimentConfig(speeds=tuple(args.speeds), speed_tests=args.tests)
    report = pl.run_experiment("speed_sweep", ArmConfig(n_joints=args.n_joints), cfg, {})
    print("max_speed  e_pos      ci        extra_time")
    for row in report.rows:
        print(f"{row['condition']:8.2f}  {row['e_pos']:.5f}  {row['e_pos_ci']:.5f}  {row['extra_time']:.3f}")


if __name__ == "__main__":
    main()
