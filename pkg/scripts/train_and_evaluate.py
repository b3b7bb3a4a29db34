"""Train every model on a fresh dataset and run the ablation and payload studies.

Smaller than the full benchmark by default; pass --minutes 45 --epochs 500 for full scale.
"""
import argparse
from dataclasses import replace

from flexjoint import pipeline as pl
from flexjoint.models import FinDwhModel, build_dwh, build_fc_baseline, build_rnn_baseline
from flexjoint.sim import ArmConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-joints", type=int, default=3)
    ap.add_argument("--minutes", type=float, default=15.0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--n-tests", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    arm = ArmConfig(n_joints=args.n_joints)
    records = pl.generate_dataset(arm, pl.DatasetConfig(minutes=args.minutes, seed=args.seed))
    print(f"{len(records)} records")
    fin = pl.train_fin(records, replace(pl.DEFAULT_TRAIN["fin"], seed=args.seed,
                                        epochs=min(args.epochs, 200))).model
    inverted = pl.her_invert(records)
    models = {}
    for key, name in (("fc", "FC"), ("rnn", "RNN"), ("dwh", "DWH"), ("fin-dwh", "FIN-DWH")):
        cfg = replace(pl.DEFAULT_TRAIN[key], seed=args.seed, epochs=args.epochs,
                      min_epochs=min(150, args.epochs))
        train, val = pl.split_records(inverted, cfg.val_fraction, args.seed)
        model = {"fc": lambda: build_fc_baseline(args.n_joints, args.seed),
                 "rnn": lambda: build_rnn_baseline(args.n_joints, 14, args.seed),
                 "dwh": lambda: build_dwh(args.n_joints, seed=args.seed),
                 "fin-dwh": lambda: FinDwhModel(args.n_joints, fin, args.seed)}[key]()
        res = pl.train_model(model, train, val, cfg, sequence=key != "fc")
        models[name] = res.model
        print(f"{name}: {len(res.val_loss)} epochs, best val {min(res.val_loss):.3g}")

    exp = pl.ExperimentConfig(n_tests=args.n_tests, payload_tests=args.n_tests, seed=args.seed)
    for kind in ("ablation_table", "payload_study"):
        report = pl.run_experiment(kind, arm, exp, models, jobs=args.jobs)
        print(f"\n{kind}")
        for row in report.rows:
            print(f"  {row['model']:8s} {str(row['condition']):5s} e_pos {row['e_pos']:.4f} "
                  f"({row.get('e_pos_improvement_pct', 0.0):+.1f}%)  extra {row['extra_time']:.3f} s")


if __name__ == "__main__":
    main()
