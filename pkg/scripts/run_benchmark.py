"""N=3 benchmark: baseline vs DWH vs FIN-DWH, medians over three training seeds.

Usage: python scripts/run_benchmark.py [--out results/benchmark.json]
"""
import argparse
import json
from pathlib import Path

from flexjoint import pipeline as pl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/benchmark.json"))
    ap.add_argument("--min-epochs", type=int, default=pl.BenchmarkConfig.min_epochs)
    ap.add_argument("--max-epochs", type=int, default=pl.BenchmarkConfig.max_epochs)
    args = ap.parse_args()
    bench = pl.BenchmarkConfig(min_epochs=args.min_epochs, max_epochs=args.max_epochs)
    res = pl.run_benchmark(bench, log_fn=lambda m: print(m, flush=True))
    keep = ("baseline", "dwh", "fin-dwh", "dwh_median", "fin-dwh_median", "runtime_s",
            "her_involution_bitwise")
    summary = {k: res[k] for k in keep}
    summary["fin_unchanged"] = res["fin_digest_before"] == res["fin_digest_after"]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(summary, indent=1, default=float))
    base, fd = res["baseline"], res["fin-dwh_median"]
    print(f"baseline e_pos {base['e_pos']:.4f}  extra {base['extra_time']:.3f} s")
    print(f"FIN-DWH  e_pos {fd['e_pos']:.4f}  extra {fd['extra_time']:.3f} s")
    print(f"DWH      e_pos {res['dwh_median']['e_pos']:.4f}")
    print(f"runtime {res['runtime_s'] / 60:.1f} min -> {args.out}")


if __name__ == "__main__":
    main()
