"""Run a delay sweep and print the causal vs acausal table per scene.

    python scripts/delta_sweep.py [config] [--out DIR]

Defaults to the bundled desk-scale config.
"""

import argparse
from importlib import resources
from pathlib import Path

from ssanc.experiment import emit_results, load_config, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default=str(resources.files("ssanc").joinpath("configs", "desk_scale.cfg")))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    rows = run_experiment(cfg)
    out = Path(args.out or cfg.output_dir)
    emit_results(rows, out)

    la_lo, la_hi = min(cfg.sweep.la_list), max(cfg.sweep.la_list)
    for sc in cfg.scenes:
        for bd in sorted(set(cfg.sweep.beta_divisors)):
            by = {(r.delta, r.l_a): r for r in rows if r.scenario_id == sc.id and r.beta_divisor == bd}
            print(f"\n{sc.id}  beta = lambda1 / {bd:g}")
            print(f"{'Delta':>5} {'SD causal':>10} {'SD acausal':>11} {'dSNR causal':>12} {'dSNR acausal':>13}")
            for delta in sorted({k[0] for k in by}):
                c, a = by[(delta, la_lo)], by[(delta, la_hi)]
                print(f"{delta:5d} {c.sd_db:10.2f} {a.sd_db:11.2f} {c.dsnr_db:12.2f} {a.dsnr_db:13.2f}")
    print(f"\nresults in {out}")


if __name__ == "__main__":
    main()
