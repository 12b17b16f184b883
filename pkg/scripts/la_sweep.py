"""Sweep the anti-causal ReIR extent and print SD / NR per delay.

    python scripts/la_sweep.py [config] [--out DIR]
"""

import argparse
from importlib import resources
from pathlib import Path

from ssanc.experiment import emit_results, load_config, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default=str(resources.files("ssanc").joinpath("configs", "la_plateau.cfg")))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    rows = run_experiment(cfg)
    out = Path(args.out or cfg.output_dir)
    emit_results(rows, out)
    for sc in cfg.scenes:
        for delta in sorted(set(cfg.sweep.delta_list)):
            print(f"\n{sc.id}  Delta = {delta}")
            print(f"{'L_a':>4} {'SD (dB)':>9} {'NR (dB)':>9} {'dSNR (dB)':>10}")
            for r in (r for r in rows if r.scenario_id == sc.id and r.delta == delta):
                print(f"{r.l_a:4d} {r.sd_db:9.2f} {r.nr_db:9.2f} {r.dsnr_db:10.2f}")


if __name__ == "__main__":
    main()
