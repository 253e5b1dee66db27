#!/usr/bin/env python3
"""Availability per stratum for a campaign plan, written as JSON and CSV.

    python scripts/fig3_availability.py --plan src/partfi/plans/fig3_calibrated.yaml --out out/fig3

Optionally draws a bar chart when matplotlib is importable.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from partfi.campaign import OUTCOMES, load_plan, run_campaign
from partfi.sysconfig import example_config, load_system_config
from partfi.workload import default_workload

DEFAULT_PLAN = Path(__file__).resolve().parents[1] / "src/partfi/plans/fig3_calibrated.yaml"


def plot(report, path: Path) -> bool:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    keys = [s.key for s in report.strata]
    fig, ax = plt.subplots(figsize=(1.6 * len(keys) + 2, 3.5))
    bottom = [0.0] * len(keys)
    for o in OUTCOMES:
        vals = [s.proportions[o.value] for s in report.strata]
        ax.bar(keys, vals, bottom=bottom, label=o.value)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_ylabel("share of trials")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return True


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--plan", default=str(DEFAULT_PLAN))
    ap.add_argument("--config")
    ap.add_argument("--trials", type=int, help="override the plan's trial count")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="out/fig3")
    args = ap.parse_args(argv)

    cfg = load_system_config(args.config) if args.config else example_config()
    plan = load_plan(args.plan)
    t0 = time.perf_counter()
    report = run_campaign(cfg, default_workload(cfg), list(plan.strata), args.trials or plan.trials,
                          plan.mode, plan.base_seed, plan.horizon, args.workers)
    elapsed = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    for s in report.strata:
        shares = " ".join(f"{k}={v:.4f}" for k, v in s.proportions.items())
        print(f"{s.key}: availability={s.availability:.4f} {shares}")
    print(f"{sum(s.trials for s in report.strata)} trials in {elapsed:.1f}s -> {out}")
    if plot(report, out / "availability.png"):
        print(f"chart: {out / 'availability.png'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
