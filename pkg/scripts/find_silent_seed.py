#!/usr/bin/env python3
"""Search seeds for a trial where the guest is RUNNING but never prints anything."""

from __future__ import annotations

import argparse
import sys

from partfi.campaign import Outcome, classify, run_trial
from partfi.injector import FaultPlan, Target, make_intensity
from partfi.serial_log import to_serial
from partfi.sysconfig import example_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-seeds", type=int, default=10_000)
    ap.add_argument("--intensity", default="high", choices=["medium", "high"])
    ap.add_argument("--cpu", type=int, default=1)
    ap.add_argument("--horizon", type=int)
    ap.add_argument("--show", action="store_true", help="print the serial transcript")
    args = ap.parse_args(argv)

    cfg = example_config()
    intensity = make_intensity(args.intensity)
    for seed in range(args.max_seeds):
        log = run_trial(cfg, None, FaultPlan(Target.TRAP, intensity, seed, args.cpu), args.horizon)
        if classify(log) is Outcome.SILENT_RUNNING:
            parks = [r for r in log.records if r["kind"] == "park"]
            flip = next(r for r in log.records if r["kind"] == "inject")["flips"]
            print(f"seed {seed}: SILENT_RUNNING (handoff flips {flip}, parks {parks})")
            if args.show:
                print("\n".join(to_serial(log)))
            return 0
    print(f"no silent-running trial in {args.max_seeds} seeds")
    return 1


if __name__ == "__main__":
    sys.exit(main())
