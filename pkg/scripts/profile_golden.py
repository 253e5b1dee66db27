#!/usr/bin/env python3
"""Time the golden run and print the handler-call profile used to pick intensities."""

from __future__ import annotations

import argparse
import cProfile
import pstats
import sys
import time

from partfi.sysconfig import example_config
from partfi.workload import default_workload, golden_run, profile


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizon", type=int, default=10_000)
    ap.add_argument("--cprofile", action="store_true")
    args = ap.parse_args(argv)

    cfg = example_config()
    schedule = default_workload(cfg, args.horizon)
    t0 = time.perf_counter()
    log = golden_run(cfg, schedule)
    elapsed = time.perf_counter() - t0
    counts = profile(log)
    print(f"horizon {args.horizon}: {elapsed:.3f}s, {len(log.records)} records")
    for kind, n in counts.items():
        print(f"  {kind:<5}{n:>7}  medium fires {n // 100:>4}  high fires {n // 50:>4}")
    if args.cprofile:
        prof = cProfile.Profile()
        prof.runcall(golden_run, cfg, schedule)
        pstats.Stats(prof).sort_stats("cumulative").print_stats(15)
    return 0


if __name__ == "__main__":
    sys.exit(main())
