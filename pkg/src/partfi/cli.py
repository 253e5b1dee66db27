"""Command-line entry point: ``partfi <subcommand>``.

Exit codes: 0 success, 1 semantic failure (violations, unclassifiable log),
2 usage or parse failure (bad flags, unreadable file, malformed config).
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from .campaign import (
    MECHANISTIC,
    OUTCOMES,
    CampaignReport,
    EffectMode,
    TrialLog,
    UnclassifiableLog,
    classify,
    load_plan,
    run_campaign,
    run_trial,
)
from .hvmodel import InvalidConfig
from .injector import FaultPlan, Target, make_intensity
from .serial_log import ingest
from .sysconfig import ParseError, example_config, load_system_config, validate_system_config
from .workload import default_workload, profile

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(path: str | None):
    if path is None:
        return example_config()
    try:
        return load_system_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None


def _mode(args, default: EffectMode = MECHANISTIC) -> EffectMode:
    if args.mode is None:
        return default
    if args.mode == "calibrated" and default.calibrated:
        return default
    return EffectMode(args.mode)


def _write(path: str | None, text: str):
    if path is None:
        return
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)


def _table(report: CampaignReport) -> str:
    head = f"{'stratum':<28}{'trials':>7}" + "".join(f"{o.value:>17}" for o in OUTCOMES) + \
           f"{'availability':>14}"
    rows = [head]
    for s in report.strata:
        rows.append(f"{s.key:<28}{s.trials:>7}"
                    + "".join(f"{s.counts[o.value]:>17}" for o in OUTCOMES)
                    + f"{s.availability:>14.4f}")
    return "\n".join(rows)


# --------------------------------------------------------------------------
# Subcommands


def cmd_validate(args) -> int:
    cfg = _load_config(args.config_path or args.config)
    violations = validate_system_config(cfg)
    for v in violations:
        print(v)
    if not violations:
        print(f"ok: {len(cfg.cells)} non-root cell(s), digest {cfg.digest()}")
    return EXIT_FAIL if violations else EXIT_OK


def cmd_golden(args) -> int:
    cfg = _load_config(args.config)
    log = run_trial(cfg, default_workload(cfg), None, args.horizon)
    _write(args.out, log.to_jsonl())
    counts = profile(log)
    print(f"outcome {classify(log).value}")
    print("profile " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _plan_from_flags(args) -> FaultPlan | None:
    if args.target is None:
        return None
    return FaultPlan(Target(args.target), make_intensity(args.intensity, args.period, args.k),
                     args.seed, args.cpu)


def cmd_trial(args) -> int:
    cfg = _load_config(args.config)
    if args.plan:
        plan_file = load_plan(args.plan)
        if not plan_file.strata:
            raise UsageError("plan file lists no strata")
        plan, mode = plan_file.strata[0], _mode(args, plan_file.mode)
        plan = plan if plan is None else plan.with_seed(args.seed)
    else:
        plan, mode = _plan_from_flags(args), _mode(args)
    log = run_trial(cfg, default_workload(cfg), plan, args.horizon, mode)
    _write(args.out, log.to_jsonl())
    print(f"seed {args.seed} outcome {classify(log).value}")
    return EXIT_OK


def cmd_campaign(args) -> int:
    cfg = _load_config(args.config)
    if args.plan is None:
        raise UsageError("campaign needs --plan")
    plan = load_plan(args.plan)
    base_seed = plan.base_seed if args.seed is None else args.seed
    horizon = args.horizon if args.horizon is not None else plan.horizon
    out = Path(args.out) if args.out else None
    log_dir = out / "logs" if out is not None and not args.no_trial_logs else None
    report = run_campaign(cfg, default_workload(cfg), list(plan.strata), plan.trials,
                          _mode(args, plan.mode), base_seed, horizon, args.workers, log_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
    print(_table(report))
    return EXIT_OK


def cmd_ingest(args) -> int:
    try:
        text = Path(args.path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise UsageError(f"cannot read {args.path}: {exc.strerror or exc}") from None
    log, _ = ingest(text)
    outcome = classify(log)
    _write(args.out, log.to_jsonl())
    print(f"outcome {outcome.value}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        counts: Counter = Counter()
        for f in sorted(path.rglob("*.jsonl")):
            counts[classify(TrialLog.from_jsonl(f.read_text())).value] += 1
        total = sum(counts.values())
        for o in OUTCOMES:
            share = counts[o.value] / total if total else 0.0
            print(f"{o.value:<17}{counts[o.value]:>8}{share:>10.4f}")
        return EXIT_OK
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not a JSON report: {exc}") from None
    print(_table(CampaignReport.from_dict(data)))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partfi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="system config file (default: shipped example)")
        sp.add_argument("--out", help="output file or directory")

    v = sub.add_parser("validate", help="statically check a system config")
    v.add_argument("config_path", nargs="?", help="config file")
    v.add_argument("--config", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_validate)

    g = sub.add_parser("golden", help="fault-free reference run")
    common(g)
    g.add_argument("--horizon", type=int)
    g.set_defaults(func=cmd_golden)

    t = sub.add_parser("trial", help="run a single trial")
    common(t)
    t.add_argument("--plan", help="plan file; its first stratum is used")
    t.add_argument("--target", choices=[x.value for x in Target])
    t.add_argument("--cpu", type=int, help="cpu filter")
    t.add_argument("--intensity", default="medium", choices=["medium", "high"])
    t.add_argument("--period", type=int)
    t.add_argument("--k", type=int, help="registers per firing (high intensity)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--horizon", type=int)
    t.add_argument("--mode", choices=["mechanistic", "calibrated"])
    t.set_defaults(func=cmd_trial)

    c = sub.add_parser("campaign", help="run every stratum of a plan file")
    common(c)
    c.add_argument("--plan", help="YAML campaign plan")
    c.add_argument("--seed", type=int, help="override the plan's base seed")
    c.add_argument("--horizon", type=int)
    c.add_argument("--mode", choices=["mechanistic", "calibrated"])
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--no-trial-logs", action="store_true", help="skip per-trial JSONL files")
    c.set_defaults(func=cmd_campaign)

    i = sub.add_parser("ingest", help="classify a serial-console transcript")
    i.add_argument("path")
    i.add_argument("--out", help="write the normalized trial log here")
    i.set_defaults(func=cmd_ingest)

    r = sub.add_parser("report", help="print a stored report or classify a log directory")
    r.add_argument("path")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return EXIT_FAIL
    except UnclassifiableLog as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (UsageError, ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
