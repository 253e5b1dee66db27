"""Trials, outcome classification, campaigns and availability reports.

A trial log is JSON-Lines: the first line is a header, the remaining lines
are records carrying a global event index ``i`` (non-decreasing) and a
``kind``. The field catalogue lives in ``docs/FORMATS.md``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .hvmodel import (
    CLASS_DABT,
    UNHANDLED_CODE_TEXT,
    UNHANDLED_TRAP_CODE,
    CellStatus,
    CpuMode,
    HvState,
    all_root,
    cpu_executes,
    dispatch_event,
    guest_console,
    hv_enable,
    make_esr,
    record,
)
from .injector import FaultPlan, Injector, Target
from .sysconfig import RegionFlag, SystemConfig, resource_total, resource_view
from .workload import (
    WorkloadSchedule,
    boot_events,
    command_event,
    compiled_workload,
    console_digest,
    default_workload,
    expected_console,
    handoff_event,
)

LOG_FORMAT = "partfi-trial/1"


class UnclassifiableLog(ValueError):
    pass


class UnknownStratum(KeyError):
    pass


class Outcome(enum.Enum):
    CORRECT = "CORRECT"
    REJECTED_EINVAL = "REJECTED_EINVAL"
    SILENT_RUNNING = "SILENT_RUNNING"
    CPU_PARK = "CPU_PARK"
    PANIC_PARK = "PANIC_PARK"


OUTCOMES = tuple(Outcome)


# --------------------------------------------------------------------------
# Effect modes


@dataclass(frozen=True)
class EffectMode:
    """How a non-root trap injection turns into an effect.

    ``mechanistic`` decodes the corrupted context. ``calibrated`` draws one
    effect per trial from the given distribution instead.
    """

    kind: str = "mechanistic"
    p_correct: float = 0.65
    p_panic: float = 0.30
    p_park: float = 0.05
    p_silent: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mechanistic", "calibrated"):
            raise ValueError(f"unknown effect mode {self.kind!r}")
        probs = self.probabilities()
        if any(not 0.0 <= p <= 1.0 for p in probs.values()):
            raise ValueError("probabilities must lie in [0, 1]")
        if not math.isclose(sum(probs.values()), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"probabilities sum to {sum(probs.values())}, not 1")

    @property
    def calibrated(self) -> bool:
        return self.kind == "calibrated"

    def probabilities(self) -> dict[Outcome, float]:
        return {Outcome.CORRECT: self.p_correct, Outcome.PANIC_PARK: self.p_panic,
                Outcome.CPU_PARK: self.p_park, Outcome.SILENT_RUNNING: self.p_silent}

    def draw(self, seed: int) -> Outcome:
        """Effect for the trial with ``seed``; independent of the injector stream."""
        u = random.Random(f"calibrated:{seed}").random()
        acc = 0.0
        last = Outcome.CORRECT
        for outcome, p in self.probabilities().items():
            if p <= 0:
                continue
            acc += p
            last = outcome
            if u < acc:
                return outcome
        return last

    def to_dict(self) -> dict:
        if not self.calibrated:
            return {"kind": self.kind}
        return {"kind": self.kind, "p_correct": self.p_correct, "p_panic": self.p_panic,
                "p_park": self.p_park, "p_silent": self.p_silent}

    @classmethod
    def from_dict(cls, d: dict | str | None) -> EffectMode:
        if d is None:
            return MECHANISTIC
        if isinstance(d, str):
            return cls(d)
        return cls(**d)


MECHANISTIC = EffectMode("mechanistic")


def calibrated(**probs) -> EffectMode:
    return EffectMode("calibrated", **probs)


# --------------------------------------------------------------------------
# Trial logs


@dataclass
class TrialLog:
    header: dict
    records: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header, separators=(",", ":"))]
        lines += [json.dumps(r, separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + "\n"

    def body(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> TrialLog:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise UnclassifiableLog("empty log")
        try:
            rows = [json.loads(ln) for ln in lines]
        except json.JSONDecodeError as exc:
            raise UnclassifiableLog(f"corrupt log line: {exc}") from None
        if not all(isinstance(r, dict) and "kind" in r for r in rows):
            raise UnclassifiableLog("log lines must be objects with a 'kind'")
        header, records = rows[0], rows[1:]
        if header["kind"] != "header":
            raise UnclassifiableLog("first line is not a header")
        if not records or records[-1]["kind"] != "final":
            raise UnclassifiableLog("log is truncated (no final record)")
        return cls(header, records)

    def of_kind(self, kind: str):
        return (r for r in self.records if r["kind"] == kind)

    @property
    def final(self) -> dict:
        for r in reversed(self.records):
            if r["kind"] == "final":
                return r
        return {}

    def console_lines(self, cell: str | None = None) -> list[str]:
        cell = cell or self.header.get("cell")
        return [r["line"] for r in self.of_kind("console") if r["cell"] == cell]


# --------------------------------------------------------------------------
# Running one trial


def _crafted_context(state: HvState, ctx, effect: Outcome):
    """Context that makes the trap handler produce ``effect``."""
    if effect is Outcome.CPU_PARK:
        return ctx.__class__(ctx.r, make_esr(UNHANDLED_TRAP_CODE))
    root = state.cfg.root
    target = next((r for r in root.regions if not r.shared), root.regions[0])
    r = list(ctx.r)
    r[2] = target.base + min(0x1000, target.size - 1)
    return ctx.__class__(tuple(r), make_esr(CLASS_DABT, 0x93))


def _silent_entry(cfg: SystemConfig, cell: str, ctx):
    """Handoff context whose pc lies outside every executable region of ``cell``."""
    pc = ctx.pc
    regions = [r for r in cfg.cell(cell).regions if RegionFlag.EXECUTE in r.flags]
    for bit in range(31, -1, -1):
        cand = pc ^ (1 << bit)
        if not any(r.contains(cand) for r in regions):
            r = list(ctx.r)
            r[15] = cand
            return ctx.__class__(tuple(r), ctx.esr)
    return ctx


class _Trial:
    """Mutable driver for one trial; holds the state value and the log."""

    def __init__(self, cfg, schedule, plan, mode, seed):
        self.state = hv_enable(cfg)
        self.records: list[dict] = []
        self.i = 0
        self.injector = Injector(plan) if plan is not None else None
        self.mode = mode
        self.effect = mode.draw(seed) if mode.calibrated and plan is not None else None
        self.effect_spent = False
        self.cell = schedule.cell
        self.skipped = 0

    def _non_root_running(self, cpu: int) -> bool:
        cs = self.state.cpus[cpu]
        return cs.mode is CpuMode.RUNNING and cs.cell not in (None, self.state.cfg.root.name)

    def feed(self, ev, handoff: bool = False) -> list[dict]:
        """Intercept, (maybe) recalibrate and dispatch one event."""
        i = self.i
        self.i += 1
        original = ev
        inj = None
        if self.injector is not None and not self.state.panic and cpu_executes(self.state, ev.cpu):
            ev, inj = self.injector.intercept(ev, i)
        if self.effect is not None:
            ev, applied = self._calibrate(original, ev, inj, handoff)
        else:
            applied = True
        if inj is not None:
            rec = inj.to_record()
            if not applied:
                rec["applied"] = False
            self.records.append(rec)
        self.state, out = dispatch_event(self.state, ev, i)
        self.records.extend(out)
        return out

    def _calibrate(self, original, ev, inj, handoff):
        if handoff and self.effect is Outcome.SILENT_RUNNING and not self.effect_spent:
            self.effect_spent = True
            return ev._replace(ctx=_silent_entry(self.state.cfg, self.cell, original.ctx)), True
        if inj is None:
            return ev, True
        if inj.target is not Target.TRAP or not self._non_root_running(ev.cpu) or handoff:
            return ev, True  # only non-root trap injections are recalibrated
        if not self.effect_spent and self.effect in (Outcome.PANIC_PARK, Outcome.CPU_PARK):
            self.effect_spent = True
            return ev._replace(ctx=_crafted_context(self.state, original.ctx, self.effect)), True
        return original, False

    def command(self, op: str) -> str:
        out = self.feed(command_event(self.state.cfg, op, self.cell))
        hvc = next((r for r in out if r["kind"] == "hvc"), None)
        result = hvc["result"] if hvc is not None else "SKIPPED"
        self.records.append(record(self.i - 1, "cmd", op=op, cell=self.cell, result=result))
        return result

    def phase(self, name: str):
        self.records.append(record(self.i, "phase", name=name))


def trial_header(cfg, schedule, plan, horizon, mode, seed) -> dict:
    count, digest = expected_console(schedule, horizon)
    return {
        "kind": "header",
        "format": LOG_FORMAT,
        "config_digest": cfg.digest(),
        "root": cfg.root.name,
        "cell": schedule.cell,
        "plan": None if plan is None else plan.to_dict(),
        "seed": seed,
        "horizon": horizon,
        "mode": mode.to_dict(),
        "schedule": schedule.to_dict(),
        "golden": [count, digest],
    }


def run_trial(cfg: SystemConfig, schedule: WorkloadSchedule | None = None,
              plan: FaultPlan | None = None, horizon: int | None = None,
              mode: EffectMode = MECHANISTIC) -> TrialLog:
    """Boot, start the non-root cell, run the workload, then tear down."""
    schedule = schedule or default_workload(cfg)
    horizon = schedule.horizon if horizon is None else horizon
    if horizon != schedule.horizon:
        schedule = WorkloadSchedule(schedule.tasks, horizon, schedule.boot_calls, schedule.cell)
    seed = plan.seed if plan is not None else 0
    t = _Trial(cfg, schedule, plan, mode, seed)
    header = trial_header(cfg, schedule, plan, horizon, mode, seed)
    if t.effect is not None:
        header["effect"] = t.effect.value

    t.phase("boot")
    for ev in boot_events(schedule, cfg):
        t.feed(ev)

    t.phase("commands")
    if t.command("create") == "OK" and t.command("start") == "OK":
        for cpu in sorted(cfg.cell(t.cell).cpus):
            t.feed(handoff_event(cfg, t.cell, cpu), handoff=True)

    t.phase("workload")
    halted = False
    for ev, line, cell in compiled_workload(schedule, cfg):
        if t.state.panic:
            halted = True
            break
        if not cpu_executes(t.state, ev.cpu):
            t.skipped += 1
            t.i += 1
            continue
        t.feed(ev)
        if line is not None:
            rec = guest_console(t.state, ev.cpu, cell, line, t.i - 1)
            if rec is not None:
                t.records.append(rec)

    t.phase("teardown")
    if not t.state.panic:
        if t.state.status(t.cell) is CellStatus.RUNNING:
            t.command("shutdown")
        if t.state.status(t.cell) in (CellStatus.SHUT_DOWN, CellStatus.FAILED):
            t.command("destroy")

    st = t.state
    t.records.append(record(
        t.i, "final",
        root=st.root_status.value,
        cells={n: s.value for n, s in st.cells.items()},
        cpus=[[c.id, c.mode.value, c.cell] for c in st.cpus],
        panic=st.panic,
        counters=st.counters._asdict(),
        all_root=all_root(st),
        conserved=resource_total(st.ownership) == resource_total(resource_view(cfg, ())),
        skipped=t.skipped,
        halted=halted,
    ))
    return TrialLog(header, t.records)


def replay(log: TrialLog, cfg: SystemConfig) -> TrialLog:
    """Re-run a trial from its header alone."""
    h = log.header
    if h["config_digest"] != cfg.digest():
        raise ValueError("log was produced with a different configuration")
    schedule = WorkloadSchedule.from_dict(h["schedule"])
    plan = None if h["plan"] is None else FaultPlan.from_dict(h["plan"])
    return run_trial(cfg, schedule, plan, h["horizon"], EffectMode.from_dict(h["mode"]))


# --------------------------------------------------------------------------
# Classification


def classify(log: TrialLog) -> Outcome:
    """Map a complete trial log to exactly one outcome; first rule wins."""
    cell = log.header.get("cell")
    golden = log.header.get("golden")
    records = log.records
    lifecycle = [r for r in records if r["kind"] == "lifecycle"]

    if any(r["kind"] == "panic" for r in records):
        return Outcome.PANIC_PARK
    if any(r["kind"] == "park" and r.get("code") == UNHANDLED_CODE_TEXT for r in records) \
            and any(r["new"] == CellStatus.FAILED.value for r in lifecycle):
        return Outcome.CPU_PARK

    reached = any(r["cell"] == cell and r["new"] == CellStatus.RUNNING.value for r in lifecycle)
    lines = log.console_lines(cell)
    if reached and not lines and (golden is None or golden[0] > 0):
        return Outcome.SILENT_RUNNING
    rejected = any(r["kind"] == "cmd" and r["op"] in ("create", "start")
                   and r["result"] == "EINVAL" for r in records)
    if rejected and not reached:
        return Outcome.REJECTED_EINVAL

    if golden is not None:
        if list(console_digest(lines)) == list(golden):
            return Outcome.CORRECT
        raise UnclassifiableLog(
            f"console has {len(lines)} lines, golden expects {golden[0]}; log is incomplete")
    if lines:
        return Outcome.CORRECT
    raise UnclassifiableLog("no outcome evidence in log")


def isolation_holds(log: TrialLog) -> bool:
    """Root still running, the failed cell destroyed and every resource back home."""
    fin = log.final
    destroyed = any(r["kind"] == "cmd" and r["op"] == "destroy" and r["result"] == "OK"
                    for r in log.records)
    return (fin.get("root") == CellStatus.RUNNING.value and destroyed
            and bool(fin.get("conserved")) and bool(fin.get("all_root")))


# --------------------------------------------------------------------------
# Campaigns


def stratum_key(plan: FaultPlan | None) -> str:
    if plan is None:
        return "golden"
    cpu = "any" if plan.cpu_filter is None else str(plan.cpu_filter)
    key = f"{plan.target.value}/cpu{cpu}/{plan.intensity.name}"
    default = {"medium": 100, "high": 50}.get(plan.intensity.name)
    if plan.intensity.period != default:
        key += f"/p{plan.intensity.period}"
    if plan.intensity.registers not in (None, 1):
        key += f"/k{plan.intensity.registers}"
    if plan.slots is not None:
        key += "/slots"
    return key


@dataclass
class StratumResult:
    key: str
    plan: dict | None
    trials: int = 0
    counts: dict[str, int] = field(default_factory=lambda: {o.value: 0 for o in OUTCOMES})
    isolation_failures: int = 0

    @property
    def proportions(self) -> dict[str, float]:
        return {k: (v / self.trials if self.trials else 0.0) for k, v in self.counts.items()}

    @property
    def availability(self) -> float:
        return self.counts[Outcome.CORRECT.value] / self.trials if self.trials else 0.0

    def to_dict(self) -> dict:
        return {"key": self.key, "plan": self.plan, "trials": self.trials,
                "counts": dict(self.counts), "proportions": self.proportions,
                "availability": self.availability,
                "isolation_failures": self.isolation_failures}


@dataclass
class CampaignReport:
    config_digest: str
    mode: dict
    base_seed: int
    trials: int
    horizon: int
    strata: list[StratumResult]

    def stratum(self, key: str) -> StratumResult:
        for s in self.strata:
            if s.key == key:
                return s
        raise UnknownStratum(key)

    def to_dict(self) -> dict:
        return {"config_digest": self.config_digest, "mode": self.mode,
                "base_seed": self.base_seed, "trials_per_stratum": self.trials,
                "horizon": self.horizon,
                "seeds": [self.base_seed, self.base_seed + self.trials * len(self.strata) - 1],
                "strata": [s.to_dict() for s in self.strata]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stratum", "trials", *(o.value for o in OUTCOMES), "availability"])
        for s in self.strata:
            w.writerow([s.key, s.trials, *(s.counts[o.value] for o in OUTCOMES),
                        f"{s.availability:.4f}"])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> CampaignReport:
        strata = []
        for s in d["strata"]:
            res = StratumResult(s["key"], s["plan"], s["trials"], dict(s["counts"]),
                                s.get("isolation_failures", 0))
            strata.append(res)
        return cls(d["config_digest"], d["mode"], d["base_seed"], d["trials_per_stratum"],
                   d["horizon"], strata)


def availability(report: CampaignReport, key: str) -> float:
    return report.stratum(key).availability


def trial_seed(base_seed: int, ordinal: int) -> int:
    return base_seed + ordinal


@dataclass(frozen=True)
class TrialResult:
    stratum: int
    ordinal: int
    outcome: Outcome
    isolated: bool | None  # only meaningful for CPU_PARK trials


def aggregate(results, strata_plans) -> list[StratumResult]:
    """Fold trial results into per-stratum counts; result order is irrelevant."""
    out = [StratumResult(stratum_key(p), None if p is None else p.to_dict()) for p in strata_plans]
    for res in results:
        s = out[res.stratum]
        s.trials += 1
        s.counts[res.outcome.value] += 1
        if res.outcome is Outcome.CPU_PARK and res.isolated is False:
            s.isolation_failures += 1
    for s in out:
        if s.plan is not None:
            s.plan.pop("seed", None)
    return out


def _run_one(args) -> tuple[TrialResult, str | None]:
    cfg, schedule, plan, horizon, mode, idx, ordinal, keep = args
    log = run_trial(cfg, schedule, plan, horizon, mode)
    outcome = classify(log)
    isolated = isolation_holds(log) if outcome is Outcome.CPU_PARK else None
    return TrialResult(idx, ordinal, outcome, isolated), (log.to_jsonl() if keep else None)


def run_campaign(cfg: SystemConfig, schedule: WorkloadSchedule | None, strata: list,
                 trials: int, mode: EffectMode = MECHANISTIC, base_seed: int = 0,
                 horizon: int | None = None, workers: int = 1,
                 log_dir: str | Path | None = None) -> CampaignReport:
    """Run ``trials`` trials per stratum; a stratum is a FaultPlan or None."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    schedule = schedule or default_workload(cfg)
    horizon = schedule.horizon if horizon is None else horizon
    jobs = []
    for idx, plan in enumerate(strata):
        for t in range(trials):
            ordinal = idx * trials + t
            p = None if plan is None else plan.with_seed(trial_seed(base_seed, ordinal))
            jobs.append((cfg, schedule, p, horizon, mode, idx, ordinal, log_dir is not None))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (workers * 8))))
    else:
        done = [_run_one(j) for j in jobs]

    if log_dir is not None:
        root = Path(log_dir)
        for res, text in done:
            d = root / stratum_key(strata[res.stratum]).replace("/", "_")
            d.mkdir(parents=True, exist_ok=True)
            (d / f"trial-{res.ordinal:06d}.jsonl").write_text(text)

    results = [res for res, _ in done]
    return CampaignReport(cfg.digest(), mode.to_dict(), base_seed, trials, horizon,
                          aggregate(results, strata))


# --------------------------------------------------------------------------
# Plan files


@dataclass(frozen=True)
class CampaignPlan:
    strata: tuple
    trials: int = 100
    mode: EffectMode = MECHANISTIC
    base_seed: int = 0
    horizon: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> CampaignPlan:
        if not isinstance(d, dict) or "strata" not in d:
            raise ValueError("plan needs a 'strata' list")
        strata = []
        for s in d["strata"]:
            if s is None or s == "none":
                strata.append(None)
            else:
                strata.append(FaultPlan.from_dict(s))
        mode = d.get("mode", "mechanistic")
        if isinstance(mode, str) and mode == "calibrated":
            mode = {"kind": "calibrated", **d.get("calibration", {})}
        return cls(tuple(strata), int(d.get("trials", 100)), EffectMode.from_dict(mode),
                   int(d.get("base_seed", 0)), d.get("horizon"))


def load_plan(path) -> CampaignPlan:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValueError(f"malformed plan file {path}: {exc}") from None
    return CampaignPlan.from_dict(data)
