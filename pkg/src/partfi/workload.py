"""Abstract guest workloads that drive the hypervisor model.

The root cell runs a management task (periodic hypercalls) and a consumer
reading the shared channel; the non-root cell runs the task set of the
reference FreeRTOS deployment: one blinker, a sender/receiver pair, two
floating-point and fifteen integer tasks.

Each event index ``i`` maps to exactly one task activation: the first task,
in priority order, whose ``(i - phase) % period == 0``. Indices no task claims
become idle timer ticks on the non-root cpu.
"""

from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass

from .hvmodel import (
    CLASS_BENIGN,
    CLASS_DABT,
    HC_CELL_CREATE,
    HC_CELL_DESTROY,
    HC_CELL_GET_STATE,
    HC_CELL_SHUTDOWN,
    HC_CELL_START,
    Event,
    Hypercall,
    HvState,
    Irq,
    RegisterContext,
    Trap,
    cell_id,
    entry_context,
    handle_for,
    make_esr,
)
from .sysconfig import RegionFlag, SystemConfig

DEFAULT_HORIZON = 10_000
# Root-cell activity before the lifecycle commands: this many hypercalls on
# the root's first cpu and this many traps on every root cpu. With 49, the
# cell create and the start handoff are the 50th call on their cpu.
DEFAULT_BOOT_CALLS = 49


class MissingChannel(ValueError):
    pass


class TaskKind(enum.Enum):
    BLINK = "blink"
    SENDER = "send"
    RECEIVER = "recv"
    FP_ARITH = "fp"
    INT_ARITH = "int"
    MANAGE = "mgmt"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    period: int
    cell: str
    phase: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("task period must be >= 1")

    def activates(self, i: int) -> bool:
        return (i - self.phase) % self.period == 0


@dataclass(frozen=True)
class WorkloadSchedule:
    tasks: tuple[TaskSpec, ...]
    horizon: int = DEFAULT_HORIZON
    boot_calls: int = DEFAULT_BOOT_CALLS
    cell: str = ""  # the non-root cell under test

    def to_dict(self) -> dict:
        return {
            "cell": self.cell,
            "horizon": self.horizon,
            "boot_calls": self.boot_calls,
            "tasks": [[t.kind.value, t.period, t.cell, t.phase] for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSchedule:
        tasks = tuple(TaskSpec(TaskKind(k), p, c, ph) for k, p, c, ph in d["tasks"])
        return cls(tasks, d["horizon"], d["boot_calls"], d["cell"])

    def task_at(self, i: int) -> int | None:
        for n, t in enumerate(self.tasks):
            if t.activates(i):
                return n
        return None


def _channel_cell(cfg: SystemConfig):
    for cell in cfg.cells:
        comm = cell.comm_region()
        if comm is not None and comm.shared:
            return cell, comm
    raise MissingChannel("no non-root cell declares a SHARED comm region")


def default_workload(cfg: SystemConfig, horizon: int = DEFAULT_HORIZON) -> WorkloadSchedule:
    cell, comm = _channel_cell(cfg)
    root = cfg.root.name
    tasks = [TaskSpec(TaskKind.BLINK, 50, cell.name, 25),
             TaskSpec(TaskKind.MANAGE, 10, root, 5)]
    if any(r.shared and (r.base, r.size) == (comm.base, comm.size) for r in cfg.root.regions):
        tasks.append(TaskSpec(TaskKind.RECEIVER, 20, root, 9))
    tasks += [
        TaskSpec(TaskKind.SENDER, 13, cell.name, 0),
        TaskSpec(TaskKind.RECEIVER, 13, cell.name, 6),
        TaskSpec(TaskKind.FP_ARITH, 23, cell.name, 1),
        TaskSpec(TaskKind.FP_ARITH, 23, cell.name, 12),
    ]
    # fifteen integer tasks, together claiming every sixth index
    tasks += [TaskSpec(TaskKind.INT_ARITH, 90, cell.name, 6 * j + 2) for j in range(15)]
    return WorkloadSchedule(tuple(tasks), horizon, DEFAULT_BOOT_CALLS, cell.name)


# --------------------------------------------------------------------------
# Event construction


def _first_cpu(cfg: SystemConfig, cell: str) -> int:
    return min(cfg.cell(cell).cpus)


def _own_scratch(cfg: SystemConfig, cell: str, slot: int) -> int:
    """An address inside the cell's first writable region (stack area)."""
    for r in cfg.cell(cell).regions:
        if RegionFlag.WRITE in r.flags and not r.shared:
            return r.end - 0x100 - 4 * slot
    return 0


@functools.lru_cache(maxsize=32)
def _task_events(schedule: WorkloadSchedule, cfg: SystemConfig) -> tuple:
    """One (event, console prefix) pair per task; contexts are fixed per task."""
    comm_cell, comm = _channel_cell(cfg)
    target = cfg.cell(schedule.cell) if schedule.cell else comm_cell
    vectors = sorted(target.irqs)
    out = []
    for n, t in enumerate(schedule.tasks):
        cpu = _first_cpu(cfg, t.cell)
        code_base = min((r.base for r in cfg.cell(t.cell).regions
                         if RegionFlag.EXECUTE in r.flags), default=0)
        common = dict(r1=n, r3=0x1000 + n, sp=_own_scratch(cfg, t.cell, 0) + 0x80,
                      lr=code_base + 0x400, pc=code_base + 0x1000 + 0x40 * n)
        if t.kind is TaskKind.MANAGE:
            ev = Hypercall(cpu, RegisterContext.make(
                r0=HC_CELL_GET_STATE, r1=cell_id(cfg, schedule.cell or comm_cell.name)))
        elif t.kind is TaskKind.BLINK:
            ev = Irq(cpu, vectors[0] if vectors else 0)
        elif t.kind in (TaskKind.SENDER, TaskKind.RECEIVER):
            offset = (0x40 if t.kind is TaskKind.SENDER else 0x80) + 0x100 * (t.cell == cfg.root.name)
            ev = Trap(cpu, RegisterContext.make(
                esr=make_esr(CLASS_DABT, 0x93), r0=0x5A5A0000 + n, r2=comm.base + offset, **common))
        else:
            ev = Trap(cpu, RegisterContext.make(
                esr=make_esr(CLASS_BENIGN, 0x7), r0=n, r2=_own_scratch(cfg, t.cell, n), **common))
        prefix = t.kind.value if t.cell != cfg.root.name else f"root {t.kind.value}"
        out.append((ev, prefix, t.cell))
    tick = Irq(_first_cpu(cfg, target.name), vectors[-1] if vectors else 0)
    return tuple(out), tick


def step_workload(schedule: WorkloadSchedule, state: HvState, i: int):
    """Event at index ``i`` plus the console line a healthy guest prints.

    Returns ``(event, line, cell)``; ``line`` is None for idle ticks.
    """
    if not 0 <= i < schedule.horizon:
        raise IndexError(f"event index {i} outside horizon {schedule.horizon}")
    events, tick = _task_events(schedule, state.cfg)
    n = schedule.task_at(i)
    if n is None:
        return tick, None, None
    ev, prefix, cell = events[n]
    return ev, f"{prefix} {i}", cell


@functools.lru_cache(maxsize=8)
def compiled_workload(schedule: WorkloadSchedule, cfg: SystemConfig) -> tuple:
    """``step_workload`` for every index of the horizon, computed once."""
    events, tick = _task_events(schedule, cfg)
    table = activation_table(schedule, schedule.horizon)
    out = []
    for i, n in enumerate(table):
        if n is None:
            out.append((tick, None, None))
        else:
            ev, prefix, cell = events[n]
            out.append((ev, f"{prefix} {i}", cell))
    return tuple(out)


@functools.lru_cache(maxsize=32)
def activation_table(schedule: WorkloadSchedule, horizon: int) -> tuple:
    """Task index (or None) for every event index below ``horizon``."""
    return tuple(schedule.task_at(i) for i in range(horizon))


def expected_console(schedule: WorkloadSchedule, horizon: int) -> tuple[int, str]:
    """Line count and digest of the non-root console in a fault-free trial."""
    h = hashlib.sha256()
    count = 0
    table = activation_table(schedule, horizon)
    kinds = [t.kind.value for t in schedule.tasks]
    for i, n in enumerate(table):
        if n is not None and schedule.tasks[n].cell == schedule.cell:
            h.update(f"{kinds[n]} {i}\n".encode())
            count += 1
    return count, h.hexdigest()[:16]


def console_digest(lines) -> tuple[int, str]:
    h = hashlib.sha256()
    count = 0
    for line in lines:
        h.update(f"{line}\n".encode())
        count += 1
    return count, h.hexdigest()[:16]


def boot_events(schedule: WorkloadSchedule, cfg: SystemConfig) -> list[Event]:
    """Root-cell traffic issued before any cell is created."""
    root = cfg.root.name
    root_cpus = sorted(set(cfg.root.cpus) | {c for cell in cfg.cells for c in cell.cpus})
    first = min(cfg.root.cpus)
    probe = Hypercall(first, RegisterContext.make(r0=HC_CELL_GET_STATE, r1=0))
    traps = [Trap(c, RegisterContext.make(esr=make_esr(CLASS_BENIGN, 0x1), r0=c,
                                          r2=_own_scratch(cfg, root, 0)))
             for c in root_cpus]
    out: list[Event] = []
    for _ in range(schedule.boot_calls):
        out.append(probe)
        out.extend(traps)
    return out


_COMMAND_CODES = {
    "create": HC_CELL_CREATE,
    "start": HC_CELL_START,
    "shutdown": HC_CELL_SHUTDOWN,
    "destroy": HC_CELL_DESTROY,
}


def command_event(cfg: SystemConfig, op: str, cell: str) -> Hypercall:
    """Hypercall the root issues for the management command ``<op> <cell>``."""
    arg = handle_for(cfg, cell) if op == "create" else cell_id(cfg, cell)
    return Hypercall(min(cfg.root.cpus), RegisterContext.make(r0=_COMMAND_CODES[op], r1=arg))


def handoff_event(cfg: SystemConfig, cell: str, cpu: int) -> Trap:
    return Trap(cpu, entry_context(cfg, cell))


def golden_run(cfg: SystemConfig, schedule: WorkloadSchedule, horizon: int | None = None):
    """Fault-free trial used as the behavioural reference."""
    from .campaign import run_trial

    return run_trial(cfg, schedule, None, horizon)


def profile(log) -> dict[str, int]:
    """Handler invocation counts recorded in a trial log."""
    counts = {"hvc": 0, "trap": 0, "irq": 0}
    for rec in log.records:
        if rec["kind"] in counts:
            counts[rec["kind"]] += 1
    return counts

