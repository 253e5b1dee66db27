"""Deterministic model of a static partitioning hypervisor.

``HvState`` is an immutable value; every handler returns a new state. The
handlers mirror the three entry points profiled on real hardware: the
hypercall handler, the trap handler and the interrupt dispatcher.

Conventions used by the model (and by the workload generator):

* hypercalls put the code in ``r0`` and the argument in ``r1``;
* the exception class lives in the top 6 bits of ``esr``;
* data aborts carry the faulting address in ``r2``;
* the entry point of a cpu handed over to a cell is ``r15`` (pc).
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Union

from .sysconfig import (
    CellConfig,
    RegionFlag,
    SystemConfig,
    declared_intervals,
    owned_intervals,
    resource_view,
    validate_system_config,
)

NUM_GPRS = 16
NUM_SLOTS = NUM_GPRS + 1  # 16 general registers + esr
ESR_SLOT = NUM_GPRS
WORD_MASK = 0xFFFFFFFF
REG_SP, REG_LR, REG_PC = 13, 14, 15
FAULT_ADDR_REG = 2

ESR_CLASS_SHIFT = 26
ESR_SYNDROME_MASK = (1 << ESR_CLASS_SHIFT) - 1
CLASS_HVC = 1
CLASS_DABT = 2
CLASS_BENIGN = 3
KNOWN_CLASSES = frozenset({CLASS_HVC, CLASS_DABT, CLASS_BENIGN})
UNHANDLED_TRAP_CODE = 0x24
UNHANDLED_CODE_TEXT = f"{UNHANDLED_TRAP_CODE:#04x}"

HC_CELL_CREATE = 0
HC_CELL_START = 1
HC_CELL_SHUTDOWN = 2
HC_CELL_DESTROY = 3
HC_CELL_GET_STATE = 4
HYPERCALL_NAMES = {
    HC_CELL_CREATE: "create",
    HC_CELL_START: "start",
    HC_CELL_SHUTDOWN: "shutdown",
    HC_CELL_DESTROY: "destroy",
    HC_CELL_GET_STATE: "get_state",
}

# Config handles live far away from cell ids so a single flip of a cell id
# can never turn into a handle.
CONFIG_HANDLE_BASE = 0x4A480000


class InvalidConfig(ValueError):
    def __init__(self, violations):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


class BadStatus(RuntimeError):
    pass


class CellStatus(enum.Enum):
    ABSENT = "ABSENT"
    CREATED = "CREATED"
    RUNNING = "RUNNING"
    SHUT_DOWN = "SHUT_DOWN"
    FAILED = "FAILED"


LEGAL_TRANSITIONS = frozenset({
    (CellStatus.ABSENT, CellStatus.CREATED),
    (CellStatus.CREATED, CellStatus.RUNNING),
    (CellStatus.RUNNING, CellStatus.SHUT_DOWN),
    (CellStatus.RUNNING, CellStatus.FAILED),
    (CellStatus.SHUT_DOWN, CellStatus.ABSENT),
    (CellStatus.FAILED, CellStatus.ABSENT),
})


class CpuMode(enum.Enum):
    OFFLINE = "OFFLINE"
    RUNNING = "RUNNING"
    PARKED = "PARKED"


class HvResult(enum.Enum):
    OK = "OK"
    EINVAL = "EINVAL"


class TrapAction(enum.Enum):
    HANDLED = "HANDLED"
    UNHANDLED = "UNHANDLED"
    PANIC = "PANIC"
    ONLINE = "ONLINE"
    SILENT_PARK = "SILENT_PARK"


class IrqResult(enum.Enum):
    DELIVERED = "DELIVERED"
    IRQ_ERROR = "IRQ_ERROR"


@dataclass(frozen=True, slots=True)
class RegisterContext:
    r: tuple[int, ...]
    esr: int = 0

    def __post_init__(self):
        if len(self.r) != NUM_GPRS:
            raise ValueError(f"expected {NUM_GPRS} registers, got {len(self.r)}")
        for w in self.r + (self.esr,):
            if not 0 <= w <= WORD_MASK:
                raise ValueError(f"register value {w:#x} is not a 32-bit word")

    @classmethod
    def make(cls, esr: int = 0, **regs: int) -> RegisterContext:
        """Build a context from keyword registers, e.g. ``make(r0=1, pc=0x100)``."""
        r = [0] * NUM_GPRS
        aliases = {"sp": REG_SP, "lr": REG_LR, "pc": REG_PC}
        for name, value in regs.items():
            r[aliases[name] if name in aliases else int(name[1:])] = value & WORD_MASK
        return cls(tuple(r), esr & WORD_MASK)

    @classmethod
    def from_words(cls, words) -> RegisterContext:
        return cls(tuple(words[:NUM_GPRS]), words[NUM_GPRS])

    def words(self) -> tuple[int, ...]:
        return self.r + (self.esr,)

    @property
    def pc(self) -> int:
        return self.r[REG_PC]

    @property
    def exception_class(self) -> int:
        return self.esr >> ESR_CLASS_SHIFT

    def digest(self) -> str:
        return f"{zlib.crc32(struct.pack('<17I', *self.r, self.esr)):08x}"


def make_esr(exception_class: int, syndrome: int = 0) -> int:
    return ((exception_class & 0x3F) << ESR_CLASS_SHIFT) | (syndrome & ESR_SYNDROME_MASK)


class Hypercall(NamedTuple):
    cpu: int
    ctx: RegisterContext
    kind = "hvc"


class Trap(NamedTuple):
    cpu: int
    ctx: RegisterContext
    kind = "trap"


class Irq(NamedTuple):
    cpu: int
    vector: int
    kind = "irq"


Event = Union[Hypercall, Trap, Irq]


class CpuState(NamedTuple):
    id: int
    mode: CpuMode
    cell: str | None  # cell the cpu runs for (or was parked in); None = root spare


class Counters(NamedTuple):
    hvc: int = 0
    trap: int = 0
    irq: int = 0


class HvState(NamedTuple):
    # dict fields are never mutated in place; transitions build new dicts
    cfg: SystemConfig
    root_status: CellStatus
    cells: dict[str, CellStatus]
    cpus: tuple[CpuState, ...]
    ownership: dict[str, tuple]
    counters: Counters = Counters()
    panic: bool = False
    pending: frozenset[int] = frozenset()  # cpus awaiting their start handoff

    def status(self, cell: str) -> CellStatus:
        if cell == self.cfg.root.name:
            return self.root_status
        return self.cells[cell]

    def active_cells(self) -> frozenset[str]:
        return frozenset(n for n, s in self.cells.items()
                         if s in (CellStatus.CREATED, CellStatus.RUNNING))

    def cpu_owner(self, cpu: int) -> str:
        for name, owned in self.ownership.items():
            if ("cpu", cpu) in owned:
                return name
        return self.cfg.root.name


def record(i: int, kind: str, **fields) -> dict:
    fields["i"] = i
    fields["kind"] = kind
    return fields


# --------------------------------------------------------------------------
# Enable / lifecycle helpers


def hv_enable(cfg: SystemConfig) -> HvState:
    violations = validate_system_config(cfg)
    if violations:
        raise InvalidConfig(violations)
    ownership = resource_view(cfg, ())
    root = cfg.root.name
    root_cpus = {res[1] for res in ownership[root] if res[0] == "cpu"}
    cpus = tuple(
        CpuState(c, CpuMode.RUNNING, root) if c in root_cpus else CpuState(c, CpuMode.OFFLINE, None)
        for c in range(cfg.num_cpus)
    )
    return HvState(
        cfg=cfg,
        root_status=CellStatus.RUNNING,
        cells={c.name: CellStatus.ABSENT for c in cfg.cells},
        cpus=cpus,
        ownership=ownership,
    )


def handle_for(cfg: SystemConfig, cell: str) -> int:
    """Config handle the root passes to CELL_CREATE for ``cell``."""
    for j, c in enumerate(cfg.cells):
        if c.name == cell:
            return CONFIG_HANDLE_BASE + j
    raise KeyError(cell)


def cell_id(cfg: SystemConfig, cell: str) -> int:
    """Numeric id of a cell as used by start/shutdown/destroy (root is 0)."""
    if cell == cfg.root.name:
        return 0
    for j, c in enumerate(cfg.cells):
        if c.name == cell:
            return j + 1
    raise KeyError(cell)


def _cell_by_id(cfg: SystemConfig, ident: int) -> CellConfig | None:
    if ident == 0:
        return cfg.root
    if 1 <= ident <= len(cfg.cells):
        return cfg.cells[ident - 1]
    return None


def _transition(state: HvState, cell: str, new: CellStatus, effects: list, i: int) -> HvState:
    old = state.status(cell)
    if (old, new) not in LEGAL_TRANSITIONS:
        raise BadStatus(f"{cell}: illegal transition {old.value} -> {new.value}")
    effects.append(record(i, "lifecycle", cell=cell, old=old.value, new=new.value))
    if cell == state.cfg.root.name:
        return state._replace(root_status=new)
    cells = dict(state.cells)
    cells[cell] = new
    ownership = resource_view(state.cfg, (n for n, s in cells.items()
                                          if s in (CellStatus.CREATED, CellStatus.RUNNING)))
    return state._replace(cells=cells, ownership=ownership)


def _set_cpus(state: HvState, ids, mode: CpuMode, cell: str | None) -> HvState:
    cpus = list(state.cpus)
    for c in ids:
        cpus[c] = CpuState(c, mode, cell)
    return state._replace(cpus=tuple(cpus), pending=state.pending - frozenset(ids))


def _running_cell(state: HvState, cpu: int) -> str | None:
    cs = state.cpus[cpu]
    return cs.cell if cs.mode is CpuMode.RUNNING else None


def cpu_executes(state: HvState, cpu: int) -> bool:
    """True when ``cpu`` can take events (running, or waiting for its handoff)."""
    return state.cpus[cpu].mode is CpuMode.RUNNING or cpu in state.pending


def _hc_create(state, arg, effects, i):
    j = arg - CONFIG_HANDLE_BASE
    if not 0 <= j < len(state.cfg.cells):
        return state, HvResult.EINVAL, None
    cell = state.cfg.cells[j]
    if state.cells[cell.name] is not CellStatus.ABSENT:
        return state, HvResult.EINVAL, None
    root = state.cfg.root.name
    for c in cell.cpus:
        cs = state.cpus[c]
        usable = (cs.mode is CpuMode.RUNNING and cs.cell == root) or \
                 (cs.mode is CpuMode.OFFLINE and cs.cell is None)
        if not usable or c in state.pending:
            return state, HvResult.EINVAL, None
    state = _transition(state, cell.name, CellStatus.CREATED, effects, i)
    state = _set_cpus(state, cell.cpus, CpuMode.OFFLINE, cell.name)
    return state, HvResult.OK, cell_id(state.cfg, cell.name)


def _begin_start(state, cell: CellConfig, effects, i):
    state = _transition(state, cell.name, CellStatus.RUNNING, effects, i)
    return state._replace(pending=state.pending | cell.cpus)


def _hc_start(state, arg, effects, i):
    cell = _cell_by_id(state.cfg, arg)
    if cell is None or arg == 0 or state.cells[cell.name] is not CellStatus.CREATED:
        return state, HvResult.EINVAL, None
    return _begin_start(state, cell, effects, i), HvResult.OK, None


def _hc_shutdown(state, arg, effects, i):
    cell = _cell_by_id(state.cfg, arg)
    if cell is None or arg == 0 or state.cells[cell.name] is not CellStatus.RUNNING:
        return state, HvResult.EINVAL, None
    state = _transition(state, cell.name, CellStatus.SHUT_DOWN, effects, i)
    state = _set_cpus(state, cell.cpus, CpuMode.OFFLINE, None)
    return state, HvResult.OK, None


def _hc_destroy(state, arg, effects, i):
    cell = _cell_by_id(state.cfg, arg)
    if cell is None or arg == 0 or \
            state.cells[cell.name] not in (CellStatus.SHUT_DOWN, CellStatus.FAILED):
        return state, HvResult.EINVAL, None
    state = _transition(state, cell.name, CellStatus.ABSENT, effects, i)
    state = _set_cpus(state, cell.cpus, CpuMode.OFFLINE, None)
    return state, HvResult.OK, None


def _hc_get_state(state, arg, effects, i):
    cell = _cell_by_id(state.cfg, arg)
    if cell is None:
        return state, HvResult.EINVAL, None
    status = state.status(cell.name)
    if status is CellStatus.ABSENT:
        return state, HvResult.EINVAL, None
    return state, HvResult.OK, status.value


_HYPERCALLS = {
    HC_CELL_CREATE: _hc_create,
    HC_CELL_START: _hc_start,
    HC_CELL_SHUTDOWN: _hc_shutdown,
    HC_CELL_DESTROY: _hc_destroy,
    HC_CELL_GET_STATE: _hc_get_state,
}


# --------------------------------------------------------------------------
# Handlers


def arch_handle_hvc(state: HvState, cpu: int, ctx: RegisterContext,
                    log: list | None = None, i: int = 0) -> tuple[HvState, HvResult]:
    """Hypercall handler. Only the root cell may manage cells."""
    c = state.counters
    state = state._replace(counters=Counters(c.hvc + 1, c.trap, c.irq))
    code, arg = ctx.r[0], ctx.r[1]
    effects: list = []
    result, value = HvResult.EINVAL, None
    handler = _HYPERCALLS.get(code)
    if handler is not None and _running_cell(state, cpu) == state.cfg.root.name:
        state, result, value = handler(state, arg, effects, i)
    if log is not None:
        rec = record(i, "hvc", cpu=cpu, code=code, arg=arg, result=result.value,
                     ctx=ctx.digest())
        if value is not None:
            rec["value"] = value
        log.append(rec)
        log.extend(effects)
    return state, result


def _fail_cell(state: HvState, cell: str, effects: list, i: int) -> HvState:
    # All cpus of a failed cell stop; for single-cpu cells this is just the trapping one.
    for cs in state.cpus:
        if cs.cell == cell and cs.mode is CpuMode.RUNNING:
            state = _park(state, cs.id, effects, i, code=None)
    if state.status(cell) is CellStatus.RUNNING:
        state = _transition(state, cell, CellStatus.FAILED, effects, i)
    return state


def _park(state: HvState, cpu: int, effects: list, i: int, code: str | None) -> HvState:
    cs = state.cpus[cpu]
    if cs.mode is CpuMode.PARKED:
        return state
    effects.append(record(i, "park", cpu=cpu, cell=cs.cell, code=code))
    return _set_cpus(state, [cpu], CpuMode.PARKED, cs.cell)


def cpu_park(state: HvState, cpu: int, log: list | None = None, i: int = 0) -> HvState:
    """Park ``cpu``; parking an already parked cpu is a no-op."""
    mode = state.cpus[cpu].mode
    if mode is CpuMode.PARKED:
        return state
    if mode is not CpuMode.RUNNING:
        raise BadStatus(f"cpu {cpu} is {mode.value}, not running")
    effects: list = []
    state = _park(state, cpu, effects, i, code=None)
    if log is not None:
        log.extend(effects)
    return state


def _in_intervals(addr: int, intervals) -> bool:
    for lo, hi in intervals:
        if lo <= addr < hi:
            return True
    return False


def _hypervisor_memory(cfg: SystemConfig, addr: int) -> bool:
    """RAM that no cell declares belongs to the hypervisor."""
    return addr < cfg.ram_size and not _in_intervals(addr, declared_intervals(cfg))


def _complete_handoff(state: HvState, cpu: int, ctx: RegisterContext, effects: list, i: int):
    cell_name = state.cpus[cpu].cell
    cell = state.cfg.cell(cell_name)
    entry_ok = any(r.contains(ctx.pc) for r in cell.regions if RegionFlag.EXECUTE in r.flags)
    if entry_ok:
        effects.append(record(i, "online", cpu=cpu, cell=cell_name))
        return _set_cpus(state, [cpu], CpuMode.RUNNING, cell_name), TrapAction.ONLINE
    # The cell stays RUNNING from the hypervisor's point of view.
    state = _park(state, cpu, effects, i, code="handoff")
    return state, TrapAction.SILENT_PARK


def arch_handle_trap(state: HvState, cpu: int, ctx: RegisterContext,
                     log: list | None = None, i: int = 0) -> tuple[HvState, TrapAction]:
    c = state.counters
    state = state._replace(counters=Counters(c.hvc, c.trap + 1, c.irq))
    effects: list = []
    cls = ctx.esr >> ESR_CLASS_SHIFT
    rec = record(i, "trap", cpu=cpu, cls=cls, ctx=ctx.digest())
    if cpu in state.pending:
        state, action = _complete_handoff(state, cpu, ctx, effects, i)
    else:
        cell = _running_cell(state, cpu)
        if cell is None:
            raise BadStatus(f"cpu {cpu} is not running a cell")
        action = TrapAction.HANDLED
        if cls not in KNOWN_CLASSES:
            action = TrapAction.UNHANDLED
        elif cls == CLASS_DABT:
            addr = ctx.r[FAULT_ADDR_REG]
            rec["addr"] = addr
            own = owned_intervals(state.ownership[cell])
            if _in_intervals(addr, own):
                pass
            elif _in_intervals(addr, owned_intervals(state.ownership[state.cfg.root.name])) \
                    or _hypervisor_memory(state.cfg, addr):
                action = TrapAction.PANIC
            else:
                action = TrapAction.UNHANDLED
        if action is TrapAction.UNHANDLED:
            rec["code"] = UNHANDLED_CODE_TEXT
            state = _park(state, cpu, effects, i, code=UNHANDLED_CODE_TEXT)
            state = _fail_cell(state, cell, effects, i)
        elif action is TrapAction.PANIC:
            state = state._replace(panic=True)
            effects.append(record(i, "panic", cpu=cpu, cell=cell, addr=ctx.r[FAULT_ADDR_REG]))
    rec["action"] = action.value
    if log is not None:
        log.append(rec)
        log.extend(effects)
    return state, action


def irqchip_handle_irq(state: HvState, cpu: int, vector: int,
                       log: list | None = None, i: int = 0) -> tuple[HvState, IrqResult]:
    c = state.counters
    state = state._replace(counters=Counters(c.hvc, c.trap, c.irq + 1))
    owner = state.cpus[cpu].cell or state.cpu_owner(cpu)
    owned = state.ownership.get(owner, ())
    result = IrqResult.DELIVERED if ("irq", vector) in owned else IrqResult.IRQ_ERROR
    if log is not None:
        log.append(record(i, "irq", cpu=cpu, vector=vector, result=result.value))
    return state, result


def cell_start_handoff(state: HvState, cell: str, entry_ctx: RegisterContext,
                       log: list | None = None, i: int = 0) -> HvState:
    """Mark ``cell`` running and bring each of its cpus online from ``entry_ctx``.

    A cpu whose entry point is not executable for the cell parks without any
    error being reported, leaving the cell RUNNING with nobody executing it.
    """
    if cell == state.cfg.root.name or state.status(cell) is not CellStatus.CREATED:
        raise BadStatus(f"{cell} is not CREATED")
    effects: list = []
    cfg_cell = state.cfg.cell(cell)
    state = _begin_start(state, cfg_cell, effects, i)
    for cpu in sorted(cfg_cell.cpus):
        state, _ = _complete_handoff(state, cpu, entry_ctx, effects, i)
    if log is not None:
        log.extend(effects)
    return state


def entry_context(cfg: SystemConfig, cell: str) -> RegisterContext:
    """Pristine handoff context: pc at the first executable region, sp at its top."""
    c = cfg.cell(cell)
    for r in c.regions:
        if RegionFlag.EXECUTE in r.flags:
            return RegisterContext.make(esr=make_esr(CLASS_BENIGN), pc=r.base, sp=r.end - 16)
    return RegisterContext.make(esr=make_esr(CLASS_BENIGN))


def dispatch_event(state: HvState, ev: Event, i: int = 0) -> tuple[HvState, list[dict]]:
    """Route one event to its handler and return the emitted log records."""
    if not 0 <= ev.cpu < state.cfg.num_cpus:
        raise ValueError(f"cpu {ev.cpu} outside 0..{state.cfg.num_cpus - 1}")
    if state.panic:
        return state, [record(i, "suppressed", event=ev.kind, cpu=ev.cpu)]
    # a cpu waiting for its handoff only takes the handoff trap
    if not cpu_executes(state, ev.cpu) or (ev.kind != "trap" and ev.cpu in state.pending):
        return state, [record(i, "dropped", event=ev.kind, cpu=ev.cpu,
                              mode=state.cpus[ev.cpu].mode.value)]
    log: list = []
    if ev.kind == "hvc":
        state, _ = arch_handle_hvc(state, ev.cpu, ev.ctx, log, i)
    elif ev.kind == "trap":
        state, _ = arch_handle_trap(state, ev.cpu, ev.ctx, log, i)
    else:
        state, _ = irqchip_handle_irq(state, ev.cpu, ev.vector, log, i)
    return state, log


def guest_console(state: HvState, cpu: int, cell: str, line: str, i: int) -> dict | None:
    """Console record for ``line`` if ``cell`` is actually executing on ``cpu``."""
    if state.panic or _running_cell(state, cpu) != cell:
        return None
    return record(i, "console", cell=cell, cpu=cpu, line=line)


def all_root(state: HvState) -> bool:
    """True when ownership equals the view with every non-root cell inactive."""
    return state.ownership == resource_view(state.cfg, ())
