from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from partfi.hvmodel import (
    CLASS_BENIGN,
    CLASS_DABT,
    HC_CELL_CREATE,
    HC_CELL_DESTROY,
    HC_CELL_GET_STATE,
    HC_CELL_SHUTDOWN,
    HC_CELL_START,
    LEGAL_TRANSITIONS,
    BadStatus,
    CellStatus,
    CpuMode,
    Hypercall,
    HvResult,
    InvalidConfig,
    Irq,
    IrqResult,
    RegisterContext,
    Trap,
    TrapAction,
    all_root,
    arch_handle_hvc,
    arch_handle_trap,
    cell_id,
    cell_start_handoff,
    cpu_park,
    dispatch_event,
    entry_context,
    guest_console,
    handle_for,
    hv_enable,
    irqchip_handle_irq,
    make_esr,
)
from partfi.sysconfig import example_config, parse_system_config, resource_view

from .eventgen import random_sequence

CFG = example_config()

SOLO = """
hardware { num_cpus = 1  ram_size = 0x1000 }
root "only" { cpus = [0]  region "ram" 0x0 0x1000 READ|WRITE|EXECUTE }
"""


def hvc(state, code, arg, cpu=0):
    log = []
    state, res = arch_handle_hvc(state, cpu, RegisterContext.make(r0=code, r1=arg), log)
    return state, res, log


def started(cfg, entry=None):
    """Example system with the rtos cell created and started."""
    s = hv_enable(cfg)
    s, res, _ = hvc(s, HC_CELL_CREATE, handle_for(cfg, "rtos"))
    assert res is HvResult.OK
    return cell_start_handoff(s, "rtos", entry or entry_context(cfg, "rtos"))


def dabt(addr):
    return RegisterContext.make(esr=make_esr(CLASS_DABT, 0x93), r2=addr)


def test_enable_example(cfg):
    s = hv_enable(cfg)
    assert s.root_status is CellStatus.RUNNING
    assert s.cells == {"rtos": CellStatus.ABSENT}
    assert s.cpus[0].mode is CpuMode.RUNNING and s.cpus[0].cell == "linux"
    # cpu 1 is idle but owned by root until the rtos cell is created
    assert s.cpu_owner(1) == "linux"
    assert s.counters == (0, 0, 0) and not s.panic
    assert hv_enable(cfg) == s


def test_enable_rejects_invalid_config():
    bad = parse_system_config(SOLO.replace("cpus = [0]", "cpus = [3]"))
    with pytest.raises(InvalidConfig) as exc:
        hv_enable(bad)
    assert exc.value.violations


def test_enable_without_cells():
    s = hv_enable(parse_system_config(SOLO))
    assert s.cells == {} and s.root_status is CellStatus.RUNNING


def test_create_transfers_resources(cfg):
    s = hv_enable(cfg)
    s, res, log = hvc(s, HC_CELL_CREATE, handle_for(cfg, "rtos"))
    assert res is HvResult.OK and s.cells["rtos"] is CellStatus.CREATED
    assert s.ownership == resource_view(cfg, {"rtos"})
    assert [r["kind"] for r in log] == ["hvc", "lifecycle"]
    assert s.counters.hvc == 1


@pytest.mark.parametrize("bit", range(32))
def test_create_with_flipped_handle_is_einval(cfg, bit):
    s = hv_enable(cfg)
    s2, res, log = hvc(s, HC_CELL_CREATE, handle_for(cfg, "rtos") ^ (1 << bit))
    assert res is HvResult.EINVAL
    assert s2._replace(counters=s.counters) == s
    assert [r["kind"] for r in log] == ["hvc"]


def test_unknown_code(cfg):
    s = hv_enable(cfg)
    s2, res, _ = hvc(s, 0xFFFFFFFF, 0)
    assert res is HvResult.EINVAL and s2.counters.hvc == 1
    assert s2._replace(counters=s.counters) == s


def test_only_root_manages_cells(cfg):
    s = started(cfg)
    _, res, _ = hvc(s, HC_CELL_SHUTDOWN, cell_id(cfg, "rtos"), cpu=1)
    assert res is HvResult.EINVAL


def test_get_state(cfg):
    s = hv_enable(cfg)
    _, res, log = hvc(s, HC_CELL_GET_STATE, 0)
    assert res is HvResult.OK and log[0]["value"] == "RUNNING"
    _, res, _ = hvc(s, HC_CELL_GET_STATE, cell_id(cfg, "rtos"))
    assert res is HvResult.EINVAL  # absent cells have no state


def test_full_lifecycle(cfg):
    s = started(cfg)
    assert s.cells["rtos"] is CellStatus.RUNNING
    assert s.cpus[1] == (1, CpuMode.RUNNING, "rtos")
    s, res, _ = hvc(s, HC_CELL_DESTROY, cell_id(cfg, "rtos"))
    assert res is HvResult.EINVAL  # running cells must be shut down first
    s, res, _ = hvc(s, HC_CELL_SHUTDOWN, cell_id(cfg, "rtos"))
    assert res is HvResult.OK and s.cells["rtos"] is CellStatus.SHUT_DOWN
    assert all_root(s)
    s, res, _ = hvc(s, HC_CELL_DESTROY, cell_id(cfg, "rtos"))
    assert res is HvResult.OK and s.cells["rtos"] is CellStatus.ABSENT
    assert s.ownership == resource_view(cfg, ())


def test_trap_known_class_is_handled(cfg):
    s = started(cfg)
    s2, action = arch_handle_trap(s, 1, dabt(0x3B000100))
    assert action is TrapAction.HANDLED
    assert s2._replace(counters=s.counters) == s
    s2, action = arch_handle_trap(s, 1, dabt(0x3F000040))  # shared channel
    assert action is TrapAction.HANDLED


def test_unknown_class_parks_and_fails(cfg):
    s = started(cfg)
    log = []
    s, action = arch_handle_trap(s, 1, RegisterContext.make(esr=make_esr(0x2A)), log)
    assert action is TrapAction.UNHANDLED
    assert s.cpus[1].mode is CpuMode.PARKED and s.cells["rtos"] is CellStatus.FAILED
    assert [r["kind"] for r in log] == ["trap", "park", "lifecycle"]
    assert log[0]["code"] == "0x24" and log[1]["code"] == "0x24"
    assert guest_console(s, 1, "rtos", "blink 1", 1) is None
    assert s.root_status is CellStatus.RUNNING


@pytest.mark.parametrize("addr", [0x00001000, 0x3C000000, 0x3F100000])
def test_abort_into_root_or_hypervisor_memory_panics(cfg, addr):
    s = started(cfg)
    log = []
    s, action = arch_handle_trap(s, 1, dabt(addr), log)
    assert action is TrapAction.PANIC and s.panic
    assert log[-1]["kind"] == "panic"


def test_abort_beyond_ram_parks(cfg):
    s = started(cfg)
    s, action = arch_handle_trap(s, 1, dabt(0x7F000040))
    assert action is TrapAction.UNHANDLED and s.cells["rtos"] is CellStatus.FAILED


def test_irq_routing(cfg):
    s = started(cfg)
    for _ in range(2):
        s2, res = irqchip_handle_irq(s, 1, 27)
        assert res is IrqResult.DELIVERED
    s2, res = irqchip_handle_irq(s, 1, 29)  # owned by root, not rtos
    assert res is IrqResult.IRQ_ERROR
    assert s2._replace(counters=s.counters) == s


def test_cpu_park_semantics(cfg):
    s = started(cfg)
    p = cpu_park(s, 1)
    assert p.cpus[1].mode is CpuMode.PARKED and p.cells["rtos"] is CellStatus.RUNNING
    assert cpu_park(p, 1) == p
    with pytest.raises(BadStatus):
        cpu_park(hv_enable(cfg)._replace(cpus=(s.cpus[0], s.cpus[1]._replace(
            mode=CpuMode.OFFLINE))), 1)


def test_park_then_destroy_returns_cpu(cfg):
    s = started(cfg)
    s, _ = arch_handle_trap(s, 1, RegisterContext.make(esr=make_esr(0x3F)))
    s, res, _ = hvc(s, HC_CELL_DESTROY, cell_id(cfg, "rtos"))
    assert res is HvResult.OK
    assert s.cpus[1] == (1, CpuMode.OFFLINE, None) and s.cpu_owner(1) == "linux"


def test_silent_handoff(cfg):
    bad = RegisterContext.make(pc=0x00100000)  # root memory, not executable for rtos
    s = started(cfg, bad)
    assert s.cells["rtos"] is CellStatus.RUNNING and s.cpus[1].mode is CpuMode.PARKED
    assert guest_console(s, 1, "rtos", "send 0", 0) is None
    s, res, _ = hvc(s, HC_CELL_SHUTDOWN, cell_id(cfg, "rtos"))
    assert res is HvResult.OK and all_root(s)


def test_handoff_requires_created(cfg):
    with pytest.raises(BadStatus):
        cell_start_handoff(hv_enable(cfg), "rtos", entry_context(cfg, "rtos"))


def test_start_is_completed_by_a_trap(cfg):
    s = hv_enable(cfg)
    s, _, _ = hvc(s, HC_CELL_CREATE, handle_for(cfg, "rtos"))
    s, res, log = hvc(s, HC_CELL_START, cell_id(cfg, "rtos"))
    assert res is HvResult.OK and 1 in s.pending
    s, recs = dispatch_event(s, Irq(1, 27))
    assert recs[0]["kind"] == "dropped"  # not online yet
    s, recs = dispatch_event(s, Trap(1, entry_context(cfg, "rtos")))
    assert [r["kind"] for r in recs] == ["trap", "online"]
    assert s.cpus[1].mode is CpuMode.RUNNING and not s.pending


def test_dispatch_after_panic_is_suppressed(cfg):
    s = started(cfg)
    s, _ = dispatch_event(s, Trap(1, dabt(0x1000)))
    assert s.panic
    s2, recs = dispatch_event(s, Irq(0, 29))
    assert s2 == s and [r["kind"] for r in recs] == ["suppressed"]


def test_dispatch_rejects_bad_cpu(cfg):
    with pytest.raises(ValueError):
        dispatch_event(hv_enable(cfg), Irq(2, 27))


def test_dispatch_records_context_digest(cfg):
    ctx = RegisterContext.make(esr=make_esr(CLASS_BENIGN), r0=5)
    _, recs = dispatch_event(hv_enable(cfg), Trap(0, ctx))
    assert recs[0]["ctx"] == ctx.digest()


def test_register_context_invariants():
    with pytest.raises(ValueError):
        RegisterContext((0,) * 15)
    with pytest.raises(ValueError):
        RegisterContext((0,) * 16, 1 << 32)
    ctx = RegisterContext.make(r3=7, pc=0x40, esr=make_esr(5, 9))
    assert ctx.exception_class == 5 and ctx.pc == 0x40
    assert RegisterContext.from_words(ctx.words()) == ctx


@given(st.integers(0, 2**31), st.integers(10, 60))
def test_model_properties(seed, length):
    cfg = CFG
    rng = random.Random(seed)
    s = hv_enable(cfg)
    counts = {"hvc": 0, "trap": 0, "irq": 0}
    for n, ev in enumerate(random_sequence(rng, cfg, length)):
        before = s
        s, recs = dispatch_event(s, ev, n)
        # lifecycle safety, from the records and from the state diff
        for r in recs:
            if r["kind"] == "lifecycle":
                assert (CellStatus(r["old"]), CellStatus(r["new"])) in LEGAL_TRANSITIONS
        for name in s.cells:
            if before.cells[name] != s.cells[name]:
                assert (before.cells[name], s.cells[name]) in LEGAL_TRANSITIONS
        # ownership invariant
        assert s.ownership == resource_view(cfg, s.active_cells())
        # panic is absorbing
        if before.panic:
            assert s == before
        # isolation: a non-root cpu never changes root state except by panic
        if ev.cpu == 1 and before.cpus[1].cell == "rtos" and not s.panic:
            assert s.root_status == before.root_status and s.cpus[0] == before.cpus[0]
        for r in recs:
            if r["kind"] in counts:
                counts[r["kind"]] += 1
        assert s.counters._asdict() == counts


@given(st.integers(0, 2**31))
def test_conservation_after_teardown(seed):
    cfg = CFG
    rng = random.Random(seed)
    s = hv_enable(cfg)
    for ev in random_sequence(rng, cfg, 30):
        s, _ = dispatch_event(s, ev)
    if s.panic:
        return
    rid = cell_id(cfg, "rtos")
    for code in (HC_CELL_SHUTDOWN, HC_CELL_DESTROY):
        s, _, _ = hvc(s, code, rid)
    if s.cells["rtos"] is CellStatus.ABSENT and s.cpus[0].mode is CpuMode.RUNNING:
        assert all_root(s)
