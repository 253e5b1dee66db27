from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from partfi.sysconfig import CellConfig, MemoryRegion, RegionFlag, SystemConfig, example_config

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Acceptance results collected by tests/test_acceptance.py, echoed at the end.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cfg() -> SystemConfig:
    return example_config()


# --------------------------------------------------------------------------
# Strategies

RAM = 0x10000
names = st.sampled_from(["a", "b", "c", "rtos", "linux", "io"])
flag_sets = st.sets(st.sampled_from(list(RegionFlag)), min_size=1).map(
    lambda fs: RegionFlag(sum(f.value for f in fs)))


@st.composite
def regions(draw, ram=RAM):
    base = draw(st.integers(0, ram // 0x100 - 1)) * 0x100
    size = draw(st.integers(1, 0x40)) * 0x100
    name = draw(st.sampled_from(["ram", "io", "shm", "code"]))
    return MemoryRegion(name, base, size, draw(flag_sets))


@st.composite
def cells(draw, num_cpus=4, name=None):
    rs = draw(st.lists(regions(), max_size=3))
    # unique region names inside a cell keep comm lookups unambiguous
    seen, uniq = set(), []
    for r in rs:
        if r.name not in seen:
            seen.add(r.name)
            uniq.append(r)
    shared = [r.name for r in uniq if r.shared]
    comm = draw(st.sampled_from(shared)) if shared and draw(st.booleans()) else None
    return CellConfig(
        name=name or draw(names),
        cpus=frozenset(draw(st.sets(st.integers(0, num_cpus), max_size=2))),
        regions=tuple(uniq),
        irqs=frozenset(draw(st.sets(st.integers(0, 1023), max_size=4))),
        comm=comm,
    )


@st.composite
def system_configs(draw):
    num_cpus = draw(st.integers(1, 4))
    root = draw(cells(num_cpus, name="root"))
    others = tuple(draw(st.lists(cells(num_cpus), max_size=3)))
    return SystemConfig(num_cpus, RAM, root, others)


@st.composite
def valid_configs(draw):
    """Configs that pass validation by construction: disjoint cpus and regions."""
    n = draw(st.integers(0, 3))
    num_cpus = n + 1 + draw(st.integers(0, 1))
    slot = RAM // (n + 2)
    built = []
    for k in range(n + 1):
        base = k * slot
        size = draw(st.integers(1, slot // 0x200)) * 0x100
        flags = draw(flag_sets) & ~RegionFlag.SHARED or RegionFlag.READ
        rs = [MemoryRegion("ram", base, size, flags)]
        built.append((f"c{k}", frozenset({k}), rs,
                      frozenset(draw(st.sets(st.integers(0, 1023), max_size=3)))))
    if n and draw(st.booleans()):
        shm = MemoryRegion("shm", RAM - 0x100, 0x100, RegionFlag.READ | RegionFlag.SHARED)
        built[0][2].append(shm)
        built[1][2].append(shm)
    all_cells = [CellConfig(name, cpus, tuple(rs), irqs,
                            "shm" if any(r.name == "shm" for r in rs) and k else None)
                 for k, (name, cpus, rs, irqs) in enumerate(built)]
    return SystemConfig(num_cpus, RAM, all_cells[0], tuple(all_cells[1:]))
