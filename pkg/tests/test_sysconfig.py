from __future__ import annotations

import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from partfi.sysconfig import (
    ParseError,
    RegionFlag,
    UnknownCell,
    ViolationCode,
    example_config_text,
    parse_system_config,
    print_system_config,
    resource_total,
    resource_view,
    validate_system_config,
)

from .conftest import system_configs, valid_configs

TWO_CELLS = """
hardware { num_cpus = 3  ram_size = 0x100000 }
root { cpus = [0]  region "ram" 0x0 0x40000 READ|WRITE|EXECUTE }
cell "a" { cpus = [1]  region "ram" 0x40000 0x10000 READ|WRITE }
cell "b" { cpus = [%s]  region "ram" %s 0x10000 READ|WRITE }
"""


def codes(text):
    return [v.code for v in validate_system_config(parse_system_config(text))]


def test_example_parses(cfg):
    assert cfg.num_cpus == 2
    assert cfg.root.name == "linux" and cfg.root.cpus == {0}
    assert [c.name for c in cfg.cells] == ["rtos"]
    assert cfg.cells[0].cpus == {1}
    assert cfg.cells[0].comm_region().shared
    assert validate_system_config(cfg) == []


@pytest.mark.parametrize("text, needle", [
    ("", "missing hardware"),
    ("hardware { num_cpus = 1 ram_size = 0x1000 }", "missing root"),
    ("hardware { num_cpus = 1 }\nroot { cpus = [0] }", "lacks ram_size"),
    ("hardware { num_cpus = 1 ram_size = 16 }\nroot { cpus = [0] irqs = [2000] }", "outside"),
    ("hardware { num_cpus = 1 ram_size = 16 }\nroot { cpus = [0] irqs = [3, 3] }", "twice"),
    ("hardware { num_cpus = 1 ram_size = 16 }\nroot { region \"r\" 0 8 FAST }", "unknown region flag"),
    ("hardware { num_cpus = 1 ram_size = 16 }\nroot { cpus = [0 }", "expected"),
    ("hardware { num_cpus = 1 ram_size = 16 }\nroot { colour = 3 }", "unknown cell key"),
    ("hardware { num_cpus = 1 ram_size = 16 }\nroot { cpus = [0] }\nroot { cpus = [0] }", "duplicate root"),
])
def test_parse_errors(text, needle):
    with pytest.raises(ParseError) as exc:
        parse_system_config(text)
    assert needle in str(exc.value)
    assert exc.value.line >= 1 and exc.value.col >= 1


def test_parse_error_position():
    with pytest.raises(ParseError) as exc:
        parse_system_config("hardware {\n  num_cpus = 1\n  ram_size = @\n}")
    assert (exc.value.line, exc.value.col) == (3, 14)


def test_duplicate_name_is_a_validation_matter():
    text = TWO_CELLS.replace('cell "b"', 'cell "a"') % ("2", "0x50000")
    cfg = parse_system_config(text)
    assert [c.name for c in cfg.cells] == ["a", "a"]
    assert codes(text) == [ViolationCode.DUP_NAME]


def test_cpu_overlap():
    assert codes(TWO_CELLS % ("1", "0x50000")) == [ViolationCode.CPU_OVERLAP]


def test_cpu_out_of_range_and_empty():
    assert codes(TWO_CELLS % ("7", "0x50000")) == [ViolationCode.CPU_OUT_OF_RANGE]
    assert codes(TWO_CELLS % ("", "0x50000")) == [ViolationCode.EMPTY_CPUSET]


def test_region_overlap_and_oob():
    assert codes(TWO_CELLS % ("2", "0x48000")) == [ViolationCode.REGION_OVERLAP]
    assert codes(TWO_CELLS % ("2", "0xfff00")) == [ViolationCode.REGION_OOB]


SHARED = """
hardware { num_cpus = 4  ram_size = 0x100000 }
root { cpus = [0]  region "ram" 0x0 0x40000 READ|WRITE|EXECUTE }
cell "a" { cpus = [1]  region "ram" 0x40000 0x10000 READ|WRITE
           region "shm" 0x80000 0x1000 READ|WRITE|SHARED  comm = "shm" }
cell "b" { cpus = [2]  region "ram" 0x50000 0x10000 READ|WRITE
           region "shm" 0x80000 %s %s }
"""


def test_shared_regions():
    assert codes(SHARED % ("0x1000", "READ|SHARED")) == []
    assert codes(SHARED % ("0x800", "READ|SHARED")) == [ViolationCode.BAD_SHARED]
    assert codes(SHARED % ("0x1000", "WRITE|SHARED")) == [ViolationCode.BAD_SHARED]
    assert codes(SHARED % ("0x1000", "READ")) == [ViolationCode.REGION_OVERLAP]
    third = SHARED % ("0x1000", "READ|SHARED") + \
        'cell "c" { cpus = [3]  region "shm" 0x80000 0x1000 READ|SHARED }'
    assert codes(third) == [ViolationCode.BAD_SHARED]


def test_comm_must_name_a_shared_region():
    text = (TWO_CELLS % ("2", "0x50000")).rstrip().rstrip("}") + ' comm = "ram" }'
    assert codes(text) == [ViolationCode.BAD_SHARED]
    text = (TWO_CELLS % ("2", "0x50000")).rstrip().rstrip("}") + ' comm = "nope" }'
    assert codes(text) == [ViolationCode.BAD_SHARED]


def test_violation_order_is_cell_then_code():
    text = TWO_CELLS % ("1, 9", "0x48000")
    vs = validate_system_config(parse_system_config(text))
    assert [(v.subject, v.code) for v in vs] == [
        ("b", ViolationCode.CPU_OVERLAP),
        ("b", ViolationCode.CPU_OUT_OF_RANGE),
        ("b", ViolationCode.REGION_OVERLAP),
    ]


def test_round_trip_example(cfg):
    assert parse_system_config(print_system_config(cfg)) == cfg
    assert parse_system_config(example_config_text()) == cfg


def test_resource_view_examples(cfg):
    empty = resource_view(cfg, set())
    assert {r for r in empty["linux"] if r[0] == "cpu"} == {("cpu", 0), ("cpu", 1)}
    assert empty["rtos"] == ()
    active = resource_view(cfg, {"rtos"})
    assert {r for r in active["linux"] if r[0] == "cpu"} == {("cpu", 0)}
    assert {r for r in active["rtos"] if r[0] == "cpu"} == {("cpu", 1)}
    assert resource_view(cfg, set()) == empty
    with pytest.raises(UnknownCell):
        resource_view(cfg, {"ghost"})


def test_resource_view_root_is_not_a_choice(cfg):
    with pytest.raises(UnknownCell):
        resource_view(cfg, {"linux"})


@given(system_configs())
def test_print_parse_round_trip(cfg):
    assert parse_system_config(print_system_config(cfg)) == cfg


@given(valid_configs(), st.data())
def test_conservation(cfg, data):
    assert validate_system_config(cfg) == []
    base = resource_total(resource_view(cfg, ()))
    names = [c.name for c in cfg.cells]
    active = data.draw(st.sets(st.sampled_from(names)) if names else st.just(set()))
    assert resource_total(resource_view(cfg, active)) == base
    # activate and deactivate: identical to the all-root view
    assert resource_view(cfg, ()) == resource_view(cfg, set())


def _exclusive_bytes(cell):
    out = set()
    for r in cell.regions:
        if not r.shared:
            out.update(range(r.base, r.end))
    return out


def _oracle_conflict(cfg) -> bool:
    """Brute force: any two cells sharing a cpu or an exclusive byte."""
    cells = cfg.all_cells()
    for a, b in itertools.combinations(cells, 2):
        if a.cpus & b.cpus:
            return True
        ea, eb = _exclusive_bytes(a), _exclusive_bytes(b)
        all_a = ea | {x for r in a.regions for x in range(r.base, r.end)}
        all_b = eb | {x for r in b.regions for x in range(r.base, r.end)}
        if ea & all_b or eb & all_a:
            return True
    return False


@given(st.one_of(system_configs(), valid_configs()))
def test_validation_soundness(cfg):
    if validate_system_config(cfg) == []:
        assert not _oracle_conflict(cfg)


@given(system_configs())
def test_oracle_conflicts_are_always_reported(cfg):
    if _oracle_conflict(cfg):
        assert validate_system_config(cfg) != []


def test_flags_parse_and_names():
    f = RegionFlag.parse(["READ", "SHARED"])
    assert f.names() == ["READ", "SHARED"]
    assert RegionFlag.parse(["EXECUTE", "READ"]).names() == ["READ", "EXECUTE"]
