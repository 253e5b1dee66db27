"""Static system/cell configuration: parsing, printing, validation, ownership.

Configurations are written in a small block-structured text format::

    hardware {
        num_cpus = 2
        ram_size = 0x40000000
    }
    root "linux" {
        cpus = [0]
        region "ram" 0x00000000 0x3b000000 READ|WRITE|EXECUTE
    }
    cell "rtos" {
        cpus = [1]
        region "ram" 0x3b000000 0x01000000 READ|WRITE|EXECUTE
        region "ivshmem" 0x3f000000 0x00100000 READ|WRITE|SHARED
        irqs = [27, 84]
        comm = "ivshmem"
    }

``#`` starts a comment that runs to the end of the line. See docs/FORMATS.md.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable

ADDRESS_LIMIT = 1 << 32
MAX_IRQ = 1023
ROOT_DEFAULT_NAME = "root"


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


class UnknownCell(KeyError):
    pass


class RegionFlag(enum.Flag):
    READ = 1
    WRITE = 2
    EXECUTE = 4
    SHARED = 8

    @classmethod
    def parse(cls, names: Iterable[str]) -> RegionFlag:
        flags = cls(0)
        for name in names:
            flags |= cls[name]
        return flags

    def names(self) -> list[str]:
        return [f.name for f in RegionFlag if f in self]


@dataclass(frozen=True)
class MemoryRegion:
    name: str
    base: int
    size: int
    flags: RegionFlag

    @property
    def end(self) -> int:
        return self.base + self.size

    @property
    def shared(self) -> bool:
        return RegionFlag.SHARED in self.flags

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def overlaps(self, other: MemoryRegion) -> bool:
        return self.base < other.end and other.base < self.end

    def resource(self) -> tuple:
        return ("region", self.base, self.size, self.flags.value)


@dataclass(frozen=True)
class CellConfig:
    name: str
    cpus: frozenset[int] = frozenset()
    regions: tuple[MemoryRegion, ...] = ()
    irqs: frozenset[int] = frozenset()
    comm: str | None = None

    def region(self, name: str) -> MemoryRegion | None:
        for r in self.regions:
            if r.name == name:
                return r
        return None

    def comm_region(self) -> MemoryRegion | None:
        return self.region(self.comm) if self.comm is not None else None

    def resources(self) -> list[tuple]:
        res: list[tuple] = [("cpu", c) for c in self.cpus]
        res += [r.resource() for r in self.regions]
        res += [("irq", v) for v in self.irqs]
        return res


@dataclass(frozen=True)
class SystemConfig:
    num_cpus: int
    ram_size: int
    root: CellConfig
    cells: tuple[CellConfig, ...] = ()

    def all_cells(self) -> tuple[CellConfig, ...]:
        return (self.root,) + self.cells

    def cell(self, name: str) -> CellConfig:
        for c in self.all_cells():
            if c.name == name:
                return c
        raise UnknownCell(name)

    def digest(self) -> str:
        return hashlib.sha256(print_system_config(self).encode()).hexdigest()[:16]


class ViolationCode(enum.Enum):
    CPU_OVERLAP = "CPU_OVERLAP"
    CPU_OUT_OF_RANGE = "CPU_OUT_OF_RANGE"
    REGION_OVERLAP = "REGION_OVERLAP"
    REGION_OOB = "REGION_OOB"
    BAD_SHARED = "BAD_SHARED"
    DUP_NAME = "DUP_NAME"
    EMPTY_CPUSET = "EMPTY_CPUSET"


_CODE_ORDER = {code: n for n, code in enumerate(ViolationCode)}


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    subject: str
    detail: str

    def __str__(self) -> str:
        return f"{self.code.value} {self.subject}: {self.detail}"


# --------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<int>0[xX][0-9a-fA-F]+|[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{}\[\]=,|])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int

    @property
    def value(self):
        if self.kind == "int":
            return int(self.text, 0)
        if self.kind == "string":
            return self.text[1:-1].replace('\\"', '"').replace("\\\\", "\\")
        return self.text


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(_Token(kind, m.group(), line, col))
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.toks[self.pos]

    def next(self) -> _Token:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def error(self, msg: str, tok: _Token | None = None):
        tok = tok or self.peek()
        return ParseError(msg, tok.line, tok.col)

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = repr(text) if text else kind
            got = repr(tok.text) if tok.text else "end of input"
            raise self.error(f"expected {want}, got {got}", tok)
        return tok

    def int_list(self) -> list[tuple[int, _Token]]:
        self.expect("punct", "[")
        items = []
        if self.peek().text != "]":
            while True:
                tok = self.expect("int")
                items.append((tok.value, tok))
                if self.peek().text != ",":
                    break
                self.next()
        self.expect("punct", "]")
        return items

    def document(self) -> SystemConfig:
        hardware = None
        root = None
        cells = []
        while self.peek().kind != "eof":
            tok = self.expect("ident")
            if tok.text == "hardware":
                if hardware is not None:
                    raise self.error("duplicate hardware block", tok)
                hardware = self.hardware()
            elif tok.text == "root":
                if root is not None:
                    raise self.error("duplicate root block", tok)
                name = ROOT_DEFAULT_NAME
                if self.peek().kind == "string":
                    name = self.next().value
                root = self.cell_body(name)
            elif tok.text == "cell":
                name = self.expect("string").value
                cells.append(self.cell_body(name))
            else:
                raise self.error(f"unknown block {tok.text!r}", tok)
        eof = self.peek()
        if hardware is None:
            raise ParseError("missing hardware block", eof.line, eof.col)
        if root is None:
            raise ParseError("missing root block", eof.line, eof.col)
        return SystemConfig(hardware[0], hardware[1], root, tuple(cells))

    def hardware(self) -> tuple[int, int]:
        open_tok = self.expect("punct", "{")
        values: dict[str, int] = {}
        while self.peek().text != "}":
            key = self.expect("ident")
            if key.text not in ("num_cpus", "ram_size"):
                raise self.error(f"unknown hardware key {key.text!r}", key)
            if key.text in values:
                raise self.error(f"duplicate key {key.text!r}", key)
            self.expect("punct", "=")
            values[key.text] = self.expect("int").value
        self.expect("punct", "}")
        for key in ("num_cpus", "ram_size"):
            if key not in values:
                raise self.error(f"hardware block lacks {key}", open_tok)
        if values["num_cpus"] < 1:
            raise self.error("num_cpus must be at least 1", open_tok)
        return values["num_cpus"], values["ram_size"]

    def cell_body(self, name: str) -> CellConfig:
        if not name:
            raise self.error("cell name must be nonempty")
        self.expect("punct", "{")
        cpus: list[int] = []
        irqs: list[int] = []
        regions: list[MemoryRegion] = []
        comm = None
        seen: set[str] = set()
        while self.peek().text != "}":
            key = self.expect("ident")
            if key.text == "region":
                rname = self.expect("string").value
                base = self.expect("int").value
                size = self.expect("int").value
                flag_names = [self.expect("ident")]
                while self.peek().text == "|":
                    self.next()
                    flag_names.append(self.expect("ident"))
                for ftok in flag_names:
                    if ftok.text not in RegionFlag.__members__:
                        raise self.error(f"unknown region flag {ftok.text!r}", ftok)
                flags = RegionFlag.parse(t.text for t in flag_names)
                regions.append(MemoryRegion(rname, base, size, flags))
                continue
            if key.text in seen:
                raise self.error(f"duplicate key {key.text!r}", key)
            seen.add(key.text)
            self.expect("punct", "=")
            if key.text == "cpus":
                cpus = [v for v, _ in self.int_list()]
            elif key.text == "irqs":
                for v, tok in self.int_list():
                    if v > MAX_IRQ:
                        raise self.error(f"irq vector {v} outside 0..{MAX_IRQ}", tok)
                    if v in irqs:
                        raise self.error(f"irq vector {v} listed twice", tok)
                    irqs.append(v)
            elif key.text == "comm":
                comm = self.expect("string").value
            else:
                raise self.error(f"unknown cell key {key.text!r}", key)
        self.expect("punct", "}")
        return CellConfig(name, frozenset(cpus), tuple(regions), frozenset(irqs), comm)


def parse_system_config(text: str) -> SystemConfig:
    """Parse a configuration document; structural checks only."""
    return _Parser(text).document()


def _print_cell(keyword: str, cell: CellConfig) -> list[str]:
    name = cell.name.replace("\\", "\\\\").replace('"', '\\"')
    out = [f'{keyword} "{name}" {{']
    out.append("    cpus = [" + ", ".join(str(c) for c in sorted(cell.cpus)) + "]")
    for r in cell.regions:
        rname = r.name.replace("\\", "\\\\").replace('"', '\\"')
        if not r.flags:
            raise ValueError(f"region {r.name!r} has no flags; the format needs one")
        flags = "|".join(r.flags.names())
        out.append(f'    region "{rname}" 0x{r.base:08x} 0x{r.size:08x} {flags}')
    if cell.irqs:
        out.append("    irqs = [" + ", ".join(str(v) for v in sorted(cell.irqs)) + "]")
    if cell.comm is not None:
        comm = cell.comm.replace("\\", "\\\\").replace('"', '\\"')
        out.append(f'    comm = "{comm}"')
    out.append("}")
    return out


def print_system_config(cfg: SystemConfig) -> str:
    lines = [
        "hardware {",
        f"    num_cpus = {cfg.num_cpus}",
        f"    ram_size = 0x{cfg.ram_size:08x}",
        "}",
    ]
    lines += _print_cell("root", cfg.root)
    for cell in cfg.cells:
        lines.append("")
        lines += _print_cell("cell", cell)
    return "\n".join(lines) + "\n"


def load_system_config(path) -> SystemConfig:
    with open(path, encoding="utf-8") as f:
        return parse_system_config(f.read())


def example_config_text() -> str:
    """The shipped two-CPU board configuration (invented memory layout)."""
    return resources.files("partfi").joinpath("configs/bananapi.cfg").read_text("utf-8")


def example_config() -> SystemConfig:
    return parse_system_config(example_config_text())


# --------------------------------------------------------------------------
# Validation


def validate_system_config(cfg: SystemConfig) -> list[Violation]:
    """Return every broken invariant, ordered by cell then by code."""
    found: list[tuple[int, int, int, Violation]] = []

    def report(cell_idx: int, code: ViolationCode, subject: str, detail: str):
        found.append((cell_idx, _CODE_ORDER[code], len(found), Violation(code, subject, detail)))

    cells = cfg.all_cells()
    names_seen: dict[str, int] = {}
    cpu_owner: dict[int, str] = {}
    exclusive: list[tuple[str, MemoryRegion]] = []
    shared: list[tuple[str, MemoryRegion]] = []

    for idx, cell in enumerate(cells):
        if cell.name in names_seen:
            report(idx, ViolationCode.DUP_NAME, cell.name,
                   f"name already used by cell #{names_seen[cell.name]}")
        else:
            names_seen[cell.name] = idx

        if not cell.cpus:
            report(idx, ViolationCode.EMPTY_CPUSET, cell.name, "cell has no cpus")
        for cpu in sorted(cell.cpus):
            if not 0 <= cpu < cfg.num_cpus:
                report(idx, ViolationCode.CPU_OUT_OF_RANGE, cell.name,
                       f"cpu {cpu} not in 0..{cfg.num_cpus - 1}")
            elif cpu in cpu_owner:
                report(idx, ViolationCode.CPU_OVERLAP, cell.name,
                       f"cpu {cpu} already assigned to {cpu_owner[cpu]}")
            else:
                cpu_owner[cpu] = cell.name

        for n, r in enumerate(cell.regions):
            label = f"region {r.name!r}"
            if r.size <= 0:
                report(idx, ViolationCode.REGION_OOB, cell.name, f"{label} has size {r.size}")
                continue
            if r.end > ADDRESS_LIMIT:
                report(idx, ViolationCode.REGION_OOB, cell.name,
                       f"{label} 0x{r.base:x}+0x{r.size:x} overflows 32-bit space")
                continue
            if r.end > cfg.ram_size:
                report(idx, ViolationCode.REGION_OOB, cell.name,
                       f"{label} ends at 0x{r.end:x}, beyond ram_size 0x{cfg.ram_size:x}")
                continue
            if r.shared and RegionFlag.READ not in r.flags:
                report(idx, ViolationCode.BAD_SHARED, cell.name, f"{label} is SHARED without READ")
            for other in cell.regions[:n]:
                if other.size > 0 and r.overlaps(other):
                    report(idx, ViolationCode.REGION_OVERLAP, cell.name,
                           f"{label} overlaps {other.name!r} in the same cell")
            for owner, other in exclusive + shared:
                if not r.overlaps(other):
                    continue
                if r.shared and other.shared:
                    if (r.base, r.size) != (other.base, other.size):
                        report(idx, ViolationCode.BAD_SHARED, cell.name,
                               f"{label} partially overlaps shared region {other.name!r} of {owner}")
                else:
                    report(idx, ViolationCode.REGION_OVERLAP, cell.name,
                           f"{label} overlaps {other.name!r} of {owner}")
            if r.shared:
                users = {o for o, s in shared if (s.base, s.size) == (r.base, r.size)}
                users.discard(cell.name)
                if len(users) >= 2:
                    report(idx, ViolationCode.BAD_SHARED, cell.name,
                           f"{label} would be shared by more than two cells")
        for r in cell.regions:
            if r.size > 0 and r.end <= min(ADDRESS_LIMIT, cfg.ram_size):
                (shared if r.shared else exclusive).append((cell.name, r))

        if cell.comm is not None:
            comm = cell.region(cell.comm)
            if comm is None:
                report(idx, ViolationCode.BAD_SHARED, cell.name,
                       f"comm names unknown region {cell.comm!r}")
            elif not comm.shared:
                report(idx, ViolationCode.BAD_SHARED, cell.name,
                       f"comm region {cell.comm!r} is not SHARED")

    found.sort(key=lambda t: t[:3])
    return [v for *_, v in found]


# --------------------------------------------------------------------------
# Resource ownership


def resource_view(cfg: SystemConfig, active: Iterable[str]) -> dict[str, tuple]:
    """Map each cell to the sorted multiset of resources it currently owns.

    Inactive non-root cells own nothing; their declared resources are
    attributed to the root cell.
    """
    active = frozenset(active)
    return dict(_resource_view(cfg, active))


@functools.lru_cache(maxsize=256)
def _resource_view(cfg: SystemConfig, active: frozenset[str]) -> tuple:
    known = {c.name for c in cfg.cells}
    unknown = active - known
    if unknown:
        raise UnknownCell(sorted(unknown)[0])
    root = list(cfg.root.resources())
    view = []
    for cell in cfg.cells:
        if cell.name in active:
            view.append((cell.name, tuple(sorted(cell.resources()))))
        else:
            root += cell.resources()
            view.append((cell.name, ()))
    return ((cfg.root.name, tuple(sorted(root))),) + tuple(view)


def resource_total(view: dict[str, tuple]) -> Counter:
    total: Counter = Counter()
    for owned in view.values():
        total.update(owned)
    return total


def owned_intervals(owned: tuple) -> list[tuple[int, int]]:
    return [(res[1], res[1] + res[2]) for res in owned if res[0] == "region"]


@functools.lru_cache(maxsize=64)
def declared_intervals(cfg: SystemConfig) -> tuple[tuple[int, int], ...]:
    return tuple(sorted({(r.base, r.end) for c in cfg.all_cells() for r in c.regions}))
