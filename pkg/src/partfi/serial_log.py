"""Serial-console transcripts: rendering simulated trials and ingesting real ones.

Grammar (one message per line, documented in ``docs/FORMATS.md``)::

    HV: cell "<name>" created|running|shut down|failed|destroyed
    HV: CPU <n> online
    PANIC: data abort at 0x<addr> on CPU <n>
    PARK code=0x24 cpu=<n> [cell=<name>]
    RESULT: cell <op> "<name>" OK|EINVAL|SKIPPED

Blank lines and lines with control characters are UNKNOWN; everything else
is console output of the non-root guest.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

from .campaign import LOG_FORMAT, TrialLog, UnclassifiableLog
from .hvmodel import UNHANDLED_CODE_TEXT, CellStatus, record


class SerialKind(enum.Enum):
    CONSOLE = "CONSOLE"
    HV_MESSAGE = "HV_MESSAGE"
    PANIC = "PANIC"
    PARK = "PARK"
    RESULT = "RESULT"
    UNKNOWN = "UNKNOWN"


_STATUS_WORDS = {
    CellStatus.CREATED: "created",
    CellStatus.RUNNING: "running",
    CellStatus.SHUT_DOWN: "shut down",
    CellStatus.FAILED: "failed",
    CellStatus.ABSENT: "destroyed",
}
_WORD_STATUS = {w: s for s, w in _STATUS_WORDS.items()}

_HV_CELL = re.compile(r'^HV: cell "([^"]+)" (created|running|shut down|failed|destroyed)$')
_HV_CPU = re.compile(r"^HV: CPU (\d+) online$")
_PANIC = re.compile(r"^PANIC:(?: data abort at 0x([0-9a-fA-F]+))?(?: on CPU (\d+))?")
_PARK = re.compile(r"^PARK code=(\S+)(?: cpu=(\d+))?(?: cell=(\S+))?$")
_RESULT = re.compile(r'^RESULT: cell (create|start|shutdown|destroy) "([^"]+)" (OK|EINVAL|SKIPPED)$')
_CONTROL = re.compile(r"[\x00-\x08\x0b-\x1f\x7f]")


@dataclass(frozen=True)
class SerialLine:
    raw: str
    kind: SerialKind
    fields: dict = field(default_factory=dict, compare=False)


def parse_serial_line(raw: str) -> SerialLine:
    """Classify one transcript line; never fails (UNKNOWN is the fallback)."""
    line = raw.rstrip("\r\n")
    if not line.strip() or _CONTROL.search(line):
        return SerialLine(raw, SerialKind.UNKNOWN)
    if line.startswith("HV:"):
        if m := _HV_CELL.match(line):
            return SerialLine(raw, SerialKind.HV_MESSAGE,
                              {"cell": m[1], "status": _WORD_STATUS[m[2]].value})
        if m := _HV_CPU.match(line):
            return SerialLine(raw, SerialKind.HV_MESSAGE, {"cpu": int(m[1]), "online": True})
        return SerialLine(raw, SerialKind.UNKNOWN)
    if line.startswith("PANIC:"):
        m = _PANIC.match(line)
        return SerialLine(raw, SerialKind.PANIC, {
            "addr": int(m[1], 16) if m[1] else None,
            "cpu": int(m[2]) if m[2] else None,
        })
    if line.startswith("PARK "):
        if m := _PARK.match(line):
            return SerialLine(raw, SerialKind.PARK, {
                "code": m[1], "cpu": int(m[2]) if m[2] else None, "cell": m[3]})
        return SerialLine(raw, SerialKind.UNKNOWN)
    if line.startswith("RESULT:"):
        if m := _RESULT.match(line):
            return SerialLine(raw, SerialKind.RESULT, {"op": m[1], "cell": m[2], "result": m[3]})
        return SerialLine(raw, SerialKind.UNKNOWN)
    return SerialLine(raw, SerialKind.CONSOLE, {"line": line})


def to_serial(log: TrialLog) -> list[str]:
    """What the board's serial port would show for ``log``.

    Root console output is not part of the transcript; the silent handoff
    park prints nothing, which is exactly what makes it silent.
    """
    cell = log.header.get("cell")
    out = []
    for r in log.records:
        kind = r["kind"]
        if kind == "lifecycle":
            out.append(f'HV: cell "{r["cell"]}" {_STATUS_WORDS[CellStatus(r["new"])]}')
        elif kind == "online":
            out.append(f"HV: CPU {r['cpu']} online")
        elif kind == "panic":
            out.append(f"PANIC: data abort at 0x{r['addr']:08x} on CPU {r['cpu']}")
        elif kind == "park" and r.get("code") == UNHANDLED_CODE_TEXT:
            suffix = f" cell={r['cell']}" if r.get("cell") else ""
            out.append(f"PARK code={r['code']} cpu={r['cpu']}{suffix}")
        elif kind == "cmd":
            out.append(f'RESULT: cell {r["op"]} "{r["cell"]}" {r["result"]}')
        elif kind == "console" and r["cell"] == cell:
            out.append(r["line"])
    return out


def ingest(text: str | list[str], golden: list | None = None) -> tuple[TrialLog, list[SerialLine]]:
    """Rebuild a trial log from a transcript so the native classifier applies."""
    raw = text.splitlines() if isinstance(text, str) else list(text)
    if not raw:
        raise UnclassifiableLog("empty serial log")
    parsed = [parse_serial_line(ln) for ln in raw]
    cell = None
    for p in parsed:
        if p.kind is SerialKind.RESULT or (p.kind is SerialKind.HV_MESSAGE and "cell" in p.fields
                                           and p.fields["status"] == CellStatus.CREATED.value):
            cell = p.fields["cell"]
            break
    records: list[dict] = []
    status: dict[str, str] = {}
    for i, p in enumerate(parsed):
        f = p.fields
        if p.kind is SerialKind.HV_MESSAGE and "cell" in f:
            old = status.get(f["cell"], CellStatus.ABSENT.value)
            records.append(record(i, "lifecycle", cell=f["cell"], old=old, new=f["status"]))
            status[f["cell"]] = f["status"]
        elif p.kind is SerialKind.HV_MESSAGE:
            records.append(record(i, "online", cpu=f["cpu"], cell=cell))
        elif p.kind is SerialKind.PANIC:
            records.append(record(i, "panic", cpu=f["cpu"], cell=cell, addr=f["addr"]))
        elif p.kind is SerialKind.PARK:
            victim = f["cell"] or cell
            records.append(record(i, "park", cpu=f["cpu"], cell=victim, code=f["code"]))
            if f["code"] == UNHANDLED_CODE_TEXT:
                old = status.get(victim, CellStatus.RUNNING.value)
                records.append(record(i, "lifecycle", cell=victim, old=old,
                                      new=CellStatus.FAILED.value))
                status[victim] = CellStatus.FAILED.value
        elif p.kind is SerialKind.RESULT:
            records.append(record(i, "cmd", op=f["op"], cell=f["cell"], result=f["result"]))
        elif p.kind is SerialKind.CONSOLE:
            records.append(record(i, "console", cell=cell, cpu=None, line=f["line"]))
    records.append(record(len(parsed), "final", source="serial",
                          unknown=sum(p.kind is SerialKind.UNKNOWN for p in parsed)))
    header = {"kind": "header", "format": LOG_FORMAT, "source": "serial", "cell": cell,
              "golden": golden}
    return TrialLog(header, records), parsed
