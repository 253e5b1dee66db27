"""Transient bit-flip fault model applied at the handler dispatch seam."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, replace

from .hvmodel import NUM_SLOTS, Event, Hypercall, RegisterContext, Trap

WORD_BITS = 32
HIGH_K_RANGE = (2, 4)

SLOT_NAMES = tuple(f"r{n}" for n in range(16)) + ("esr",)
_SLOT_ALIASES = {"sp": 13, "lr": 14, "pc": 15}


class BitOutOfRange(ValueError):
    pass


class Target(enum.Enum):
    HVC = "hvc"
    TRAP = "trap"


@dataclass(frozen=True)
class Intensity:
    name: str
    period: int
    registers: int | None = 1  # None: draw 2..4 registers per firing

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.registers is not None and self.registers < 1:
            raise ValueError("registers must be >= 1")

    def draw_k(self, rng: random.Random) -> int:
        if self.registers is not None:
            return self.registers
        return rng.randint(*HIGH_K_RANGE)


MEDIUM = Intensity("medium", 100, 1)
HIGH = Intensity("high", 50, None)


def make_intensity(name: str, period: int | None = None, k: int | None = None) -> Intensity:
    base = {"medium": MEDIUM, "high": HIGH}[name.lower()]
    if base is MEDIUM and k not in (None, 1):
        raise ValueError("medium intensity flips exactly one register")
    if base is HIGH and k is not None and k < 2:
        raise ValueError("high intensity flips at least two registers")
    return replace(base, period=period or base.period, registers=k if k is not None else base.registers)


def slot_index(name) -> int:
    if isinstance(name, int):
        idx = name
    elif name in _SLOT_ALIASES:
        idx = _SLOT_ALIASES[name]
    elif name in SLOT_NAMES:
        idx = SLOT_NAMES.index(name)
    else:
        raise ValueError(f"unknown register slot {name!r}")
    if not 0 <= idx < NUM_SLOTS:
        raise ValueError(f"slot {idx} outside 0..{NUM_SLOTS - 1}")
    return idx


@dataclass(frozen=True)
class FaultPlan:
    target: Target
    intensity: Intensity
    seed: int = 0
    cpu_filter: int | None = None
    slots: tuple[int, ...] | None = None  # None: all 16 registers + esr

    def with_seed(self, seed: int) -> FaultPlan:
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "target": self.target.value,
            "cpu_filter": self.cpu_filter,
            "intensity": self.intensity.name,
            "period": self.intensity.period,
            "k": self.intensity.registers,
            "seed": self.seed,
            "slots": None if self.slots is None else [SLOT_NAMES[s] for s in self.slots],
        }

    @classmethod
    def from_dict(cls, d: dict) -> FaultPlan:
        unknown = set(d) - _PLAN_KEYS
        if unknown:
            raise ValueError(f"unknown fault plan key(s): {', '.join(sorted(unknown))}")
        slots = d.get("slots")
        return cls(
            target=Target(d["target"]),
            intensity=make_intensity(d.get("intensity", "medium"), d.get("period"), d.get("k")),
            seed=int(d.get("seed", 0)),
            cpu_filter=d.get("cpu_filter"),
            slots=None if slots is None else tuple(slot_index(s) for s in slots),
        )


_PLAN_KEYS = frozenset({"target", "cpu_filter", "intensity", "period", "k", "seed", "slots"})


@dataclass(frozen=True)
class Flip:
    slot: int
    bit: int
    pre: int
    post: int

    def to_list(self) -> list:
        return [SLOT_NAMES[self.slot] if self.slot < len(SLOT_NAMES) else self.slot,
                self.bit, self.pre, self.post]


@dataclass(frozen=True)
class InjectionRecord:
    index: int
    cpu: int
    target: Target
    flips: tuple[Flip, ...]

    def to_record(self) -> dict:
        return {"i": self.index, "kind": "inject", "cpu": self.cpu,
                "target": self.target.value, "flips": [f.to_list() for f in self.flips]}


def bit_flip(word: int, bit: int, width: int = WORD_BITS) -> int:
    if not 0 <= bit < width:
        raise BitOutOfRange(f"bit {bit} outside 0..{width - 1}")
    return word ^ (1 << bit)


def should_fire(call_count: int, period: int) -> bool:
    if call_count < 1:
        raise ValueError("call_count counts from 1")
    return call_count % period == 0


def corrupt_words(words, k: int, rng: random.Random, width: int = WORD_BITS,
                  slots=None) -> tuple[tuple[int, ...], list[Flip]]:
    """Flip one random bit in each of ``k`` distinct random slots of ``words``."""
    pool = list(range(len(words))) if slots is None else list(slots)
    chosen = rng.sample(pool, min(k, len(pool)))
    out = list(words)
    flips = []
    for slot in chosen:
        bit = rng.randrange(width)
        pre = out[slot]
        out[slot] = bit_flip(pre, bit, width)
        flips.append(Flip(slot, bit, pre, out[slot]))
    return tuple(out), flips


def corrupt_context(ctx: RegisterContext, intensity: Intensity, rng: random.Random,
                    slots=None) -> tuple[RegisterContext, list[Flip]]:
    k = intensity.draw_k(rng)
    words, flips = corrupt_words(ctx.words(), k, rng, slots=slots)
    return RegisterContext.from_words(words), flips


class Injector:
    """Per-trial injector; owns only its filtered call counter and RNG."""

    def __init__(self, plan: FaultPlan):
        self.plan = plan
        self.calls = 0
        self.rng = random.Random(plan.seed)

    def matches(self, ev: Event) -> bool:
        if self.plan.target is Target.HVC:
            if not isinstance(ev, Hypercall):
                return False
        elif not isinstance(ev, Trap):
            return False
        return self.plan.cpu_filter is None or ev.cpu == self.plan.cpu_filter

    def intercept(self, ev: Event, index: int = 0) -> tuple[Event, InjectionRecord | None]:
        if not self.matches(ev):
            return ev, None
        self.calls += 1
        if not should_fire(self.calls, self.plan.intensity.period):
            return ev, None
        ctx, flips = corrupt_context(ev.ctx, self.plan.intensity, self.rng, self.plan.slots)
        return ev._replace(ctx=ctx), InjectionRecord(index, ev.cpu, self.plan.target, tuple(flips))


def intercept(injector: Injector | None, ev: Event, index: int = 0):
    """Pass ``ev`` through ``injector``; a missing injector never corrupts."""
    if injector is None:
        return ev, None
    return injector.intercept(ev, index)

