"""Abstract step-cost comparison of privcall, mprotect-pair and RPC protection.

Step counts only.  The privcall column is measured from the simulator's own
event counters; the other two are modeled from the events their kernels
would perform, charged in the same units.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, fields, replace

EVENTS = ("ring_transition", "descriptor_load", "context_save", "page_walk", "message")

# one user->kernel->user system call round trip
SYSCALL = Counter(ring_transition=2, descriptor_load=4, context_save=2)
# switching the CPU to another process and back
PROCESS_SWITCH = Counter(context_save=2)
# pages touched by the RPC server per request (code, stack, data) plus the client's refill (code, stack)
RPC_WORKING_SET = 6


@dataclass(frozen=True)
class CostModel:
    ring_transition: float = 30
    descriptor_load: float = 10
    context_save: float = 10
    page_walk: float = 150
    message: float = 800

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"weight {f.name} must be strictly positive")

    def scaled(self, name: str, factor: float) -> "CostModel":
        return replace(self, **{name: getattr(self, name) * factor})

    def with_overrides(self, overrides: dict[str, float]) -> "CostModel":
        unknown = set(overrides) - set(EVENTS)
        if unknown:
            raise ValueError(f"unknown weight(s): {', '.join(sorted(unknown))}")
        return replace(self, **overrides)

    def steps(self, counts: Counter) -> float:
        return sum(getattr(self, e) * counts.get(e, 0) for e in EVENTS)


def _times(c: Counter, n: int) -> Counter:
    return Counter({k: v * n for k, v in c.items()})


def mprotect_pair_counts(calls: int, protected_pages: int) -> Counter:
    """Unprotect, call, reprotect; each flip walks the protected range."""
    setup = SYSCALL + Counter(page_walk=protected_pages)
    per_call = _times(SYSCALL, 2) + Counter(page_walk=2 * protected_pages)
    return setup + _times(per_call, calls)


def rpc_counts(calls: int) -> Counter:
    """Request/reply over a local socket; (de)serialization is folded into the message weight."""
    round_trip = (_times(SYSCALL, 4) + _times(PROCESS_SWITCH, 2)
                  + Counter(message=2, page_walk=RPC_WORKING_SET))
    # connection setup costs one round trip of its own
    return _times(round_trip, calls + 1)


@dataclass
class MechanismRow:
    name: str
    counts: Counter
    steps: float


@dataclass
class CostTable:
    calls: int
    rows: list[MechanismRow] = field(default_factory=list)

    def steps(self) -> dict[str, float]:
        return {r.name: r.steps for r in self.rows}

    def ordered(self) -> bool:
        s = [r.steps for r in self.rows]
        return all(a < b for a, b in zip(s, s[1:]))

    def render(self) -> str:
        head = f"{'mechanism':<14}" + "".join(f"{e:>17}" for e in EVENTS) + f"{'steps':>12}"
        lines = [f"calls={self.calls}", head]
        for r in self.rows:
            lines.append(f"{r.name:<14}" + "".join(f"{r.counts.get(e, 0):>17}" for e in EVENTS)
                         + f"{r.steps:>12g}")
        lines.append(f"ordering privcall < mprotect-pair < rpc: {'yes' if self.ordered() else 'NO'}")
        return "\n".join(lines) + "\n"


def cost_table(privcall_counts: Counter, calls: int, protected_pages: int,
               model: CostModel = CostModel()) -> CostTable:
    table = CostTable(calls)
    for name, counts in (("privcall", privcall_counts),
                         ("mprotect-pair", mprotect_pair_counts(calls, protected_pages)),
                         ("rpc", rpc_counts(calls))):
        counts = Counter({e: counts.get(e, 0) for e in EVENTS})
        table.rows.append(MechanismRow(name, counts, model.steps(counts)))
    return table
