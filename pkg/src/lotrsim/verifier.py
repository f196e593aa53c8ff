"""Transfer-graph construction and the memory / control-transfer requirement checks."""
from __future__ import annotations

import copy
import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import lotr, transfer
from .gates import PRIVUSER_FRAME_SIZE
from .machine import (
    LOW32_MASK,
    PAGE_SIZE,
    Bitness,
    Fault,
    GateDescriptor,
    MachineState,
    PageAccess,
    SegmentDescriptor,
    Selector,
    TableKind,
    check_exec,
    code_segment,
    data_segment,
    page_of,
    read_mem,
    resolve_code,
    translate,
    write_mem,
)

PRIVUSER_RING = 2


class Requirement(enum.Enum):
    MSR1 = "M-SR1"
    MSR2 = "M-SR2"
    CTSR = "CT-SR"
    P1 = "P1"
    P2 = "P2"
    C = "C"


@dataclass(frozen=True)
class ModeNode:
    ring: int
    bitness: Bitness
    cs: Selector

    def __str__(self):
        return f"R{self.ring}_{self.bitness.value}@{self.cs.ti.name.lower()}:{self.cs.index}"


@dataclass(frozen=True)
class TransferEdge:
    src: ModeNode
    dst: ModeNode
    controlled: bool
    mechanism: transfer.TransferKind

    def __str__(self):
        mech = type(self.mechanism).__name__
        return f"{self.src} -{mech}-> {self.dst}"


@dataclass
class TransferGraph:
    nodes: list[ModeNode] = field(default_factory=list)
    edges: list[TransferEdge] = field(default_factory=list)

    def successors(self, node: ModeNode, controlled: Optional[bool] = None) -> list[TransferEdge]:
        return [e for e in self.edges
                if e.src == node and (controlled is None or e.controlled == controlled)]

    def node_labels(self) -> set[str]:
        return {f"R{n.ring}_{n.bitness.value}" for n in self.nodes}


@dataclass
class Verdict:
    requirement: Requirement
    holds: bool
    witness: list = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def line(self) -> str:
        text = f"REQ {self.requirement.value} {'HOLDS' if self.holds else 'FAILS'}"
        if not self.holds:
            text += " witness: " + "; ".join(str(w) for w in self.witness)
        return text


def build_transfer_graph(state: MachineState) -> TransferGraph:
    graph = TransferGraph()
    index: dict[tuple[TableKind, int], ModeNode] = {}
    for ti in (TableKind.GDT, TableKind.LDT):
        for slot, desc in state.table(ti).installed():
            if isinstance(desc, SegmentDescriptor) and desc.is_code:
                node = ModeNode(desc.dpl, desc.bitness, Selector(slot, ti, desc.dpl))
                graph.nodes.append(node)
                index[(ti, slot)] = node
    for node in graph.nodes:
        for step in transfer.enumerate_transfers(state, (node.ring, node.bitness), node.cs):
            if isinstance(step.mechanism, transfer.NearTransfer):
                dst = node
            else:
                dst = index.get((step.selector.ti, step.selector.index))
                if dst is None:
                    continue
            graph.edges.append(TransferEdge(node, dst, step.controlled, step.mechanism))
    return graph


def check_ctsr(graph: TransferGraph, privuser_ring: int = PRIVUSER_RING) -> Verdict:
    """No non-controlled path from the 32-bit PrivUser mode to a 64-bit ring below 3."""
    starts = [n for n in graph.nodes if n.ring == privuser_ring and n.bitness is Bitness.X32]
    parent: dict[ModeNode, Optional[TransferEdge]] = {n: None for n in starts}
    queue = deque(starts)
    while queue:
        node = queue.popleft()
        if node.bitness is Bitness.X64 and node.ring < 3:
            path = []
            while parent[node] is not None:
                path.append(parent[node])
                node = parent[node].src
            return Verdict(Requirement.CTSR, False, list(reversed(path)))
        for edge in graph.successors(node, controlled=False):
            if edge.dst not in parent:
                parent[edge.dst] = edge
                queue.append(edge.dst)
    warnings = [f"ring {n.ring} 32-bit code segment {n.cs} outside the PrivUser mode"
                for n in graph.nodes
                if n.bitness is Bitness.X32 and n.ring < 3 and n.ring != privuser_ring]
    return Verdict(Requirement.CTSR, True, warnings=warnings)


def replay_witness(state: MachineState, start: ModeNode, path: list[TransferEdge]) -> tuple[int, Bitness]:
    """Execute a witness path on a copy of ``state``; returns the final (CPL, bitness)."""
    sim = state.clone()
    sim.reset()
    sim.regs.cs = start.cs
    for edge in path:
        mech = edge.mechanism
        if isinstance(mech, transfer.FarJump):
            transfer.far_jump(sim, mech.selector, mech.offset)
        elif isinstance(mech, transfer.LongReturn):
            transfer.plant_frame(sim, transfer.SavedFrame(mech.frame.rip, mech.frame.cs,
                                                          sim.regs.rsp, sim.regs.ss))
            transfer.long_return(sim)
        elif isinstance(mech, transfer.CallGateCall):
            transfer.long_call(sim, mech.selector)
    return sim.cpl, sim.bitness


# -- handler-context instrumentation --------------------------------------

def privuser_context(state: MachineState, handle: lotr.LotrHandle) -> lotr.PrivUserContext:
    """A copy of the machine parked at the PrivUser entry, as a routine would run.

    Registers are set directly rather than through a privcall so the probe
    still works on layouts whose gates are broken.
    """
    sim, sim_handle = copy.deepcopy((state, handle))
    sim.reset()
    regs = sim.regs
    regs.cs, regs.ss = lotr.PU_CS, lotr.PU_DS
    regs.rsp = sim_handle.config.stack_top - PRIVUSER_FRAME_SIZE
    regs.rip = sim_handle.config.entry_point
    return lotr.PrivUserContext(sim, sim_handle)


def _attempt(state: MachineState, fn) -> Optional[Fault]:
    try:
        fn()
    except Fault as exc:
        state.reset()
        return exc
    return None


def check_msr1(state: MachineState, handle: lotr.LotrHandle) -> Verdict:
    """Ring 3 must fault on read, write and fetch of every PrivUser page."""
    sim = state.clone()
    sim.reset()
    if sim.cpl != 3:
        raise ValueError("M-SR1 is checked from a user-mode machine")
    witness = []
    for page in handle.privuser_pages():
        addr = page * PAGE_SIZE
        if _attempt(sim, lambda: read_mem(sim, addr, 1)) is None:
            witness.append(f"ring3 read page {page:#x}")
        if _attempt(sim, lambda: write_mem(sim, addr, sim.peek(addr, 1))) is None:
            witness.append(f"ring3 write page {page:#x}")
        if _attempt(sim, lambda: check_exec(sim, 3, page)) is None:
            witness.append(f"ring3 exec page {page:#x}")
    return Verdict(Requirement.MSR1, not witness, witness)


def _kernel_pages(state: MachineState) -> list[int]:
    return sorted(p for p, e in state.pages.items() if e.kernel)


def check_msr2(state: MachineState, handle: lotr.LotrHandle) -> Verdict:
    """From inside a privcall, no addressing form may reach a kernel page."""
    kernel = _kernel_pages(state)
    if not kernel:
        return Verdict(Requirement.MSR2, True)

    def probe(ctx: lotr.PrivUserContext):
        sim = ctx.state
        seg = resolve_code(sim, sim.regs.cs)
        data = sim.table(sim.regs.ss.ti)[sim.regs.ss.index]
        edges = {seg.base + seg.limit - 1, seg.base + seg.limit}
        if isinstance(data, SegmentDescriptor):
            edges |= {data.base + data.limit - 1, data.base + data.limit}
        hits = []
        kernel_set = set(kernel)
        for page in kernel:
            addr = page * PAGE_SIZE
            for form, a in (("direct", addr), ("alias32", addr & LOW32_MASK), ("direct-end", addr + PAGE_SIZE - 1)):
                hits += _probe_address(sim, kernel_set, form, a)
        for a in sorted(edges):
            hits += _probe_address(sim, kernel_set, "limit-edge", a)
        return hits

    witness = probe(privuser_context(state, handle))
    return Verdict(Requirement.MSR2, not witness, witness)


def _probe_address(sim: MachineState, kernel_set: set[int], form: str, addr: int) -> list[str]:
    hits = []
    try:
        linear = translate(sim, addr, 1)
    except Fault:
        sim.reset()
        return hits
    if page_of(linear) not in kernel_set:
        return hits
    if _attempt(sim, lambda: read_mem(sim, addr, 1)) is None:
        hits.append(f"{form} read {addr:#x} -> kernel page {page_of(linear):#x}")
    if _attempt(sim, lambda: write_mem(sim, addr, sim.peek(linear, 1))) is None:
        hits.append(f"{form} write {addr:#x} -> kernel page {page_of(linear):#x}")
    return hits


def _gate_targets(state: MachineState):
    for ti in (TableKind.GDT, TableKind.LDT):
        for slot, desc in state.table(ti).installed():
            if isinstance(desc, GateDescriptor):
                target = state.table(desc.target_selector.ti)[desc.target_selector.index] \
                    if 0 < desc.target_selector.index < state.table(desc.target_selector.ti).capacity else None
                yield Selector(slot, ti, 0), desc, target


def check_p1_p2_c(state: MachineState, privuser_ring: int = PRIVUSER_RING) -> tuple[Verdict, Verdict, Verdict]:
    p1, c = [], []
    for sel, gate, target in _gate_targets(state):
        name = f"gate {sel.ti.name.lower()}:{sel.index}"
        if not isinstance(target, SegmentDescriptor) or not target.is_code:
            c.append(f"{name} targets a non-code slot")
            continue
        if target.dpl >= privuser_ring:
            p1.append(f"{name} enters ring {target.dpl}, not above PrivUser ring {privuser_ring}")
        if target.bitness is not Bitness.X64:
            c.append(f"{name} targets a 32-bit code segment")
    p2 = [f"{ti.name.lower()}:{slot} is a 64-bit ring {privuser_ring} code segment"
          for ti in (TableKind.GDT, TableKind.LDT)
          for slot, d in state.table(ti).installed()
          if isinstance(d, SegmentDescriptor) and d.is_code
          and d.dpl == privuser_ring and d.bitness is Bitness.X64]
    return (Verdict(Requirement.P1, not p1, p1),
            Verdict(Requirement.P2, not p2, p2),
            Verdict(Requirement.C, not c, c))


def probe_enter_gate(state: MachineState, handle: lotr.LotrHandle) -> list[str]:
    """PrivUser code calls CG1 itself; the Enter gate must refuse it."""
    ctx = privuser_context(state, handle)
    sim = ctx.state
    try:
        transfer.long_call(sim, lotr.CG1)
        ctx.handle.enter.run(sim)
    except Fault:
        return []
    return [f"R{PRIVUSER_RING}_x32 passed CG1 and {ctx.handle.enter.name} into ring {sim.cpl}"]


def check_ctsr_machine(state: MachineState, handle: Optional[lotr.LotrHandle]) -> Verdict:
    verdict = check_ctsr(build_transfer_graph(state))
    if verdict.holds and handle is not None:
        leaks = probe_enter_gate(state, handle)
        if leaks:
            return Verdict(Requirement.CTSR, False, leaks, verdict.warnings)
    return verdict


def verify_all(state: MachineState, handle: lotr.LotrHandle) -> list[Verdict]:
    p1, p2, c = check_p1_p2_c(state)
    return [check_msr1(state, handle), check_msr2(state, handle),
            check_ctsr_machine(state, handle), p1, p2, c]


# -- mutation harness -----------------------------------------------------

def _drop_supervisor(state, handle):
    start = handle.config.privuser_heap[0]
    state.pages[page_of(start)].access = PageAccess.USER


def _add_r2_x64(state, handle):
    slot = next(i for i in range(1, state.ldt.capacity) if state.ldt[i] is None)
    state.ldt.raw_install(slot, code_segment(PRIVUSER_RING, Bitness.X64))


def _demote_gate_ring(state, handle):
    state.ldt.raw_install(lotr.GATE_CS.index, code_segment(PRIVUSER_RING, Bitness.X64))


KERNEL_ALIAS = 0x0010_0000


def _widen_privuser_limit(state, handle):
    state.ldt.raw_install(lotr.PU_DS.index, data_segment(PRIVUSER_RING, 0, 1 << 64))
    state.map_range(KERNEL_ALIAS, PAGE_SIZE, PageAccess.SUPERVISOR, writable=True, kernel=True)


def _gate_to_x32(state, handle):
    slot = next(i for i in range(1, state.ldt.capacity) if state.ldt[i] is None)
    state.ldt.raw_install(slot, GateDescriptor(lotr.PU_CS, handle.config.entry_point, 3))


def _remove_enter_check(state, handle):
    handle.enter.ops = [op for op in handle.enter.ops if op.op != "cmp_saved_ring"]


MUTATIONS: dict[str, Callable] = {
    "drop-supervisor-marking": _drop_supervisor,
    "add-r2-x64-segment": _add_r2_x64,
    "demote-gate-ring": _demote_gate_ring,
    "widen-privuser-limit": _widen_privuser_limit,
    "inject-gate-to-x32": _gate_to_x32,
    "remove-enter-gate-check": _remove_enter_check,
}


@dataclass
class MutationResult:
    name: str
    flipped: list[Requirement]

    @property
    def detected(self) -> bool:
        return bool(self.flipped)

    def line(self) -> str:
        status = "DETECTED" if self.detected else "UNDETECTED"
        flips = ",".join(r.value for r in self.flipped) or "-"
        return f"MUTATION {self.name} {status} flips={flips}"


def run_mutation_suite(state: MachineState, handle: lotr.LotrHandle,
                       mutations: Optional[dict[str, Callable]] = None) -> list[MutationResult]:
    """Apply each mutation to its own copy and report which verdicts it breaks."""
    baseline = {v.requirement: v.holds for v in verify_all(state, handle)}
    results = []
    for name, mutate in (MUTATIONS if mutations is None else mutations).items():
        sim, sim_handle = copy.deepcopy((state, handle))
        sim_handle.state = sim
        mutate(sim, sim_handle)
        verdicts = verify_all(sim, sim_handle)
        flipped = [v.requirement for v in verdicts if baseline[v.requirement] and not v.holds]
        results.append(MutationResult(name, flipped))
    return results
