"""Inter-segment control transfers: callgate long call, long return, far jump.

The privilege rules are exposed as three small predicates so the edge
enumeration below and the executing operations cannot disagree.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .machine import (
    Bitness,
    Fault,
    FaultKind,
    GateDescriptor,
    MachineState,
    SegmentDescriptor,
    Selector,
    TableKind,
    check_exec,
    effective_address,
    page_of,
    pop,
    push,
    read_u64,
    resolve_code,
    resolve_selector,
)


def callgate_permits(n: int, m: int, rmpl: int) -> bool:
    # Literal reading of the callgate check: deny if n > RMPL or n <= m.
    # Note this also denies same-ring transit, which real x86 allows.
    return not (n > rmpl or n <= m)


def return_permits(current: int, dest: int) -> bool:
    return dest >= current


def jump_permits(cpl: int, dpl: int) -> bool:
    return dpl >= cpl


@dataclass(frozen=True)
class SavedFrame:
    rip: int
    cs: Selector
    rsp: int
    ss: Selector

    def push_order(self) -> tuple[int, int, int, int]:
        """Words in the order they are pushed (SS first, RIP last)."""
        return (self.ss.encode(), self.rsp, self.cs.encode(), self.rip)


@dataclass(frozen=True)
class CallGateCall:
    selector: Selector


@dataclass(frozen=True)
class LongReturn:
    frame: Optional[SavedFrame] = None


@dataclass(frozen=True)
class FarJump:
    selector: Selector
    offset: int = 0


@dataclass(frozen=True)
class NearTransfer:
    offset: int = 0


TransferKind = Union[CallGateCall, LongReturn, FarJump, NearTransfer]


@dataclass(frozen=True)
class Transfer:
    """One step out of an execution mode."""

    mechanism: TransferKind
    ring: int
    bitness: Bitness
    selector: Optional[Selector]
    controlled: bool

    @property
    def label(self) -> str:
        return "controlled" if self.controlled else "non-controlled"


def _latched(state: MachineState, fn):
    state.ensure_running()
    try:
        return fn()
    except Fault as exc:
        state.status = exc
        raise


def _load_stack_segment(state: MachineState, ss: Selector, ring: int) -> None:
    try:
        desc = resolve_selector(state, ss)
    except Fault:
        raise Fault(FaultKind.InvalidSelector, f"stack selector {ss} names no descriptor") from None
    if not isinstance(desc, SegmentDescriptor) or desc.is_code:
        raise Fault(FaultKind.InvalidSelector, f"stack selector {ss} is not a data segment")
    if desc.dpl != ring:
        raise Fault(FaultKind.GeneralProtection, f"stack segment {ss} has DPL {desc.dpl}, need {ring}")


def long_call(state: MachineState, sel: Selector) -> None:
    """``lcall`` through the callgate named by ``sel``."""

    def run():
        try:
            gate = resolve_selector(state, sel)
        except Fault as exc:
            raise Fault(FaultKind.InvalidGate, exc.detail) from None
        if not isinstance(gate, GateDescriptor):
            raise Fault(FaultKind.InvalidGate, f"{sel} is not a callgate")
        state.charge("descriptor_load")
        target = resolve_code(state, gate.target_selector)
        n, m = state.cpl, target.dpl
        if not callgate_permits(n, m, gate.rmpl):
            raise Fault(FaultKind.GeneralProtection,
                        f"callgate denied: CPL {n}, target ring {m}, RMPL {gate.rmpl}")

        regs = state.regs
        saved = SavedFrame(regs.rip, regs.cs, regs.rsp, regs.ss)
        if m not in state.tss.ring_stacks:
            raise Fault(FaultKind.GeneralProtection, f"no ring {m} stack in the TSS")
        new_ss, new_rsp = state.tss.ring_stacks[m]
        _load_stack_segment(state, new_ss, m)

        regs.ss = new_ss.with_rpl(m)
        regs.rsp = new_rsp
        regs.cs = gate.target_selector.with_rpl(m)
        regs.rip = gate.target_offset
        state.charge("descriptor_load", 2)
        state.charge("ring_transition")

        for word in saved.push_order():
            push(state, word)
        state.charge("context_save")

    _latched(state, run)


def long_return(state: MachineState) -> None:
    """``lret``: pop RIP, CS, RSP, SS and resume at equal or lower privilege."""

    def run():
        regs = state.regs
        current = state.cpl
        dest_cs = Selector.decode(read_u64(state, regs.rsp + 8))
        if not return_permits(current, dest_cs.rpl):
            raise Fault(FaultKind.GeneralProtection,
                        f"lret denied: DestPriv {dest_cs.rpl} < CurrentPriv {current}")
        rip = pop(state)
        cs = Selector.decode(pop(state))
        rsp = pop(state)
        ss = Selector.decode(pop(state))
        try:
            desc = resolve_code(state, cs)
        except Fault:
            raise Fault(FaultKind.GeneralProtection, f"lret: {cs} is not a code segment") from None
        if desc.dpl != cs.rpl:
            raise Fault(FaultKind.GeneralProtection, f"lret: {cs} RPL does not match DPL {desc.dpl}")
        _load_stack_segment(state, ss, cs.rpl)

        regs.rip, regs.cs, regs.rsp, regs.ss = rip, cs, rsp, ss
        state.charge("descriptor_load", 2)
        state.charge("context_save")
        if cs.rpl != current:
            state.charge("ring_transition")

    _latched(state, run)


def far_jump(state: MachineState, sel: Selector, offset: int) -> None:
    def run():
        desc = resolve_selector(state, sel)
        if not isinstance(desc, SegmentDescriptor) or not desc.is_code:
            raise Fault(FaultKind.GeneralProtection, f"far jump target {sel} is not a code segment")
        if not jump_permits(state.cpl, desc.dpl):
            raise Fault(FaultKind.GeneralProtection,
                        f"far jump from CPL {state.cpl} to DPL {desc.dpl} segment {sel}")
        if desc.dpl != state.cpl:
            state.charge("ring_transition")
        state.regs.cs = sel.with_rpl(desc.dpl)
        state.regs.rip = offset
        state.charge("descriptor_load")

    _latched(state, run)


def near_jump(state: MachineState, offset: int) -> None:
    def run():
        cs = resolve_code(state, state.regs.cs)
        state.regs.rip = effective_address(state, offset, cs)

    _latched(state, run)


def fetch(state: MachineState) -> None:
    """Instruction fetch at the current RIP: segment limit plus page execute check."""

    def run():
        cs = resolve_code(state, state.regs.cs)
        linear = effective_address(state, state.regs.rip, cs)
        check_exec(state, state.cpl, page_of(linear))

    _latched(state, run)


def plant_frame(state: MachineState, frame: SavedFrame) -> None:
    """Push an arbitrary frame onto the current stack, as any attacker can."""

    def run():
        for word in frame.push_order():
            push(state, word)

    _latched(state, run)


def enumerate_transfers(state: MachineState, origin: tuple[int, Bitness],
                        selector: Optional[Selector] = None) -> list[Transfer]:
    """Every mode reachable in one step from ``origin``, ordered by (table, slot).

    Long returns are enumerated over every code selector, since the frame
    popped by ``lret`` is whatever the running code chose to put there.
    """
    if not state.running:
        return []
    ring, bitness = origin
    out = [Transfer(NearTransfer(), ring, bitness, selector, controlled=False)]
    for ti in (TableKind.GDT, TableKind.LDT):
        for slot, desc in state.table(ti).installed():
            if slot == 0:
                continue
            if isinstance(desc, SegmentDescriptor):
                if not desc.is_code or not jump_permits(ring, desc.dpl):
                    continue
                target = Selector(slot, ti, desc.dpl)
                out.append(Transfer(FarJump(target, desc.base), desc.dpl, desc.bitness, target, False))
                frame = SavedFrame(desc.base, target, 0, Selector(0))
                if return_permits(ring, desc.dpl):
                    out.append(Transfer(LongReturn(frame), desc.dpl, desc.bitness, target, False))
            else:
                try:
                    target_desc = resolve_code(state, desc.target_selector)
                except Fault:
                    continue
                if callgate_permits(ring, target_desc.dpl, desc.rmpl):
                    target = desc.target_selector.with_rpl(target_desc.dpl)
                    out.append(Transfer(CallGateCall(Selector(slot, ti, ring)), target_desc.dpl,
                                        target_desc.bitness, target, True))
    return out
