"""Enter/Exit gate programs as interpreted micro-op lists.

A gate is data: a tuple of :class:`MicroOp` records placed at a fixed
Supervisor code address.  Each op occupies ``OP_STRIDE`` bytes of address
space so every op has its own fetch address and is fetch-checked at the
running ring before it executes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .machine import (
    ADDR_MASK,
    Fault,
    FaultKind,
    MachineState,
    check_exec,
    page_of,
    pop,
    push,
    read_u64,
    write_mem,
    write_u64,
)
from . import transfer

OP_STRIDE = 4
DUMMY_EIP = 0x0000_0000
PRIVUSER_FRAME_SIZE = 60
ARG_REGISTERS = ("RAX", "RDI", "RSI", "RDX", "R10", "R8", "R9")
SCRUB_REGISTERS = ("RCX", "RDX", "RSI", "RDI", "R10", "R11")
# four manually saved words plus RBP plus one alignment slot
GATE_CONTEXT_SIZE = 48


@dataclass(frozen=True)
class MicroOp:
    op: str
    args: tuple = ()

    def __str__(self):
        return " ".join([self.op, *(hex(a) if isinstance(a, int) else str(a) for a in self.args)])


@dataclass
class GateProgram:
    name: str
    base: int
    ops: list[MicroOp] = field(default_factory=list)

    def address_of(self, index: int) -> int:
        return self.base + OP_STRIDE * index

    def index_of(self, name: str) -> int:
        for i, op in enumerate(self.ops):
            if op.op == name:
                return i
        raise KeyError(name)

    def run(self, state: MachineState) -> None:
        """Interpret from the first op until the closing ``lret``."""
        state.ensure_running()
        if state.regs.rip != self.base:
            raise state.fault(FaultKind.GeneralProtection,
                              f"{self.name} entered at {state.regs.rip:#x}, not at its first op")
        for i, op in enumerate(self.ops):
            try:
                check_exec(state, state.cpl, page_of(self.address_of(i)))
            except Fault as exc:
                state.status = exc
                raise
            state.regs.rip = self.address_of(i)
            if op.op == "lret":
                transfer.long_return(state)
                return
            try:
                _execute(state, op, self.name)
            except Fault as exc:
                state.status = exc
                raise
        raise state.fault(FaultKind.GeneralProtection, f"{self.name} ran off its end")


def _execute(state: MachineState, op: MicroOp, gate: str) -> None:
    regs = state.regs
    name, args = op.op, op.args
    if name == "cmp_saved_ring":
        offset, want = args
        saved_cs = read_u64(state, regs.rsp + offset)
        if saved_cs & 3 != want:
            raise Fault(FaultKind.GeneralProtection,
                        f"{gate}: caller ring {saved_cs & 3} rejected, only ring {want} may enter")
    elif name == "push_frame":
        # four pushes of the same slot walk a four-word frame downward
        (offset,) = args
        for _ in range(4):
            push(state, read_u64(state, regs.rsp + offset))
        state.charge("context_save")
    elif name == "push":
        push(state, regs[args[0]])
    elif name == "push_imm":
        push(state, args[0])
    elif name == "pop":
        regs[args[0]] = pop(state)
    elif name == "mov_imm":
        regs[args[0]] = args[1]
    elif name == "sub_imm":
        regs[args[0]] = (regs[args[0]] - args[1]) & ADDR_MASK
    elif name == "add_imm":
        regs[args[0]] = (regs[args[0]] + args[1]) & ADDR_MASK
    elif name == "store32_imm":
        base, offset, value = args
        write_mem(state, regs[base] + offset, (value & 0xFFFF_FFFF).to_bytes(4, "little"))
    elif name == "store":
        base, offset, src = args
        write_u64(state, regs[base] + offset, regs[src])
    elif name == "scrub":
        for reg in args:
            regs[reg] = 0
    else:
        raise Fault(FaultKind.GeneralProtection, f"{gate}: undefined micro-op {name!r}")


def enter_gate(base: int, pu_cs: int, pu_ss: int, pu_stack_top: int, pu_entry: int) -> GateProgram:
    ops = [
        # (a) only ring 3 may come in; saved CS sits above saved RIP
        MicroOp("cmp_saved_ring", (8, 3)),
        # (b) manual copy of the caller frame, then SAVE_REGS
        MicroOp("push_frame", (24,)),
        MicroOp("push", ("RBP",)),
        MicroOp("sub_imm", ("RSP", 8)),
        # (c) DummyEIP plus seven 64-bit ABI slots onto the PrivUser stack
        MicroOp("mov_imm", ("RBP", pu_stack_top)),
        MicroOp("sub_imm", ("RBP", PRIVUSER_FRAME_SIZE)),
        MicroOp("store32_imm", ("RBP", 0, DUMMY_EIP)),
    ]
    ops += [MicroOp("store", ("RBP", 4 + 8 * i, reg)) for i, reg in enumerate(ARG_REGISTERS)]
    ops += [
        # (d) hand-built frame, then drop into PrivUser mode
        MicroOp("push_imm", (pu_ss,)),
        MicroOp("push", ("RBP",)),
        MicroOp("push_imm", (pu_cs,)),
        MicroOp("push_imm", (pu_entry,)),
        MicroOp("lret"),
    ]
    return GateProgram("LOTREnterGate", base, ops)


def exit_gate(base: int) -> GateProgram:
    ops = [
        MicroOp("sub_imm", ("RSP", GATE_CONTEXT_SIZE)),
        MicroOp("scrub", SCRUB_REGISTERS),
        MicroOp("add_imm", ("RSP", 8)),
        MicroOp("pop", ("RBP",)),
        MicroOp("lret"),
    ]
    return GateProgram("LOTRExitGate", base, ops)
