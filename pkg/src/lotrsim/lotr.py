"""Builds the privileged-user layer on a machine and drives privcalls through it.

Layout installed by :func:`init_lotr` (LDT slots):

    1  Gate-mode CS      ring 1, 64-bit, flat
    2  Gate-mode DS      ring 1
    3  PrivUser CS       ring 2, 32-bit, limited to the PrivUser ranges
    4  PrivUser DS       ring 2, same limits
    5  CG1               ring 3 -> Enter gate (RMPL 3)
    6  CG2               ring 2 -> Exit gate  (RMPL 2)
"""
from __future__ import annotations

import errno
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import transfer
from .gates import (
    ARG_REGISTERS,
    PRIVUSER_FRAME_SIZE,
    GateProgram,
    enter_gate,
    exit_gate,
)
from .machine import (
    ADDR_MASK,
    KERNEL_BASE,
    PAGE_SIZE,
    Bitness,
    Fault,
    FaultKind,
    GateDescriptor,
    MachineState,
    PageAccess,
    Selector,
    TableKind,
    code_segment,
    data_segment,
    install_descriptor,
    new_process,
    page_span,
    read_mem,
    read_u64,
    set_page_supervisor,
    write_mem,
    write_u64,
)

GATE_CS = Selector(1, TableKind.LDT, 1)
GATE_DS = Selector(2, TableKind.LDT, 1)
PU_CS = Selector(3, TableKind.LDT, 2)
PU_DS = Selector(4, TableKind.LDT, 2)
CG1 = Selector(5, TableKind.LDT, 3)
CG2 = Selector(6, TableKind.LDT, 2)

GATE_CODE_BASE = KERNEL_BASE + 0x20_0000
ENTER_GATE_ADDR = GATE_CODE_BASE
EXIT_GATE_ADDR = GATE_CODE_BASE + 0x400
GATE_STACK_SIZE = 2 * PAGE_SIZE
MAX_ARGS = 6

ENOSYS = errno.ENOSYS
EPERM = errno.EPERM
ENOMEM = errno.ENOMEM
ENOENT = errno.ENOENT


def errno_value(code: int) -> int:
    """RAX encoding of a ``-code`` error return."""
    return -code & ADDR_MASK


ENOENT_VALUE = errno_value(ENOENT)


class LotrError(Exception):
    pass


class AlreadyInitialized(LotrError):
    pass


class RegistryClosed(LotrError):
    pass


class PrivUserOutOfMemory(LotrError):
    pass


Range = tuple[int, int]  # (start, length)


@dataclass(frozen=True)
class LotrConfig:
    privuser_code: Range
    privuser_data: Range
    privuser_stack: Range
    privuser_heap: Range
    entry_point: int
    arg_page: Range
    gate_stack_top: int

    def privuser_ranges(self) -> list[Range]:
        return [self.privuser_code, self.privuser_data, self.privuser_stack, self.privuser_heap]

    def segment_bounds(self) -> tuple[int, int]:
        """(base, limit) of the PrivUser segments: all PrivUser ranges plus the arg page."""
        ranges = self.privuser_ranges() + [self.arg_page]
        lo = min(start for start, _ in ranges)
        hi = max(start + length for start, length in ranges)
        lo -= lo % PAGE_SIZE
        hi += -hi % PAGE_SIZE
        return lo, hi - lo

    @property
    def stack_top(self) -> int:
        return self.privuser_stack[0] + self.privuser_stack[1]


CANONICAL_CONFIG = LotrConfig(
    privuser_code=(0x1000_0000, 4 * PAGE_SIZE),
    privuser_data=(0x1001_0000, 2 * PAGE_SIZE),
    privuser_stack=(0x1002_0000, 4 * PAGE_SIZE),
    privuser_heap=(0x1003_0000, 4 * PAGE_SIZE),
    entry_point=0x1000_0000,
    arg_page=(0x1004_0000, PAGE_SIZE),
    gate_stack_top=0x5000_0000 + GATE_STACK_SIZE,
)


@dataclass
class PrivcallEntry:
    number: int
    name: str
    arity: int
    handler: Callable
    widths: tuple[int, ...]

    def wrapper(self, ctx: "PrivUserContext", slots) -> int:
        # narrow the 64-bit ABI slots to the declared parameter widths
        args = [slots[i] & ((1 << w) - 1) for i, w in enumerate(self.widths)]
        return self.handler(ctx, *args)


@dataclass
class PrivcallTable:
    routines: list[PrivcallEntry] = field(default_factory=list)

    @property
    def max_privcall(self) -> int:
        return len(self.routines)

    def lookup(self, nr: int) -> Optional[PrivcallEntry]:
        if 1 <= nr <= self.max_privcall:
            return self.routines[nr - 1]
        return None

    def number_of(self, name: str) -> int:
        for entry in self.routines:
            if entry.name == name:
                return entry.number
        raise KeyError(name)


@dataclass
class LotrHandle:
    state: MachineState
    config: LotrConfig
    enter: GateProgram
    exit: GateProgram
    pct: PrivcallTable = field(default_factory=PrivcallTable)
    registry_closed: bool = False
    heap_next: int = 0
    symbols: dict[str, tuple[int, int]] = field(default_factory=dict)
    last_entry_frame: Optional[tuple[int, tuple[int, ...]]] = None

    def __post_init__(self):
        if not self.heap_next:
            self.heap_next = self.config.privuser_heap[0]

    def close_registry(self) -> None:
        self.registry_closed = True

    def privuser_pages(self) -> list[int]:
        pages: list[int] = []
        for start, length in self.config.privuser_ranges():
            pages.extend(page_span(start, length))
        return pages

    @property
    def gates(self) -> dict[int, GateProgram]:
        return {self.enter.base: self.enter, self.exit.base: self.exit}


class PrivUserContext:
    """What a privcall routine sees: memory at the current (PrivUser) privilege."""

    def __init__(self, state: MachineState, handle: LotrHandle):
        self.state = state
        self.handle = handle

    def read(self, addr: int, length: int) -> bytes:
        return read_mem(self.state, addr, length)

    def write(self, addr: int, data: bytes) -> None:
        write_mem(self.state, addr, data)

    def read_u64(self, addr: int) -> int:
        return read_u64(self.state, addr)

    def write_u64(self, addr: int, value: int) -> None:
        write_u64(self.state, addr, value)

    def alloc(self, length: int) -> int:
        return privuser_alloc(self.handle, length)

    def symbol(self, name: str) -> tuple[int, int]:
        return self.handle.symbols[name]

    def privcall(self, nr: int, *args: int) -> int:
        return privcall(self.state, self.handle, nr, *args)


def _check_mapped(state: MachineState, start: int, length: int, what: str) -> None:
    for page in page_span(start, length):
        if page not in state.pages:
            raise Fault(FaultKind.Unmapped, f"{what} page {page:#x} is not mapped")


def init_lotr(state: MachineState, cfg: LotrConfig) -> LotrHandle:
    """Install the gate-mode and PrivUser descriptors, gates, and page marking."""
    if state.init_lock is not None:
        raise AlreadyInitialized(f"already initialized for pid {state.init_lock}; request ignored")

    for name in ("privuser_code", "privuser_data", "privuser_stack", "privuser_heap", "arg_page"):
        start, length = getattr(cfg, name)
        if length <= 0:
            raise LotrError(f"{name} is empty")
        if start + length > 1 << 32:
            raise LotrError(f"{name} lies above 4 GiB; 32-bit PrivUser code could not reach it")
    code_start, code_len = cfg.privuser_code
    if not code_start <= cfg.entry_point < code_start + code_len:
        raise LotrError("entry point is outside the PrivUser code range")
    for name in ("privuser_code", "privuser_data", "privuser_stack", "privuser_heap", "arg_page"):
        _check_mapped(state, *getattr(cfg, name), name)
    _check_mapped(state, cfg.gate_stack_top - GATE_STACK_SIZE, GATE_STACK_SIZE, "gate stack")

    base, limit = cfg.segment_bounds()
    snapshot = (list(state.ldt.slots), dict(state.tss.ring_stacks))
    try:
        install_descriptor(state, TableKind.LDT, GATE_CS.index, code_segment(1, Bitness.X64))
        install_descriptor(state, TableKind.LDT, GATE_DS.index, data_segment(1))
        install_descriptor(state, TableKind.LDT, PU_CS.index, code_segment(2, Bitness.X32, base, limit))
        install_descriptor(state, TableKind.LDT, PU_DS.index, data_segment(2, base, limit))
        install_descriptor(state, TableKind.LDT, CG1.index, GateDescriptor(GATE_CS, ENTER_GATE_ADDR, 3))
        install_descriptor(state, TableKind.LDT, CG2.index, GateDescriptor(GATE_CS, EXIT_GATE_ADDR, 2))
    except Fault:
        state.ldt.slots[:] = snapshot[0]
        raise
    state.tss.set_stack(1, GATE_DS, cfg.gate_stack_top)

    # gate code is loaded into kernel memory with the module
    state.map_range(GATE_CODE_BASE, PAGE_SIZE, PageAccess.SUPERVISOR,
                    writable=False, executable=True, kernel=True)
    for start, length in cfg.privuser_ranges():
        set_page_supervisor(state, start, length)
    set_page_supervisor(state, cfg.gate_stack_top - GATE_STACK_SIZE, GATE_STACK_SIZE)

    handle = LotrHandle(
        state=state,
        config=cfg,
        enter=enter_gate(ENTER_GATE_ADDR, PU_CS.encode(), PU_DS.encode(), cfg.stack_top, cfg.entry_point),
        exit=exit_gate(EXIT_GATE_ADDR),
    )
    state.init_lock = state.pid
    return handle


def canonical_process(cfg: LotrConfig = CANONICAL_CONFIG, pid: int = 1000) -> MachineState:
    """A process with the PrivUser image, arg page and gate stack mapped but not yet protected."""
    state = new_process(pid)
    state.map_range(*cfg.privuser_code, PageAccess.USER, writable=False, executable=True)
    state.map_range(*cfg.privuser_data, PageAccess.USER, writable=True)
    state.map_range(*cfg.privuser_stack, PageAccess.USER, writable=True)
    state.map_range(*cfg.privuser_heap, PageAccess.USER, writable=True)
    state.map_range(*cfg.arg_page, PageAccess.USER, writable=True)
    state.map_range(cfg.gate_stack_top - GATE_STACK_SIZE, GATE_STACK_SIZE,
                    PageAccess.SUPERVISOR, writable=True)
    return state


def canonical_setup(cfg: LotrConfig = CANONICAL_CONFIG) -> tuple[MachineState, LotrHandle]:
    state = canonical_process(cfg)
    return state, init_lotr(state, cfg)


def register_privcall(handle: LotrHandle, name: str, arity: int, handler: Callable,
                      widths: Optional[tuple[int, ...]] = None) -> int:
    if handle.registry_closed:
        raise RegistryClosed(f"cannot register {name!r}: the privcall table is closed")
    if not 0 <= arity <= MAX_ARGS:
        raise LotrError(f"{name!r}: arity {arity} exceeds the {MAX_ARGS} argument registers")
    widths = tuple(widths) if widths is not None else (64,) * arity
    if len(widths) != arity or any(w not in (8, 16, 32, 64) for w in widths):
        raise LotrError(f"{name!r}: bad parameter widths {widths}")
    number = handle.pct.max_privcall + 1
    handle.pct.routines.append(PrivcallEntry(number, name, arity, handler, widths))
    return number


def privcall(state: MachineState, handle: LotrHandle, nr: int, *args: int) -> int:
    """Issue ``privcall(nr, args...)`` from the current context; returns RAX.

    The caller is expected to be in ring 3.  Anything else is stopped by the
    Enter gate's caller check, not here, so the check itself stays exercised.
    """
    if len(args) > MAX_ARGS:
        raise LotrError(f"privcall takes at most {MAX_ARGS} arguments")
    state.ensure_running()
    regs = state.regs
    slots = (nr, *args, *(0,) * (MAX_ARGS - len(args)))
    for reg, value in zip(ARG_REGISTERS, slots):
        regs[reg] = value

    transfer.long_call(state, CG1)
    handle.enter.run(state)
    _privuser_entry(state, handle)
    handle.exit.run(state)
    return regs["RAX"]


def _privuser_entry(state: MachineState, handle: LotrHandle) -> None:
    transfer.fetch(state)
    frame = read_mem(state, state.regs.rsp, PRIVUSER_FRAME_SIZE)
    dummy = int.from_bytes(frame[:4], "little")
    values = tuple(int.from_bytes(frame[4 + 8 * i:12 + 8 * i], "little") for i in range(len(ARG_REGISTERS)))
    handle.last_entry_frame = (dummy, values)

    # bound check on the low 32 bits, as a 32-bit entry sees it
    entry = handle.pct.lookup(values[0] & 0xFFFF_FFFF)
    if entry is None:
        result = errno_value(ENOSYS)
    else:
        result = entry.wrapper(PrivUserContext(state, handle), values[1:])
    state.regs["RAX"] = int(result)
    transfer.long_call(state, CG2)


def privuser_alloc(handle: LotrHandle, length: int) -> int:
    """Bump-allocate from the Supervisor-only PrivUser heap."""
    state = handle.state
    if state.cpl != 2:
        raise LotrError("privuser_alloc called outside PrivUser mode")
    if length <= 0:
        raise LotrError("allocation length must be positive")
    start, size = handle.config.privuser_heap
    addr = handle.heap_next
    end = addr + length
    if end > start + size:
        raise PrivUserOutOfMemory(f"PrivUser heap exhausted ({length} bytes requested)")
    handle.heap_next = end + (-end % 16)
    return addr


def _guarded(state: MachineState, start: int, length: int) -> int:
    if state.cpl != 3:
        raise LotrError("guarded memory syscalls are issued from user mode")
    pages = list(page_span(start, length))
    if any(p not in state.pages for p in pages):
        return -ENOMEM
    if any(state.pages[p].access is PageAccess.SUPERVISOR for p in pages):
        return -EPERM
    return 0


def guarded_mprotect(state: MachineState, handle: LotrHandle, start: int, length: int,
                     writable: bool, executable: bool = False) -> int:
    """``mprotect`` that refuses, all or nothing, any range touching an S-page."""
    rc = _guarded(state, start, length)
    if rc == 0:
        for page in page_span(start, length):
            entry = state.pages[page]
            entry.writable = writable
            entry.executable = executable
    return rc


def guarded_munlock(state: MachineState, handle: LotrHandle, start: int, length: int) -> int:
    # No swap model here; the observable part is the refusal.
    return _guarded(state, start, length)


def dump_ldt(state: MachineState) -> str:
    """One line per installed LDT slot: ``slot kind ring bitness base limit | gate target rmpl``."""
    lines = []
    for slot, desc in state.ldt.installed():
        if isinstance(desc, GateDescriptor):
            try:
                target = state.table(desc.target_selector.ti)[desc.target_selector.index]
                ring, bits = target.dpl, target.bitness.value
            except AttributeError:
                ring, bits = "?", "?"
            sel = desc.target_selector
            lines.append(f"{slot} gate {ring} {bits} - - | gate "
                         f"{sel.ti.name.lower()}:{sel.index}@{desc.target_offset:#x} {desc.rmpl}")
        else:
            bits = desc.bitness.value if desc.bitness else "-"
            lines.append(f"{slot} {desc.kind.value} {desc.dpl} {bits} {desc.base:#x} {desc.limit:#x} | - - -")
    return "\n".join(lines) + "\n"
