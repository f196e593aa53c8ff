"""Processor and memory model: rings, segment descriptors, paging, access checks.

Everything here is plain data plus a handful of check functions.  Faults are
raised as :class:`Fault` exceptions.  The pure ``check_*`` predicates never
touch machine status; the executing operations (``read_mem``, ``write_mem``
and the control transfers in :mod:`lotrsim.transfer`) latch the fault into
``state.status`` so a faulted machine stays inert until :meth:`reset`.
"""
from __future__ import annotations

import copy
import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Union

PAGE_SIZE = 4096
TABLE_CAPACITY = 16
ADDR_MASK = (1 << 64) - 1
LOW32_MASK = (1 << 32) - 1
FLAT_LIMIT = 1 << 64

# Address-space layout.  Kernel lives in the canonical upper half, far above
# anything a 32-bit effective address can name.
KERNEL_BASE = 0xFFFF_8000_0000_0000
KERNEL_PAGES = 8
USER_BASE = 0x0040_0000
USER_TOP = 0x7000_0000
PRIVUSER_REGION = (0x1000_0000, 0x4000_0000)

USER_CODE = (0x0040_0000, 4 * PAGE_SIZE)
USER_DATA = (0x0060_0000, 16 * PAGE_SIZE)
USER_STACK = (0x6FFF_0000, 16 * PAGE_SIZE)
KERNEL_STACK_TOP = KERNEL_BASE + KERNEL_PAGES * PAGE_SIZE

GPR_NAMES = (
    "RAX", "RBX", "RCX", "RDX", "RSI", "RDI", "RBP", "RSP",
    "R8", "R9", "R10", "R11", "R12", "R13", "R14", "R15",
)


class Bitness(enum.Enum):
    X64 = "x64"
    X32 = "x32"


class TableKind(enum.IntEnum):
    GDT = 0
    LDT = 1


class SegmentKind(enum.Enum):
    CODE = "code"
    DATA = "data"


class PageAccess(enum.Enum):
    USER = "User"
    SUPERVISOR = "Supervisor"


class FaultKind(enum.Enum):
    GeneralProtection = "GeneralProtection"
    PageFault = "PageFault"
    InvalidGate = "InvalidGate"
    InvalidSelector = "InvalidSelector"
    Unmapped = "Unmapped"


class Fault(Exception):
    def __init__(self, kind: FaultKind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind
        self.detail = detail

    def __eq__(self, other):
        return isinstance(other, Fault) and (self.kind, self.detail) == (other.kind, other.detail)

    def __hash__(self):
        return hash((self.kind, self.detail))

    def __reduce__(self):
        return (Fault, (self.kind, self.detail))


def check_ring(value: int) -> int:
    if not isinstance(value, int) or not 0 <= value <= 3:
        raise ValueError(f"ring level must be in 0..3, got {value!r}")
    return value


@dataclass(frozen=True)
class Selector:
    """16-bit segment selector: ``index << 3 | ti << 2 | rpl``."""

    index: int
    ti: TableKind = TableKind.GDT
    rpl: int = 0

    def __post_init__(self):
        check_ring(self.rpl)
        if not 0 <= self.index < 8192:
            raise ValueError(f"selector index out of range: {self.index}")

    def encode(self) -> int:
        return (self.index << 3) | (int(self.ti) << 2) | self.rpl

    @classmethod
    def decode(cls, value: int) -> "Selector":
        value &= 0xFFFF
        return cls(value >> 3, TableKind((value >> 2) & 1), value & 3)

    def with_rpl(self, rpl: int) -> "Selector":
        return Selector(self.index, self.ti, rpl)

    def __str__(self):
        return f"{self.ti.name.lower()}:{self.index}/{self.rpl}"


@dataclass(frozen=True)
class SegmentDescriptor:
    kind: SegmentKind
    dpl: int
    bitness: Optional[Bitness] = None
    base: int = 0
    limit: int = FLAT_LIMIT

    def __post_init__(self):
        check_ring(self.dpl)
        if self.kind is SegmentKind.DATA and self.bitness is not None:
            raise ValueError("data descriptors carry no bitness")
        if self.kind is SegmentKind.CODE and self.bitness is None:
            raise ValueError("code descriptors need a bitness")
        if self.base < 0 or self.limit < 0 or self.base + self.limit > FLAT_LIMIT:
            raise ValueError("segment base+limit overflows the 64-bit address space")

    @property
    def is_code(self) -> bool:
        return self.kind is SegmentKind.CODE


def code_segment(dpl: int, bitness: Bitness, base: int = 0, limit: int = FLAT_LIMIT) -> SegmentDescriptor:
    return SegmentDescriptor(SegmentKind.CODE, dpl, bitness, base, limit)


def data_segment(dpl: int, base: int = 0, limit: int = FLAT_LIMIT) -> SegmentDescriptor:
    return SegmentDescriptor(SegmentKind.DATA, dpl, None, base, limit)


@dataclass(frozen=True)
class GateDescriptor:
    target_selector: Selector
    target_offset: int
    rmpl: int

    def __post_init__(self):
        check_ring(self.rmpl)


Descriptor = Union[SegmentDescriptor, GateDescriptor]


class DescriptorTable:
    def __init__(self, kind: TableKind, capacity: int = TABLE_CAPACITY):
        self.kind = kind
        self.slots: list[Optional[Descriptor]] = [None] * capacity

    @property
    def capacity(self) -> int:
        return len(self.slots)

    def __getitem__(self, index: int) -> Optional[Descriptor]:
        return self.slots[index]

    def __iter__(self):
        return iter(self.slots)

    def installed(self):
        """(slot, descriptor) pairs in slot order, skipping empties."""
        return [(i, d) for i, d in enumerate(self.slots) if d is not None]

    def raw_install(self, slot: int, desc: Optional[Descriptor]) -> None:
        # No validation at all; used by the mutation harness to build
        # configurations the architecture forbids.
        self.slots[slot] = desc

    def __eq__(self, other):
        return isinstance(other, DescriptorTable) and self.kind == other.kind and self.slots == other.slots


@dataclass
class TaskStateSegment:
    ring_stacks: dict[int, tuple[Selector, int]] = field(default_factory=dict)

    def set_stack(self, ring: int, ss: Selector, rsp: int) -> None:
        if ring not in (0, 1, 2):
            raise ValueError("the TSS only holds stacks for rings 0-2")
        self.ring_stacks[ring] = (ss, rsp)


@dataclass
class PageEntry:
    access: PageAccess = PageAccess.USER
    writable: bool = True
    executable: bool = False
    kernel: bool = False  # backing frame belongs to the kernel


@dataclass
class RegisterFile:
    gpr: dict[str, int] = field(default_factory=lambda: dict.fromkeys(GPR_NAMES, 0))
    rip: int = 0
    cs: Selector = field(default_factory=lambda: Selector(0))
    ss: Selector = field(default_factory=lambda: Selector(0))

    def __getitem__(self, name: str) -> int:
        return self.gpr[name]

    def __setitem__(self, name: str, value: int) -> None:
        if name not in self.gpr:
            raise KeyError(name)
        self.gpr[name] = value & ADDR_MASK

    @property
    def rsp(self) -> int:
        return self.gpr["RSP"]

    @rsp.setter
    def rsp(self, value: int) -> None:
        self.gpr["RSP"] = value & ADDR_MASK


@dataclass
class MachineState:
    regs: RegisterFile = field(default_factory=RegisterFile)
    gdt: DescriptorTable = field(default_factory=lambda: DescriptorTable(TableKind.GDT))
    ldt: DescriptorTable = field(default_factory=lambda: DescriptorTable(TableKind.LDT))
    tss: TaskStateSegment = field(default_factory=TaskStateSegment)
    pages: dict[int, PageEntry] = field(default_factory=dict)
    memory: dict[int, bytearray] = field(default_factory=dict)
    smep: bool = False
    smap: bool = False
    status: Optional[Fault] = None
    pid: int = 1000
    init_lock: Optional[int] = None
    supervisor_revert: list[int] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)

    # CPL and bitness are derived from CS on every read; there is no
    # separate privilege field that could drift out of sync.
    @property
    def cpl(self) -> int:
        return self.regs.cs.rpl

    @property
    def bitness(self) -> Bitness:
        desc = self.table(self.regs.cs.ti)[self.regs.cs.index] if self.regs.cs.index else None
        if isinstance(desc, SegmentDescriptor) and desc.is_code:
            return desc.bitness
        return Bitness.X64

    @property
    def running(self) -> bool:
        return self.status is None

    def table(self, ti: TableKind) -> DescriptorTable:
        return self.ldt if ti is TableKind.LDT else self.gdt

    def clone(self) -> "MachineState":
        return copy.deepcopy(self)

    def reset(self) -> None:
        """Clear a latched fault; memory, registers and tables are left as they are."""
        self.status = None

    def ensure_running(self) -> None:
        if self.status is not None:
            raise self.status

    def fault(self, kind: FaultKind, detail: str = "") -> Fault:
        exc = Fault(kind, detail)
        self.status = exc
        return exc

    def charge(self, event: str, n: int = 1) -> None:
        self.counters[event] += n

    # raw, unchecked memory; kernel-side setup and the leak detector use these
    def map_range(self, start: int, length: int, access: PageAccess = PageAccess.USER,
                  writable: bool = True, executable: bool = False, kernel: bool = False) -> None:
        for page in page_span(start, length):
            self.pages[page] = PageEntry(access, writable, executable, kernel)

    def unmap_range(self, start: int, length: int) -> None:
        for page in page_span(start, length):
            self.pages.pop(page, None)
            self.memory.pop(page, None)

    def poke(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            a = (addr + i) & ADDR_MASK
            frame = self.memory.setdefault(a // PAGE_SIZE, bytearray(PAGE_SIZE))
            frame[a % PAGE_SIZE] = b

    def peek(self, addr: int, length: int) -> bytes:
        out = bytearray(length)
        for i in range(length):
            a = (addr + i) & ADDR_MASK
            frame = self.memory.get(a // PAGE_SIZE)
            if frame is not None:
                out[i] = frame[a % PAGE_SIZE]
        return bytes(out)


def page_of(addr: int) -> int:
    return (addr & ADDR_MASK) // PAGE_SIZE


def page_span(start: int, length: int) -> range:
    if length <= 0:
        return range(0)
    return range(page_of(start), page_of(start + length - 1) + 1)


# -- descriptor tables ----------------------------------------------------

def install_descriptor(state: MachineState, ti: TableKind, slot: int, desc: Descriptor) -> None:
    """Store ``desc`` at ``slot`` of the GDT or LDT.

    Gates are validated here rather than at call time: a gate whose target is
    not a 64-bit code segment cannot be constructed at all.
    """
    table = state.table(ti)
    if not 1 <= slot < table.capacity:
        raise Fault(FaultKind.InvalidSelector, f"{ti.name} slot {slot} is not installable")
    if isinstance(desc, GateDescriptor):
        try:
            target = resolve_selector(state, desc.target_selector)
        except Fault:
            raise Fault(FaultKind.InvalidGate, f"gate target {desc.target_selector} does not resolve") from None
        if not isinstance(target, SegmentDescriptor) or not target.is_code:
            raise Fault(FaultKind.InvalidGate, f"gate target {desc.target_selector} is not a code segment")
        if target.bitness is not Bitness.X64:
            raise Fault(FaultKind.InvalidGate, "callgate cannot target a 32-bit code segment")
    elif not isinstance(desc, SegmentDescriptor):
        raise TypeError(f"not a descriptor: {desc!r}")
    table.slots[slot] = desc


def resolve_selector(state: MachineState, sel: Selector) -> Descriptor:
    table = state.table(sel.ti)
    if sel.index == 0 or sel.index >= table.capacity:
        raise Fault(FaultKind.InvalidSelector, f"selector {sel} names no slot")
    desc = table[sel.index]
    if desc is None:
        raise Fault(FaultKind.InvalidSelector, f"selector {sel} names an empty slot")
    return desc


def resolve_code(state: MachineState, sel: Selector) -> SegmentDescriptor:
    desc = resolve_selector(state, sel)
    if not isinstance(desc, SegmentDescriptor) or not desc.is_code:
        raise Fault(FaultKind.GeneralProtection, f"{sel} is not a code segment")
    return desc


# -- address formation and access checks ----------------------------------

def effective_address(state: MachineState, addr: int, seg: SegmentDescriptor,
                      bitness: Optional[Bitness] = None, length: int = 1) -> int:
    """Linear address for ``addr`` under segment ``seg``.

    64-bit mode is flat and ignores base/limit.  32-bit compatibility mode
    truncates to the low 32 bits and requires the whole access to fall in
    ``[base, base + limit)``.
    """
    mode = bitness if bitness is not None else state.bitness
    if mode is Bitness.X64:
        return addr & ADDR_MASK
    linear = addr & LOW32_MASK
    if linear < seg.base or linear + length > seg.base + seg.limit or linear + length > 1 << 32:
        raise Fault(FaultKind.GeneralProtection,
                    f"address {linear:#x}+{length} outside segment [{seg.base:#x}, {seg.base + seg.limit:#x})")
    return linear


def _entry(state: MachineState, page: int) -> PageEntry:
    entry = state.pages.get(page)
    if entry is None:
        raise Fault(FaultKind.Unmapped, f"page {page:#x} is not mapped")
    return entry


def check_data_access(state: MachineState, ring: int, page: int, write: bool) -> None:
    entry = _entry(state, page)
    if entry.access is PageAccess.SUPERVISOR and ring == 3:
        raise Fault(FaultKind.PageFault, f"supervisor-page: ring 3 touched page {page:#x}")
    if entry.access is PageAccess.USER and ring <= 2 and state.smap:
        raise Fault(FaultKind.PageFault, f"smap: ring {ring} data access to user page {page:#x}")
    if write and not entry.writable:
        raise Fault(FaultKind.PageFault, f"read-only: write to page {page:#x}")


def check_exec(state: MachineState, ring: int, page: int) -> None:
    entry = _entry(state, page)
    if not entry.executable:
        raise Fault(FaultKind.PageFault, f"no-exec: page {page:#x}")
    if entry.access is PageAccess.SUPERVISOR and ring == 3:
        raise Fault(FaultKind.PageFault, f"supervisor-page: ring 3 fetch from page {page:#x}")
    if entry.access is PageAccess.USER and ring <= 2 and state.smep:
        raise Fault(FaultKind.PageFault, f"smep: ring {ring} fetch from user page {page:#x}")


def privileged_instruction_check(ring: int) -> None:
    if check_ring(ring) != 0:
        raise Fault(FaultKind.GeneralProtection, f"privileged instruction at ring {ring}")


def data_segment_of(state: MachineState) -> SegmentDescriptor:
    if state.bitness is Bitness.X64:
        return data_segment(0)  # flat; contents irrelevant in 64-bit mode
    desc = resolve_selector(state, state.regs.ss)
    if not isinstance(desc, SegmentDescriptor) or desc.is_code:
        raise Fault(FaultKind.GeneralProtection, f"SS {state.regs.ss} is not a data segment")
    return desc


def translate(state: MachineState, addr: int, length: int) -> int:
    """Linear start address of a data access at the current CPL and bitness."""
    return effective_address(state, addr, data_segment_of(state), length=length)


def _checked_span(state: MachineState, addr: int, length: int, write: bool) -> int:
    state.ensure_running()
    try:
        linear = translate(state, addr, length)
        for page in page_span(linear, length):
            check_data_access(state, state.cpl, page, write)
    except Fault as exc:
        state.status = exc
        raise
    return linear


def read_mem(state: MachineState, addr: int, length: int) -> bytes:
    # every page is checked before any byte is copied: no partial reads
    linear = _checked_span(state, addr, length, write=False)
    return state.peek(linear, length)


def write_mem(state: MachineState, addr: int, data: bytes) -> None:
    linear = _checked_span(state, addr, len(data), write=True)
    state.poke(linear, data)


def read_u64(state: MachineState, addr: int) -> int:
    return int.from_bytes(read_mem(state, addr, 8), "little")


def write_u64(state: MachineState, addr: int, value: int) -> None:
    write_mem(state, addr, (value & ADDR_MASK).to_bytes(8, "little"))


def push(state: MachineState, value: int) -> None:
    rsp = (state.regs.rsp - 8) & ADDR_MASK
    write_u64(state, rsp, value)
    state.regs.rsp = rsp


def pop(state: MachineState) -> int:
    value = read_u64(state, state.regs.rsp)
    state.regs.rsp = state.regs.rsp + 8
    return value


def set_page_supervisor(state: MachineState, start: int, length: int) -> list[int]:
    """Clear the User bit on every page in the range; returns the pages changed."""
    pages = list(page_span(start, length))
    for page in pages:
        _entry(state, page)
    changed = []
    for page in pages:
        entry = state.pages[page]
        if entry.access is PageAccess.USER:
            entry.access = PageAccess.SUPERVISOR
            state.supervisor_revert.append(page)
            changed.append(page)
    return changed


def revert_supervisor(state: MachineState) -> None:
    while state.supervisor_revert:
        page = state.supervisor_revert.pop()
        entry = state.pages.get(page)
        if entry is not None:
            entry.access = PageAccess.USER


# -- a bare process -------------------------------------------------------

KERNEL_CS = Selector(1, TableKind.GDT, 0)
KERNEL_DS = Selector(2, TableKind.GDT, 0)
USER_CS = Selector(3, TableKind.GDT, 3)
USER_DS = Selector(4, TableKind.GDT, 3)


def new_process(pid: int = 1000) -> MachineState:
    """A 64-bit Linux-like process running in ring 3 with kernel mapped above."""
    state = MachineState(pid=pid)
    install_descriptor(state, TableKind.GDT, KERNEL_CS.index, code_segment(0, Bitness.X64))
    install_descriptor(state, TableKind.GDT, KERNEL_DS.index, data_segment(0))
    install_descriptor(state, TableKind.GDT, USER_CS.index, code_segment(3, Bitness.X64))
    install_descriptor(state, TableKind.GDT, USER_DS.index, data_segment(3))
    state.tss.set_stack(0, KERNEL_DS, KERNEL_STACK_TOP)

    state.map_range(KERNEL_BASE, KERNEL_PAGES * PAGE_SIZE, PageAccess.SUPERVISOR,
                    writable=True, executable=True, kernel=True)
    state.map_range(*USER_CODE, PageAccess.USER, writable=False, executable=True)
    state.map_range(*USER_DATA, PageAccess.USER, writable=True)
    state.map_range(*USER_STACK, PageAccess.USER, writable=True)

    state.regs.cs = USER_CS
    state.regs.ss = USER_DS
    state.regs.rip = USER_CODE[0]
    state.regs.rsp = USER_STACK[0] + USER_STACK[1]
    return state
