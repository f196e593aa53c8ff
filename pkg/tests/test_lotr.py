import copy
import random
from pathlib import Path

import pytest

from lotrsim import gates, lotr, transfer
from lotrsim import machine as m
from lotrsim.handlers import BUILTINS
from lotrsim.machine import Bitness, Fault, FaultKind, PageAccess

GOLDEN = Path(__file__).parent / "golden" / "canonical_ldt.txt"


def _snapshot(state):
    r = state.regs
    return (state.cpl, r.cs, r.ss, r.rsp, r.rip)


# -- initialization ---------------------------------------------------------

def test_ldt_dump_matches_golden(state):
    assert lotr.dump_ldt(state) == GOLDEN.read_text()


def test_table2_rows(state):
    ldt = state.ldt
    assert (ldt[1].dpl, ldt[1].bitness, ldt[1].is_code) == (1, Bitness.X64, True)
    assert (ldt[2].dpl, ldt[2].is_code) == (1, False)
    assert (ldt[3].dpl, ldt[3].bitness, ldt[3].is_code) == (2, Bitness.X32, True)
    assert (ldt[4].dpl, ldt[4].is_code) == (2, False)
    assert (ldt[5].rmpl, ldt[6].rmpl) == (3, 2)
    assert ldt[5].target_selector.index == ldt[6].target_selector.index == 1


def test_privuser_segment_covers_only_privuser_ranges(state, handle):
    pu = state.ldt[3]
    lo = min(s for s, _ in handle.config.privuser_ranges() + [handle.config.arg_page])
    hi = max(s + n for s, n in handle.config.privuser_ranges() + [handle.config.arg_page])
    assert (pu.base, pu.base + pu.limit) == (lo, hi)
    assert pu.base + pu.limit <= 1 << 32


def test_privuser_pages_are_supervisor(state, handle):
    assert handle.privuser_pages()
    for page in handle.privuser_pages():
        assert state.pages[page].access is PageAccess.SUPERVISOR
    assert state.pages[m.page_of(handle.config.arg_page[0])].access is PageAccess.USER


def test_tss_ring1_stack(state, handle):
    assert state.tss.ring_stacks[1] == (lotr.GATE_DS, handle.config.gate_stack_top)


def test_tss_stacks_admit_their_ring(state):
    for ring, (ss, rsp) in state.tss.ring_stacks.items():
        m.check_data_access(state, ring, m.page_of(rsp - 8), write=True)


def test_second_init_rejected_and_changes_nothing(state):
    before = copy.deepcopy((state.gdt, state.ldt, state.pages, state.tss))
    with pytest.raises(lotr.AlreadyInitialized):
        lotr.init_lotr(state, lotr.CANONICAL_CONFIG)
    assert (state.gdt, state.ldt, state.pages, state.tss) == before


def test_code_above_4g_rejected():
    cfg = lotr.LotrConfig(
        privuser_code=(0x1_0000_0000, 0x1000), privuser_data=(0x1001_0000, 0x1000),
        privuser_stack=(0x1002_0000, 0x1000), privuser_heap=(0x1003_0000, 0x1000),
        entry_point=0x1_0000_0000, arg_page=(0x1004_0000, 0x1000), gate_stack_top=0x5000_2000)
    state = m.new_process()
    with pytest.raises(lotr.LotrError):
        lotr.init_lotr(state, cfg)
    assert state.ldt.installed() == [] and state.init_lock is None


def test_unmapped_ranges_rejected():
    state = m.new_process()
    with pytest.raises(Fault) as exc:
        lotr.init_lotr(state, lotr.CANONICAL_CONFIG)
    assert exc.value.kind is FaultKind.Unmapped
    assert state.ldt.installed() == []


def test_entry_outside_code_rejected():
    cfg = lotr.LotrConfig(**{**lotr.CANONICAL_CONFIG.__dict__, "entry_point": 0x1001_0000})
    with pytest.raises(lotr.LotrError):
        lotr.init_lotr(lotr.canonical_process(), cfg)


def test_init_lock_records_pid():
    state = lotr.canonical_process(pid=4242)
    lotr.init_lotr(state, lotr.CANONICAL_CONFIG)
    assert state.init_lock == 4242


# -- registry ---------------------------------------------------------------

def test_dense_numbering(handle):
    assert lotr.register_privcall(handle, "use_pkey", 2, BUILTINS["use_pkey"].fn) == 1
    assert lotr.register_privcall(handle, "add", 2, BUILTINS["add"].fn) == 2
    assert handle.pct.max_privcall == 2


def test_arity_seven_rejected(handle):
    with pytest.raises(lotr.LotrError):
        lotr.register_privcall(handle, "wide", 7, lambda ctx, *a: 0)


def test_register_after_close_rejected(handle):
    handle.close_registry()
    with pytest.raises(lotr.RegistryClosed):
        lotr.register_privcall(handle, "late", 0, lambda ctx: 0)


# -- privcall ---------------------------------------------------------------

def test_add_round_trip(state, handle):
    nr = lotr.register_privcall(handle, "add", 2, BUILTINS["add"].fn)
    before = _snapshot(state)
    assert lotr.privcall(state, handle, nr, 5, 7) == 12
    assert _snapshot(state) == before
    assert state.bitness is Bitness.X64


def test_entry_frame_layout(state, handle):
    seen = {}

    def peek(ctx, *args):
        rsp = ctx.state.regs.rsp
        seen["raw"] = ctx.read(rsp, gates.PRIVUSER_FRAME_SIZE)
        seen["cpl"], seen["bits"] = ctx.state.cpl, ctx.state.bitness
        return 0

    nr = lotr.register_privcall(handle, "peek", 6, peek)
    args = (0x1111, 0x2222, 0x3333, 0x4444, 0x5555, 0x6666)
    lotr.privcall(state, handle, nr, *args)
    raw = seen["raw"]
    assert raw[:4] == gates.DUMMY_EIP.to_bytes(4, "little")
    slots = [int.from_bytes(raw[4 + 8 * i:12 + 8 * i], "little") for i in range(7)]
    assert slots == [nr, *args]
    assert (seen["cpl"], seen["bits"]) == (2, Bitness.X32)


def test_scratch_registers_zeroed(state, handle):
    nr = lotr.register_privcall(handle, "echo", 6, BUILTINS["echo"].fn)
    for reg in m.GPR_NAMES:
        if reg != "RSP":
            state.regs[reg] = 0xDEAD_BEEF
    lotr.privcall(state, handle, nr, 1, 2, 3, 4, 5, 6)
    for reg in gates.SCRUB_REGISTERS:
        assert state.regs[reg] == 0
    assert state.regs["RBP"] == 0xDEAD_BEEF
    assert state.regs["RBX"] == 0xDEAD_BEEF


def test_out_of_range_nr_is_not_dispatched(state, handle):
    calls = []
    lotr.register_privcall(handle, "spy", 0, lambda ctx: calls.append(1) or 0)
    for nr in (0, 2, 1 << 32, (1 << 64) - 1):
        state.regs["RCX"] = 9
        assert lotr.privcall(state, handle, nr) == lotr.errno_value(lotr.ENOSYS)
        assert state.regs["RCX"] == 0
    assert calls == []
    assert state.cpl == 3


def test_bound_check_uses_low_32_bits(state, handle):
    lotr.register_privcall(handle, "one", 0, lambda ctx: 1)
    assert lotr.privcall(state, handle, (1 << 32) | 1) == 1


def test_wrapper_narrows_arguments(state, handle):
    nr = lotr.register_privcall(handle, "narrow", 2, lambda ctx, a, b: (a << 32) | b, widths=(8, 32))
    assert lotr.privcall(state, handle, nr, 0x1FF, 0xAAAA_BBBB_CCCC_DDDD) == 0xFF_CCCC_DDDD


def test_privcall_from_ring2_rejected_by_gate(state, handle):
    nr = lotr.register_privcall(handle, "reenter", 1, BUILTINS["reenter"].fn)
    with pytest.raises(Fault) as exc:
        lotr.privcall(state, handle, nr, nr)
    assert exc.value.kind is FaultKind.GeneralProtection
    assert "LOTREnterGate" in exc.value.detail


@pytest.mark.parametrize("ring", [0, 1])
def test_privcall_from_inner_rings_denied(state, handle, ring):
    state.regs.cs = m.KERNEL_CS if ring == 0 else lotr.GATE_CS
    with pytest.raises(Fault) as exc:
        lotr.privcall(state, handle, 1)
    assert exc.value.kind is FaultKind.GeneralProtection


def test_handler_fault_propagates_and_latches(state, handle):
    nr = lotr.register_privcall(handle, "bad", 0, lambda ctx: ctx.read(m.KERNEL_BASE, 8))
    with pytest.raises(Fault) as exc:
        lotr.privcall(state, handle, nr)
    assert exc.value.kind is FaultKind.GeneralProtection
    assert state.status == exc.value


def test_enter_gate_entered_midway(state, handle):
    transfer.long_call(state, lotr.CG1)
    state.regs.rip = handle.enter.address_of(1)
    with pytest.raises(Fault) as exc:
        handle.enter.run(state)
    assert exc.value.kind is FaultKind.GeneralProtection


def test_enter_gate_starts_with_ring_check(handle):
    assert handle.enter.ops[0].op == "cmp_saved_ring"
    assert handle.exit.ops[handle.exit.index_of("scrub")].args == gates.SCRUB_REGISTERS
    assert len(gates.SCRUB_REGISTERS) == 6 and "RAX" not in gates.SCRUB_REGISTERS


def test_random_round_trips(state, handle):
    nr = lotr.register_privcall(handle, "echo", 6, BUILTINS["echo"].fn)
    rng = random.Random(7)
    before = _snapshot(state)
    for _ in range(200):
        args = [rng.getrandbits(64) for _ in range(6)]
        assert lotr.privcall(state, handle, nr, *args) == args[0]
        assert handle.last_entry_frame == (0, (nr, *args))
        assert _snapshot(state) == before


def test_counters_per_privcall(state, handle):
    nr = lotr.register_privcall(handle, "add", 2, BUILTINS["add"].fn)
    state.counters.clear()
    lotr.privcall(state, handle, nr, 1, 2)
    assert dict(state.counters) == {"ring_transition": 4, "descriptor_load": 10, "context_save": 5}


# -- PrivUser heap ----------------------------------------------------------

def test_alloc_from_handler(state, handle):
    got = []
    nr = lotr.register_privcall(handle, "alloc", 1, lambda ctx, n: got.append(ctx.alloc(n)) or 0)
    lotr.privcall(state, handle, nr, 64)
    start, size = handle.config.privuser_heap
    assert start <= got[0] < start + size
    assert state.pages[m.page_of(got[0])].access is PageAccess.SUPERVISOR


def test_alloc_from_ring3_rejected(handle):
    with pytest.raises(lotr.LotrError):
        lotr.privuser_alloc(handle, 64)


def test_heap_exhaustion_never_spills(state, handle):
    got, failed = [], []

    def grab(ctx):
        try:
            while True:
                got.append(ctx.alloc(1000))
        except lotr.PrivUserOutOfMemory:
            failed.append(True)
        return 0

    lotr.privcall(state, handle, lotr.register_privcall(handle, "grab", 0, grab))
    assert failed and got
    start, size = handle.config.privuser_heap
    for addr in got:
        assert start <= addr and addr + 1000 <= start + size
        assert state.pages[m.page_of(addr)].access is PageAccess.SUPERVISOR


# -- guarded syscalls -------------------------------------------------------

def test_mprotect_on_user_range(state, handle):
    assert lotr.guarded_mprotect(state, handle, m.USER_DATA[0], 0x2000, writable=False) == 0
    assert not state.pages[m.page_of(m.USER_DATA[0])].writable


def test_mprotect_overlapping_privuser_page_refused(state, handle):
    pages = copy.deepcopy(state.pages)
    assert lotr.guarded_mprotect(state, handle, handle.config.privuser_code[0], 0x1000, writable=True) == -lotr.EPERM
    assert lotr.guarded_mprotect(state, handle, *handle.config.privuser_heap, writable=True) == -lotr.EPERM
    assert state.pages == pages


def test_mprotect_mixed_range_refused_whole(state, handle):
    state.map_range(0x1000_f000, 0x1000, PageAccess.USER, writable=True)
    pages = copy.deepcopy(state.pages)
    assert lotr.guarded_mprotect(state, handle, 0x1000_f000, 0x2000, writable=False) == -lotr.EPERM
    assert state.pages == pages


def test_munlock_guarded(state, handle):
    assert lotr.guarded_munlock(state, handle, *handle.config.privuser_stack) == -lotr.EPERM
    assert lotr.guarded_munlock(state, handle, *m.USER_DATA) == 0
