import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lotrsim import machine as m
from lotrsim.machine import Bitness, Fault, FaultKind, PageAccess, Selector, TableKind

from oracles import ACCESS_TABLE, PRIVILEGED_INSTRUCTION

PAGE = 0x100


def _bare():
    return m.MachineState()


def _access(state, ring, op, page):
    try:
        if op == "exec":
            m.check_exec(state, ring, page)
        else:
            m.check_data_access(state, ring, page, write=(op == "write"))
    except Fault as exc:
        assert exc.kind is FaultKind.PageFault
        return "n"
    return "Y"


def test_access_matrix_matches_truth_table():
    mismatches = []
    for (cls, op, smep, smap), row in ACCESS_TABLE.items():
        state = _bare()
        access = PageAccess.SUPERVISOR if cls == "supervisor" else PageAccess.USER
        state.map_range(PAGE * m.PAGE_SIZE, m.PAGE_SIZE, access, writable=True, executable=True)
        state.smep, state.smap = bool(smep), bool(smap)
        got = "".join(_access(state, ring, op, PAGE) for ring in range(4))
        if got != row:
            mismatches.append((cls, op, smep, smap, row, got))
    assert len(ACCESS_TABLE) * 4 == 96
    assert mismatches == []


def test_privileged_instruction_row():
    got = ""
    for ring in range(4):
        try:
            m.privileged_instruction_check(ring)
            got += "Y"
        except Fault as exc:
            assert exc.kind is FaultKind.GeneralProtection
            got += "n"
    assert got == PRIVILEGED_INSTRUCTION


def test_write_needs_writable_and_exec_needs_executable():
    state = _bare()
    state.map_range(0x1000, 0x1000, PageAccess.USER, writable=False, executable=False)
    m.check_data_access(state, 3, 1, write=False)
    with pytest.raises(Fault, match="read-only"):
        m.check_data_access(state, 3, 1, write=True)
    with pytest.raises(Fault, match="no-exec"):
        m.check_exec(state, 3, 1)


def test_unmapped_page_rejects_everything():
    state = _bare()
    for call in (lambda: m.check_data_access(state, 0, 7, False),
                 lambda: m.check_data_access(state, 0, 7, True),
                 lambda: m.check_exec(state, 0, 7)):
        with pytest.raises(Fault) as exc:
            call()
        assert exc.value.kind is FaultKind.Unmapped


def test_fault_names_denying_rule():
    state = _bare()
    state.map_range(0, 0x1000, PageAccess.USER)
    state.smap = True
    with pytest.raises(Fault, match="smap"):
        m.check_data_access(state, 1, 0, False)


# -- descriptors and selectors --------------------------------------------

def test_selector_roundtrip():
    for index, ti, rpl in itertools.product((0, 1, 5, 15, 8191), TableKind, range(4)):
        sel = Selector(index, ti, rpl)
        assert Selector.decode(sel.encode()) == sel


def test_selector_rejects_bad_rpl():
    with pytest.raises(ValueError):
        Selector(1, TableKind.LDT, 4)


def test_data_descriptor_has_no_bitness():
    with pytest.raises(ValueError):
        m.SegmentDescriptor(m.SegmentKind.DATA, 1, Bitness.X64)
    with pytest.raises(ValueError):
        m.SegmentDescriptor(m.SegmentKind.CODE, 1, None)


def test_descriptor_base_plus_limit_cannot_overflow():
    with pytest.raises(ValueError):
        m.data_segment(0, 1, 1 << 64)
    m.data_segment(0, 0, 1 << 64)


def test_install_gate_to_64bit_code():
    state = _bare()
    m.install_descriptor(state, TableKind.LDT, 1, m.code_segment(1, Bitness.X64))
    m.install_descriptor(state, TableKind.LDT, 5, m.GateDescriptor(Selector(1, TableKind.LDT, 1), 0x1000, 3))
    assert isinstance(state.ldt[5], m.GateDescriptor)


def test_install_gate_to_32bit_code_is_invalid():
    state = _bare()
    m.install_descriptor(state, TableKind.LDT, 3, m.code_segment(2, Bitness.X32, 0x1000_0000, 0x1000))
    with pytest.raises(Fault) as exc:
        m.install_descriptor(state, TableKind.LDT, 5, m.GateDescriptor(Selector(3, TableKind.LDT), 0, 3))
    assert exc.value.kind is FaultKind.InvalidGate
    assert state.ldt[5] is None


def test_install_gate_to_data_is_invalid():
    state = _bare()
    m.install_descriptor(state, TableKind.LDT, 2, m.data_segment(1))
    with pytest.raises(Fault) as exc:
        m.install_descriptor(state, TableKind.LDT, 5, m.GateDescriptor(Selector(2, TableKind.LDT), 0, 3))
    assert exc.value.kind is FaultKind.InvalidGate


@pytest.mark.parametrize("slot", [0, m.TABLE_CAPACITY, 99])
def test_install_at_null_or_out_of_range_slot(slot):
    with pytest.raises(Fault) as exc:
        m.install_descriptor(_bare(), TableKind.GDT, slot, m.data_segment(0))
    assert exc.value.kind is FaultKind.InvalidSelector


def test_resolve_selector(state):
    desc = m.resolve_selector(state, Selector(3, TableKind.LDT))
    assert desc.dpl == 2 and desc.bitness is Bitness.X32
    for sel in (Selector(0, TableKind.GDT), Selector(m.TABLE_CAPACITY, TableKind.LDT), Selector(9, TableKind.LDT)):
        with pytest.raises(Fault) as exc:
            m.resolve_selector(state, sel)
        assert exc.value.kind is FaultKind.InvalidSelector


def test_tss_holds_only_rings_0_to_2():
    tss = m.TaskStateSegment()
    with pytest.raises(ValueError):
        tss.set_stack(3, m.USER_DS, 0)


def test_cpl_follows_cs():
    state = m.new_process()
    assert state.cpl == 3
    state.regs.cs = m.KERNEL_CS
    assert state.cpl == 0
    assert not hasattr(state, "ring")


# -- addressing ---------------------------------------------------------------

PU_SEG = m.data_segment(2, 0x1000_0000, 0x41000)


def test_x32_truncates_kernel_address():
    flat = m.data_segment(2, 0, 1 << 32)
    assert m.effective_address(None, 0xFFFF_8000_0000_1000, flat, Bitness.X32) == 0x1000


def test_x64_is_flat():
    assert m.effective_address(None, 0x402000, PU_SEG, Bitness.X64) == 0x402000


def _limit_oracle(addr, length, base, limit):
    low = addr % (1 << 32)
    return base <= low and low + length <= base + limit and low + length <= 1 << 32


@given(st.integers(0, (1 << 64) - 1), st.integers(1, 16))
def test_x32_limit_check_matches_arithmetic(addr, length):
    ok = _limit_oracle(addr, length, PU_SEG.base, PU_SEG.limit)
    try:
        linear = m.effective_address(None, addr, PU_SEG, Bitness.X32, length)
    except Fault as exc:
        assert not ok and exc.kind is FaultKind.GeneralProtection
    else:
        assert ok and linear == addr % (1 << 32)


@given(st.integers(0, (1 << 64) - 1))
def test_x32_confinement(addr):
    flat = m.data_segment(2, 0, 1 << 64)
    assert m.effective_address(None, addr, flat, Bitness.X32) < 1 << 32


def test_segment_limit_edges():
    end = PU_SEG.base + PU_SEG.limit
    assert m.effective_address(None, end - 1, PU_SEG, Bitness.X32) == end - 1
    with pytest.raises(Fault):
        m.effective_address(None, end, PU_SEG, Bitness.X32)
    with pytest.raises(Fault):
        m.effective_address(None, end - 4, PU_SEG, Bitness.X32, length=8)
    with pytest.raises(Fault):
        m.effective_address(None, PU_SEG.base - 1, PU_SEG, Bitness.X32)


# -- memory -------------------------------------------------------------------

def _split_pages():
    state = m.new_process()
    state.map_range(0x1000_0000, 0x1000, PageAccess.USER)
    state.map_range(0x1000_1000, 0x1000, PageAccess.SUPERVISOR)
    state.poke(0x1000_0FF0, b"A" * 16)
    state.poke(0x1000_1000, b"SECRETSECRET")
    return state


def test_ring3_read_spanning_into_supervisor_page_leaks_nothing():
    state = _split_pages()
    with pytest.raises(Fault) as exc:
        m.read_mem(state, 0x1000_0FF0, 32)
    assert exc.value.kind is FaultKind.PageFault
    assert state.status == exc.value


def test_ring2_reads_the_same_span():
    state = _split_pages()
    m.install_descriptor(state, TableKind.LDT, 1, m.code_segment(2, Bitness.X64))
    state.regs.cs = Selector(1, TableKind.LDT, 2)
    assert m.read_mem(state, 0x1000_0FF0, 28) == b"A" * 16 + b"SECRETSECRET"


def test_read_unmapped():
    with pytest.raises(Fault) as exc:
        m.read_mem(m.new_process(), 0x3000_0000, 4)
    assert exc.value.kind is FaultKind.Unmapped


def test_failed_write_changes_nothing():
    state = _split_pages()
    before = state.peek(0x1000_0FF0, 32)
    with pytest.raises(Fault):
        m.write_mem(state, 0x1000_0FF8, b"Z" * 16)
    assert state.peek(0x1000_0FF0, 32) == before


def test_faulted_machine_is_inert():
    state = _split_pages()
    with pytest.raises(Fault) as first:
        m.read_mem(state, 0x1000_1000, 1)
    regs = state.regs.gpr.copy()
    for op in (lambda: m.read_mem(state, 0x1000_0000, 1),
               lambda: m.write_mem(state, 0x1000_0000, b"x"),
               lambda: m.push(state, 1)):
        with pytest.raises(Fault) as again:
            op()
        assert again.value == first.value
    assert state.regs.gpr == regs
    state.reset()
    assert m.read_mem(state, 0x1000_0FF0, 1) == b"A"


def test_pure_checks_do_not_latch():
    state = _split_pages()
    with pytest.raises(Fault):
        m.check_data_access(state, 3, 0x10001, False)
    assert state.running


def test_push_pop_roundtrip():
    state = m.new_process()
    rsp = state.regs.rsp
    for v in (1, 2, (1 << 64) - 1):
        m.push(state, v)
    assert [m.pop(state) for _ in range(3)] == [(1 << 64) - 1, 2, 1]
    assert state.regs.rsp == rsp


# -- U/S marking --------------------------------------------------------------

def test_set_page_supervisor_and_revert():
    state = m.new_process()
    state.map_range(0x1000_0000, 0x3000, PageAccess.USER)
    state.map_range(0x1000_3000, 0x1000, PageAccess.SUPERVISOR)
    before = {p: e.access for p, e in state.pages.items()}
    changed = m.set_page_supervisor(state, 0x1000_0000, 0x4000)
    assert changed == [0x10000, 0x10001, 0x10002]
    assert all(state.pages[p].access is PageAccess.SUPERVISOR for p in range(0x10000, 0x10004))
    assert m.set_page_supervisor(state, 0x1000_0000, 0x4000) == []
    m.revert_supervisor(state)
    assert {p: e.access for p, e in state.pages.items()} == before


def test_set_page_supervisor_unmapped():
    state = m.new_process()
    with pytest.raises(Fault) as exc:
        m.set_page_supervisor(state, 0x2000_0000, 0x1000)
    assert exc.value.kind is FaultKind.Unmapped


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 63), st.integers(1, 8)), max_size=6))
def test_revert_restores_any_marking(ranges):
    state = m.MachineState()
    state.map_range(0, 72 * m.PAGE_SIZE, PageAccess.USER)
    state.map_range(5 * m.PAGE_SIZE, m.PAGE_SIZE, PageAccess.SUPERVISOR)
    before = {p: e.access for p, e in state.pages.items()}
    for start, n in ranges:
        m.set_page_supervisor(state, start * m.PAGE_SIZE, n * m.PAGE_SIZE)
    m.revert_supervisor(state)
    assert {p: e.access for p, e in state.pages.items()} == before
