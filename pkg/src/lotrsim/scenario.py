"""Line-oriented scenario language and its runner.

Grammar (one directive per line, ``#`` starts a comment, tokens are
whitespace separated, numbers are decimal or ``0x`` hex, data is a
``"quoted string"`` or ``hex:0011aa``)::

    MAP start length user|user-ro|user-exec|supervisor|kernel
    SECRET addr data
    REGISTER routine arity
    CLOSE-REGISTRY
    SET-FLAG smep|smap true|false
    SEGMENT gdt|ldt slot code ring x64|x32 [base limit]
    SEGMENT gdt|ldt slot data ring [base limit]
    GATE gdt|ldt slot target-selector offset rmpl [raw]

    PRIVCALL nr|routine args...        string args are staged in the arg page
    ATTACK-READ addr length             ring-3 read
    ATTACK-WRITE addr data              ring-3 write
    ATTACK-JUMP selector offset         far jump, then instruction fetch
    ATTACK-LRET ring [selector]         forged frame, then lret
    MPROTECT start length none|r|rw|rx|rwx

    EXPECT RAX value | EXPECT ERROR ENAME | EXPECT FAULT Kind | EXPECT OK

Every directive in the second group must be followed by exactly one EXPECT.
Selectors are symbolic (``PU_CS``, ``CG1``, ...), ``ldt:3`` / ``gdt:1/3``,
or a raw 16-bit encoding.
"""
from __future__ import annotations

import ast
import copy
import errno
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import lotr, machine, transfer
from .costs import CostModel, CostTable, cost_table
from .handlers import BUILTINS
from .machine import (
    GPR_NAMES,
    Bitness,
    Fault,
    FaultKind,
    GateDescriptor,
    PageAccess,
    Selector,
    TableKind,
    code_segment,
    data_segment,
    install_descriptor,
    page_span,
)

ACTIONS = ("PRIVCALL", "ATTACK-READ", "ATTACK-WRITE", "ATTACK-JUMP", "ATTACK-LRET", "MPROTECT")
ARITY = {
    "MAP": (3, 3), "SECRET": (2, 2), "REGISTER": (2, 2), "CLOSE-REGISTRY": (0, 0),
    "SET-FLAG": (2, 2), "SEGMENT": (4, 7), "GATE": (5, 6),
    "PRIVCALL": (1, 7), "ATTACK-READ": (2, 2), "ATTACK-WRITE": (2, 2),
    "ATTACK-JUMP": (2, 2), "ATTACK-LRET": (1, 2), "MPROTECT": (3, 3),
    "EXPECT": (1, 2),
}
MAP_CLASSES = {
    "user": (PageAccess.USER, True, False, False),
    "user-ro": (PageAccess.USER, False, False, False),
    "user-exec": (PageAccess.USER, False, True, False),
    "supervisor": (PageAccess.SUPERVISOR, True, False, False),
    "kernel": (PageAccess.SUPERVISOR, True, False, True),
}
SELECTORS = {
    "KERNEL_CS": machine.KERNEL_CS, "KERNEL_DS": machine.KERNEL_DS,
    "USER_CS": machine.USER_CS, "USER_DS": machine.USER_DS,
    "GATE_CS": lotr.GATE_CS, "GATE_DS": lotr.GATE_DS,
    "PU_CS": lotr.PU_CS, "PU_DS": lotr.PU_DS,
    "CG1": lotr.CG1, "CG2": lotr.CG2,
}
# forged-frame defaults per ring: (code selector, stack selector)
RING_FRAMES = {
    0: (machine.KERNEL_CS, machine.KERNEL_DS),
    1: (lotr.GATE_CS, lotr.GATE_DS),
    2: (lotr.PU_CS, lotr.PU_DS),
    3: (machine.USER_CS, machine.USER_DS),
}
BOOLS = {"true": True, "on": True, "1": True, "false": False, "off": False, "0": False}
LEAK_WINDOW = 4

_TOKEN = re.compile(r'\s*(?:(?P<comment>#.*)|(?P<string>"(?:[^"\\]|\\.)*")|(?P<bad>"[^\n]*)|(?P<word>\S+))')


class ScenarioSyntaxError(ValueError):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line, self.col, self.msg = line, col, msg


class ScenarioError(RuntimeError):
    """A scenario asked for something the runner cannot do (not a machine fault)."""


@dataclass(frozen=True)
class Token:
    text: str
    line: int
    col: int
    quoted: bool = False

    def error(self, msg: str) -> ScenarioSyntaxError:
        return ScenarioSyntaxError(self.line, self.col, msg)


@dataclass(frozen=True)
class Directive:
    name: str
    args: tuple
    line: int
    source: str

    @property
    def is_action(self) -> bool:
        return self.name in ACTIONS


@dataclass
class Scenario:
    directives: list[Directive] = field(default_factory=list)
    name: str = "<scenario>"

    def actions(self) -> list[Directive]:
        return [d for d in self.directives if d.is_action]


# -- parsing --------------------------------------------------------------

def tokenize(line: str, lineno: int) -> list[Token]:
    out = []
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None or m.end() == pos:
            break
        pos = m.end()
        if m.group("comment") is not None:
            break
        col = m.start(m.lastgroup) + 1
        if m.lastgroup == "bad":
            raise ScenarioSyntaxError(lineno, col, "unterminated string")
        if m.lastgroup == "string":
            out.append(Token(m.group("string"), lineno, col, quoted=True))
        else:
            out.append(Token(m.group("word"), lineno, col))
    return out


def parse_int(tok: Token) -> int:
    if tok.quoted:
        raise tok.error(f"expected a number, got string {tok.text}")
    try:
        return int(tok.text, 0)
    except ValueError:
        raise tok.error(f"expected a number, got {tok.text!r}") from None


def parse_data(tok: Token) -> bytes:
    if tok.quoted:
        try:
            return ast.literal_eval(tok.text).encode("utf-8")
        except (ValueError, SyntaxError):
            raise tok.error(f"bad string literal {tok.text}") from None
    if tok.text.startswith("hex:"):
        try:
            return bytes.fromhex(tok.text[4:])
        except ValueError:
            raise tok.error(f"bad hex data {tok.text!r}") from None
    raise tok.error(f"expected \"string\" or hex:... data, got {tok.text!r}")


def parse_selector(tok: Token) -> Selector:
    text = tok.text
    if text.upper() in SELECTORS:
        return SELECTORS[text.upper()]
    m = re.fullmatch(r"(gdt|ldt):(\d+)(?:/([0-3]))?", text, re.IGNORECASE)
    if m:
        ti = TableKind.LDT if m.group(1).lower() == "ldt" else TableKind.GDT
        return Selector(int(m.group(2)), ti, int(m.group(3) or 0))
    try:
        return Selector.decode(parse_int(tok))
    except ScenarioSyntaxError:
        raise tok.error(f"unknown selector {text!r}") from None


def _choice(tok: Token, options, what: str) -> str:
    word = tok.text.lower()
    if tok.quoted or word not in options:
        raise tok.error(f"expected {what} ({'|'.join(options)}), got {tok.text!r}")
    return word


def _ring(tok: Token) -> int:
    value = parse_int(tok)
    if not 0 <= value <= 3:
        raise tok.error(f"ring must be 0..3, got {value}")
    return value


def _table(tok: Token) -> TableKind:
    return TableKind.LDT if _choice(tok, ("gdt", "ldt"), "table") == "ldt" else TableKind.GDT


def _parse_args(name: str, toks: list[Token], head: Token):
    """Convert raw tokens into typed directive arguments."""
    if name == "MAP":
        return (parse_int(toks[0]), parse_int(toks[1]), _choice(toks[2], MAP_CLASSES, "page class"))
    if name == "SECRET":
        return (parse_int(toks[0]), parse_data(toks[1]))
    if name == "REGISTER":
        return (toks[0].text, parse_int(toks[1]))
    if name == "CLOSE-REGISTRY":
        return ()
    if name == "SET-FLAG":
        return (_choice(toks[0], ("smep", "smap"), "flag"), BOOLS[_choice(toks[1], BOOLS, "boolean")])
    if name == "SEGMENT":
        ti, slot = _table(toks[0]), parse_int(toks[1])
        kind = _choice(toks[2], ("code", "data"), "segment kind")
        ring = _ring(toks[3])
        rest = toks[4:]
        bits = None
        if kind == "code":
            if not rest:
                raise head.error("code SEGMENT needs a bitness")
            bits = Bitness(_choice(rest[0], ("x64", "x32"), "bitness"))
            rest = rest[1:]
        if len(rest) not in (0, 2):
            raise head.error("SEGMENT takes both base and limit or neither")
        base, limit = (parse_int(rest[0]), parse_int(rest[1])) if rest else (0, machine.FLAT_LIMIT)
        return (ti, slot, kind, ring, bits, base, limit)
    if name == "GATE":
        raw = False
        if len(toks) == 6:
            _choice(toks[5], ("raw",), "flag")
            raw = True
        return (_table(toks[0]), parse_int(toks[1]), parse_selector(toks[2]),
                parse_int(toks[3]), _ring(toks[4]), raw)
    if name == "PRIVCALL":
        nr = toks[0].text if not toks[0].quoted and not toks[0].text[0].isdigit() else parse_int(toks[0])
        return (nr, *(parse_data(t) if t.quoted or t.text.startswith("hex:") else parse_int(t)
                      for t in toks[1:]))
    if name == "ATTACK-READ":
        return (parse_int(toks[0]), parse_int(toks[1]))
    if name == "ATTACK-WRITE":
        return (parse_int(toks[0]), parse_data(toks[1]))
    if name == "ATTACK-JUMP":
        return (parse_selector(toks[0]), parse_int(toks[1]))
    if name == "ATTACK-LRET":
        return (_ring(toks[0]), parse_selector(toks[1]) if len(toks) > 1 else None)
    if name == "MPROTECT":
        return (parse_int(toks[0]), parse_int(toks[1]),
                _choice(toks[2], ("none", "r", "rw", "rx", "rwx"), "protection"))
    if name == "EXPECT":
        what = toks[0].text.upper()
        if what == "OK":
            if len(toks) != 1:
                raise toks[1].error("EXPECT OK takes no value")
            return ("OK", None)
        if len(toks) != 2:
            raise head.error(f"EXPECT {what} needs one value")
        if what == "RAX":
            return ("RAX", parse_int(toks[1]) & machine.ADDR_MASK)
        if what == "ERROR":
            code = getattr(errno, toks[1].text.upper(), None)
            if not isinstance(code, int):
                raise toks[1].error(f"unknown errno name {toks[1].text!r}")
            return ("ERROR", toks[1].text.upper())
        if what == "FAULT":
            try:
                return ("FAULT", FaultKind(toks[1].text))
            except ValueError:
                kinds = "|".join(k.value for k in FaultKind)
                raise toks[1].error(f"unknown fault kind {toks[1].text!r} (expected {kinds})") from None
        raise toks[0].error(f"unknown expectation {toks[0].text!r} (expected RAX|ERROR|FAULT|OK)")
    raise head.error(f"unknown directive {name!r}")


def parse_scenario(text: str, name: str = "<scenario>") -> Scenario:
    scn = Scenario(name=name)
    pending: Optional[Directive] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = tokenize(raw, lineno)
        if not toks:
            continue
        head, rest = toks[0], toks[1:]
        dname = head.text.upper()
        if head.quoted or dname not in ARITY:
            raise head.error(f"unknown directive {head.text!r}")
        lo, hi = ARITY[dname]
        if not lo <= len(rest) <= hi:
            want = str(lo) if lo == hi else f"{lo}..{hi}"
            raise head.error(f"{dname} takes {want} arguments, got {len(rest)}")
        d = Directive(dname, _parse_args(dname, rest, head), lineno, raw.strip())
        if dname == "EXPECT":
            if pending is None:
                raise head.error("EXPECT must directly follow a PRIVCALL, ATTACK or MPROTECT directive")
            pending = None
        elif pending is not None:
            raise head.error(f"{pending.name} on line {pending.line} has no EXPECT")
        elif d.is_action:
            pending = d
        scn.directives.append(d)
    if pending is not None:
        raise ScenarioSyntaxError(pending.line, 1, f"{pending.name} has no EXPECT")
    return scn


# -- running --------------------------------------------------------------

@dataclass(frozen=True)
class Outcome:
    kind: str  # "RAX", "FAULT", "OK"
    value: object = None
    detail: str = ""

    def __str__(self):
        if self.kind == "RAX":
            return f"RAX {self.value:#x}"
        if self.kind == "FAULT":
            return f"FAULT {self.value.value}"
        return "OK" + (f" {self.detail}" if self.detail else "")

    def matches(self, expect: tuple) -> bool:
        what, value = expect
        if what == "OK":
            return self.kind in ("OK", "RAX")
        if what == "RAX":
            return self.kind == "RAX" and self.value == value
        if what == "ERROR":
            return self.kind == "RAX" and self.value == lotr.errno_value(getattr(errno, value))
        return self.kind == "FAULT" and self.value is value


def _expect_text(expect: tuple) -> str:
    what, value = expect
    if what == "OK":
        return "OK"
    if what == "RAX":
        return f"RAX {value:#x}"
    if what == "FAULT":
        return f"FAULT {value.value}"
    return f"ERROR {value}"


@dataclass
class DirectiveResult:
    line: int
    source: str
    outcome: str
    status: str  # PASS, FAIL, ERROR or "-" for directives without an expectation
    expect: Optional[str] = None
    detail: str = ""
    leaks: list[str] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)


@dataclass
class RunReport:
    name: str
    results: list[DirectiveResult] = field(default_factory=list)
    diff: list[str] = field(default_factory=list)
    state: Optional[machine.MachineState] = field(default=None, repr=False, compare=False)
    handle: Optional[lotr.LotrHandle] = field(default=None, repr=False, compare=False)

    @property
    def expects(self) -> int:
        return sum(r.expect is not None for r in self.results)

    @property
    def failures(self) -> int:
        return sum(r.status in ("FAIL", "ERROR") for r in self.results)

    @property
    def leaks(self) -> list[str]:
        return [leak for r in self.results for leak in r.leaks]

    @property
    def passed(self) -> bool:
        return self.failures == 0 and not self.leaks

    def text(self) -> str:
        lines = [f"scenario: {self.name}"]
        for r in self.results:
            entry = f"L{r.line:<4} {r.source:<48} -> {r.outcome}"
            if r.expect is not None:
                entry += f"  [expect {r.expect}: {r.status}]"
            elif r.status == "ERROR":
                entry += "  [ERROR]"
            lines.append(entry)
            if r.detail:
                lines.append(f"      {r.detail}")
            for leak in r.leaks:
                lines.append(f"      LEAK {leak}")
        lines += self.diff
        lines.append(f"leaks: {len(self.leaks)}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'} "
                     f"({self.expects - self.failures}/{self.expects} expectations)")
        lines.append("")
        lines.append("[results]")
        for r in self.results:
            fields_ = [f"line={r.line}", f"directive={r.source.split()[0].upper()}",
                       f"status={r.status}", f"outcome={r.outcome.replace(' ', ':')}"]
            if r.expect is not None:
                fields_.append(f"expect={r.expect.replace(' ', ':')}")
            fields_.append(f"leaks={len(r.leaks)}")
            fields_ += [f"{k}={r.counters[k]}" for k in sorted(r.counters)]
            lines.append(" ".join(fields_))
        lines.append(f"summary status={'PASS' if self.passed else 'FAIL'} expects={self.expects} "
                     f"failed={self.failures} leaks={len(self.leaks)}")
        return "\n".join(lines) + "\n"


class LeakDetector:
    """Byte-level search for secret material anywhere ring 3 can observe it.

    Secrets are matched as ``LEAK_WINDOW``-byte windows (whole secret if
    shorter).  Bytes ring 3 wrote itself are not counted: a user typing the
    password into the argument page is not a leak.
    """

    def __init__(self):
        self.secrets: list[tuple[str, bytes]] = []
        self.authored: dict[int, int] = {}
        self.user_values: set[int] = set()

    def add_secret(self, label: str, data: bytes) -> None:
        if data:
            self.secrets.append((label, data))

    def note_user_write(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            self.authored[addr + i] = b

    def _windows(self):
        for label, data in self.secrets:
            w = min(LEAK_WINDOW, len(data))
            for i in range(len(data) - w + 1):
                yield label, data[i:i + w]

    def _authored(self, addr: int, chunk: bytes) -> bool:
        return all(self.authored.get(addr + i) == b for i, b in enumerate(chunk))

    def scan(self, state: machine.MachineState, observed: list[bytes] = (),
             skip_registers: tuple[str, ...] = ()) -> list[str]:
        if not self.secrets:
            return []
        found = []
        windows = list(self._windows())
        for start, blob in self._user_runs(state):
            for label, chunk in windows:
                pos = blob.find(chunk)
                while pos != -1:
                    if not self._authored(start + pos, chunk):
                        found.append(f"{label} bytes in ring-3 memory at {start + pos:#x}")
                        break
                    pos = blob.find(chunk, pos + 1)
        for reg in GPR_NAMES:
            value = state.regs[reg]
            if reg in skip_registers or value in self.user_values:
                continue
            blob = value.to_bytes(8, "little")
            for label, chunk in windows:
                if chunk in blob:
                    found.append(f"{label} bytes in register {reg}")
                    break
        for blob in observed:
            for label, chunk in windows:
                if chunk in blob:
                    found.append(f"{label} bytes in data returned to ring 3")
                    break
        return sorted(set(found))

    @staticmethod
    def _user_runs(state: machine.MachineState):
        """Contiguous runs of ring-3 readable pages that hold data."""
        pages = sorted(p for p, e in state.pages.items()
                       if e.access is PageAccess.USER and p in state.memory)
        run: list[int] = []
        for p in pages + [None]:
            if run and (p is None or p != run[-1] + 1):
                yield run[0] * machine.PAGE_SIZE, b"".join(bytes(state.memory[q]) for q in run)
                run = []
            if p is not None:
                run.append(p)


class Runner:
    def __init__(self, name: str = "<scenario>"):
        self.state, self.handle = lotr.canonical_setup()
        self.detector = LeakDetector()
        self.report = RunReport(name)

    # each handler returns (outcome, observed bytes, registers excluded from the scan)
    def _privcall(self, d: Directive):
        nr, *args = d.args
        if isinstance(nr, str):
            try:
                nr = self.handle.pct.number_of(nr)
            except KeyError:
                raise ScenarioError(f"no registered routine named {nr!r}") from None
        flat, cursor = [], self.handle.config.arg_page[0]
        for arg in args:
            if isinstance(arg, bytes):
                machine.write_mem(self.state, cursor, arg)
                self.detector.note_user_write(cursor, arg)
                flat += [cursor, len(arg)]
                cursor += len(arg) + (-len(arg) % 8)
            else:
                flat.append(arg)
        if len(flat) > lotr.MAX_ARGS:
            raise ScenarioError(f"{len(flat)} arguments after staging strings; at most {lotr.MAX_ARGS}")
        self.detector.user_values.update(v & machine.ADDR_MASK for v in (nr, *flat))
        rax = lotr.privcall(self.state, self.handle, nr, *flat)
        return Outcome("RAX", rax), [], ("RAX",)

    def _attack_read(self, d: Directive):
        addr, length = d.args
        data = machine.read_mem(self.state, addr, length)
        return Outcome("OK", data, f"read {len(data)} bytes"), [data], ()

    def _attack_write(self, d: Directive):
        addr, data = d.args
        machine.write_mem(self.state, addr, data)
        self.detector.note_user_write(machine.translate(self.state, addr, len(data)), data)
        return Outcome("OK", None, f"wrote {len(data)} bytes"), [], ()

    def _attack_jump(self, d: Directive):
        sel, offset = d.args
        transfer.far_jump(self.state, sel, offset)
        transfer.fetch(self.state)
        return Outcome("OK", None, f"now CPL {self.state.cpl}"), [], ()

    def _attack_lret(self, d: Directive):
        ring, sel = d.args
        cs, ss = RING_FRAMES[ring]
        if sel is not None:
            cs = sel
        regs = self.state.regs
        frame = transfer.SavedFrame(regs.rip, cs.with_rpl(ring), regs.rsp, ss.with_rpl(ring))
        transfer.plant_frame(self.state, frame)
        transfer.long_return(self.state)
        return Outcome("OK", None, f"now CPL {self.state.cpl}"), [], ()

    def _mprotect(self, d: Directive):
        start, length, prot = d.args
        rc = lotr.guarded_mprotect(self.state, self.handle, start, length,
                                   writable="w" in prot, executable="x" in prot)
        return Outcome("RAX", rc & machine.ADDR_MASK), [], ()

    def _setup(self, d: Directive) -> str:
        name, args = d.name, d.args
        if name == "MAP":
            start, length, cls = args
            access, writable, executable, kernel = MAP_CLASSES[cls]
            self.state.map_range(start, length, access, writable, executable, kernel)
            return f"mapped {len(page_span(start, length))} page(s)"
        if name == "SECRET":
            addr, data = args
            self.state.poke(addr, data)
            self.handle.symbols["secret"] = (addr, len(data))
            heap_start, heap_len = self.handle.config.privuser_heap
            if heap_start <= addr < heap_start + heap_len and addr + len(data) > self.handle.heap_next:
                end = addr + len(data)
                self.handle.heap_next = end + (-end % 16)
            self.detector.add_secret(f"secret@{addr:#x}", data)
            return f"{len(data)} secret bytes placed"
        if name == "REGISTER":
            routine, arity = args
            builtin = BUILTINS.get(routine)
            if builtin is None:
                raise ScenarioError(f"no built-in routine {routine!r} (have {', '.join(BUILTINS)})")
            if arity != builtin.arity:
                raise ScenarioError(f"{routine} takes {builtin.arity} arguments, REGISTER says {arity}")
            nr = lotr.register_privcall(self.handle, routine, arity, builtin.fn)
            return f"nr={nr}"
        if name == "CLOSE-REGISTRY":
            self.handle.close_registry()
            return "closed"
        if name == "SET-FLAG":
            flag, value = args
            setattr(self.state, flag, value)
            return f"{flag}={'on' if value else 'off'}"
        if name == "SEGMENT":
            ti, slot, kind, ring, bits, base, limit = args
            desc = code_segment(ring, bits, base, limit) if kind == "code" else data_segment(ring, base, limit)
            install_descriptor(self.state, ti, slot, desc)
            return "installed"
        if name == "GATE":
            ti, slot, target, offset, rmpl, raw = args
            gate = GateDescriptor(target, offset, rmpl)
            if raw:
                self.state.table(ti).raw_install(slot, gate)
            else:
                install_descriptor(self.state, ti, slot, gate)
            return "installed" + (" (unvalidated)" if raw else "")
        raise ScenarioError(f"unhandled directive {name}")

    def run(self, scn: Scenario) -> RunReport:
        actions = {
            "PRIVCALL": self._privcall, "ATTACK-READ": self._attack_read,
            "ATTACK-WRITE": self._attack_write, "ATTACK-JUMP": self._attack_jump,
            "ATTACK-LRET": self._attack_lret, "MPROTECT": self._mprotect,
        }
        ds = scn.directives
        i = 0
        while i < len(ds):
            d = ds[i]
            before = Counter(self.state.counters)
            observed, skip = [], ()
            result = DirectiveResult(d.line, d.source, "", "-")
            try:
                if d.is_action:
                    snapshot = copy.deepcopy((self.state, self.handle))
                    try:
                        outcome, observed, skip = actions[d.name](d)
                    except Fault as exc:
                        outcome = Outcome("FAULT", exc.kind, exc.detail)
                        # the faulting context is torn down; resume from before the directive
                        counters = self.state.counters
                        self.state, self.handle = snapshot
                        self.state.counters = counters
                    expect = ds[i + 1].args
                    result.outcome = "OK" if outcome.kind == "OK" else str(outcome)
                    result.detail = outcome.detail
                    result.expect = _expect_text(expect)
                    result.status = "PASS" if outcome.matches(expect) else "FAIL"
                    i += 1
                else:
                    result.outcome = "OK"
                    result.detail = self._setup(d)
            except (ScenarioError, lotr.LotrError, Fault) as exc:
                result.outcome = "ERROR"
                result.status = "ERROR"
                result.detail = str(exc)
            result.counters = Counter({k: v for k, v in (self.state.counters - before).items() if v})
            result.leaks = self.detector.scan(self.state, observed, skip)
            self.report.results.append(result)
            if result.status in ("FAIL", "ERROR"):
                if result.status == "FAIL":
                    self.report.diff = [f"--- expected (line {ds[i].line})", "+++ got",
                                        f"- {result.expect}", f"+ {result.outcome}"]
                break
            i += 1
        self.report.state, self.report.handle = self.state, self.handle
        return self.report


def run_scenario(scn: Scenario) -> RunReport:
    return Runner(scn.name).run(scn)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_scenario(text, name=str(path).rsplit("/", 1)[-1])


def compare_mechanisms(workload: Scenario, model: CostModel = CostModel()) -> CostTable:
    """Step counts for the workload's privcalls under the three protection mechanisms."""
    bad = [d for d in workload.actions() if d.name != "PRIVCALL"]
    if bad:
        raise ScenarioError(f"line {bad[0].line}: workloads may only issue PRIVCALLs")
    report = run_scenario(workload)
    if not report.passed:
        raise ScenarioError(f"workload {workload.name} failed:\n{report.text()}")
    calls = [r for r in report.results if r.source.split()[0].upper() == "PRIVCALL"]
    counts = sum((r.counters for r in calls), Counter())
    protected = len(page_span(*report.handle.config.privuser_data))
    return cost_table(counts, len(calls), protected, model)
