"""Static audit of a module's stack-canary scheme.

Four properties are checked:

P1   the guard is never set to a predictable value when ``random_get`` fails
P2a  a contiguous upward overflow from the stack cannot reach the guard
P2b  guest stores cannot modify the guard at all
P3   a corrupted canary traps immediately

Each check is a pattern scan over decoded instructions.  Whenever the scan
cannot decide, the verdict is Unknown; the checker never guesses Pass.
"""

from __future__ import annotations

import enum
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from .layout import LayoutReport, classify_layout, find_stack_pointer, reachable_by_ascending_overflow
from .ssp import LEGACY_MULTIPLIER, RANDOM_GET, WASI_MODULE
from .wasm.module import WasmModule
from .wasm.opcodes import LOADS, STORES

GUARD_NAME = "__stack_chk_guard"
FAIL_NAME = "__stack_chk_fail"
P3_BUDGET = 8

EXIT_PASS, EXIT_FAIL, EXIT_UNKNOWN = 0, 2, 3


class Status(str, enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Verdict:
    status: Status
    rationale: str
    evidence: tuple = ()  # (site, description)

    def to_json(self):
        return {
            "verdict": self.status.value,
            "rationale": self.rationale,
            "evidence": [{"site": s, "description": d} for s, d in self.evidence],
        }


def _v(status, rationale, *evidence):
    return Verdict(Status(status), rationale, tuple(evidence))


@dataclass(frozen=True)
class GuardLocation:
    kind: str  # "Global" | "LinearMemory" | "NotFound"
    value: Optional[int] = None

    def to_json(self):
        if self.kind == "Global":
            return {"kind": "Global", "index": self.value}
        if self.kind == "LinearMemory":
            return {"kind": "LinearMemory", "address": self.value}
        return {"kind": "NotFound"}

    def __str__(self):
        return self.kind if self.value is None else "%s(%d)" % (self.kind, self.value)


NOT_FOUND = GuardLocation("NotFound")


@dataclass(frozen=True)
class CanaryCheck:
    func_index: int
    site: int  # index of the comparison
    guard: GuardLocation
    fail_target: int


@dataclass(frozen=True)
class RobustnessReport:
    p1: Verdict
    p2a: Verdict
    p2b: Verdict
    p3: Verdict
    guard_location: GuardLocation
    layout: LayoutReport

    @property
    def verdicts(self):
        return {"P1": self.p1, "P2a": self.p2a, "P2b": self.p2b, "P3": self.p3}

    @property
    def exit_code(self):
        statuses = {v.status for v in self.verdicts.values()}
        if Status.FAIL in statuses:
            return EXIT_FAIL
        if Status.UNKNOWN in statuses:
            return EXIT_UNKNOWN
        return EXIT_PASS

    def to_json(self):
        return {
            "guard_location": self.guard_location.to_json(),
            "layout": self.layout.to_json(),
            "properties": {k: v.to_json() for k, v in self.verdicts.items()},
        }


def _site(fi, pc=None):
    return "func %d" % fi if pc is None else "func %d @%d" % (fi, pc)


def _quiet_sp(m):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return find_stack_pointer(m)


# ---------------------------------------------------------------------------
# canary checks and the guard


def _operand(instrs, end, sp):
    """Classify the operand expression ending at ``end`` (inclusive).

    Returns ``(kind, value, start)`` where kind is ``frame`` for a load
    relative to the frame base, ``global`` or ``memory`` for a guard access.
    """
    ins = instrs[end]
    if ins.op == "global.get" and ins.args[0] != sp:
        return "global", ins.args[0], end
    if ins.op == "i32.load" and end >= 1:
        base = instrs[end - 1]
        off = ins.args[1]
        if base.op == "i32.const":
            return "memory", (base.args[0] + off) & 0xFFFFFFFF, end - 1
        if base.op == "local.get" or (base.op == "global.get" and base.args[0] == sp):
            return "frame", off, end - 1
    return None


def find_canary_checks(m: WasmModule, sp=None) -> list:
    """Every ``frame-load; guard; compare; branch -> call`` site in the module."""
    if sp is None:
        sp = _quiet_sp(m)
    out = []
    for fi in m.defined_func_indices():
        instrs = m.body(fi).instrs
        for j, ins in enumerate(instrs):
            if ins.op not in ("i32.ne", "i32.eq") or j < 3 or j + 2 >= len(instrs):
                continue
            right = _operand(instrs, j - 1, sp)
            if right is None or right[2] < 1:
                continue
            left = _operand(instrs, right[2] - 1, sp)
            if left is None:
                continue
            kinds = {left[0], right[0]}
            if "frame" not in kinds or kinds == {"frame"}:
                continue
            g = left if left[0] != "frame" else right
            branch, call = instrs[j + 1], instrs[j + 2]
            if call.op != "call":
                continue
            if (ins.op, branch.op) not in (("i32.ne", "if"), ("i32.eq", "br_if")):
                continue
            loc = GuardLocation("Global" if g[0] == "global" else "LinearMemory", g[1])
            out.append(CanaryCheck(fi, j, loc, call.args[0]))
    return out


def locate_guard(m: WasmModule, checks=None) -> GuardLocation:
    named = m.global_index_by_name(GUARD_NAME)
    if named is not None:
        return GuardLocation("Global", named)
    checks = find_canary_checks(m) if checks is None else checks
    if not checks:
        return NOT_FOUND
    loc, _ = Counter(c.guard for c in checks).most_common(1)[0]
    return loc


# ---------------------------------------------------------------------------
# P1


_BIN = {
    "i32.add": lambda a, b: a + b, "i32.sub": lambda a, b: a - b, "i32.mul": lambda a, b: a * b,
    "i32.and": lambda a, b: a & b, "i32.or": lambda a, b: a | b, "i32.xor": lambda a, b: a ^ b,
    "i32.shl": lambda a, b: a << (b & 31),
}
_POP2_PUSH1 = frozenset(
    ["i32.div_s", "i32.div_u", "i32.rem_s", "i32.rem_u", "i32.shr_s", "i32.shr_u", "i32.rotl",
     "i32.rotr", "i32.eq", "i32.ne", "i32.lt_s", "i32.lt_u", "i32.gt_s", "i32.gt_u", "i32.le_s",
     "i32.le_u", "i32.ge_s", "i32.ge_u"])
_POP1_PUSH1 = frozenset(["i32.eqz", "i32.clz", "i32.ctz", "i32.popcnt"]) | LOADS
_BLOCKS = frozenset(["block", "loop"])


class _Undecidable(Exception):
    pass


def _is_guard_store(ins, addr, guard):
    if guard.kind == "Global":
        return ins.op == "global.set" and ins.args[0] == guard.value
    if guard.kind == "LinearMemory" and ins.op == "i32.store":
        return addr is not None and (addr + ins.args[1]) & 0xFFFFFFFF == guard.value
    return False


def _scan_error_path(instrs, start, guard):
    """Abstractly run straight-line code from ``start`` on the errno path.

    Returns ``("trap", pc)``, ``("store", pc, value, multiplied)`` or
    ``("exit", pc)`` when the function is left without touching the guard.
    Raises :class:`_Undecidable` on control flow or calls it cannot follow.
    """
    stack = []
    multiplied = False
    depth = 0

    def pop():
        return stack.pop() if stack else None

    pc = start
    while pc < len(instrs):
        ins = instrs[pc]
        op = ins.op
        if op == "unreachable":
            return ("trap", pc)
        if op == "i32.const":
            stack.append(ins.args[0] & 0xFFFFFFFF)
        elif op in _BIN:
            b, a = pop(), pop()
            if op == "i32.mul" and LEGACY_MULTIPLIER in (a, b):
                multiplied = True
            stack.append(None if a is None or b is None else _BIN[op](a, b) & 0xFFFFFFFF)
        elif op in _POP2_PUSH1:
            pop(), pop()
            stack.append(None)
        elif op in _POP1_PUSH1:
            pop()
            stack.append(None)
        elif op in ("local.get", "global.get"):
            stack.append(None)
        elif op in ("local.set", "drop"):
            pop()
        elif op in ("local.tee", "nop"):
            pass
        elif op == "global.set" or op in STORES:
            value = pop()
            addr = pop() if op != "global.set" else None
            if _is_guard_store(ins, addr, guard):
                return ("store", pc, value, multiplied)
        elif op in _BLOCKS:
            depth += 1
        elif op == "else" and depth == 0:
            # error arm done; the success arm is skipped
            pc = _matching_end(instrs, pc)
        elif op == "end":
            if depth:
                depth -= 1
            elif pc == len(instrs) - 1:
                return ("exit", pc)
        elif op == "return":
            return ("exit", pc)
        else:
            raise _Undecidable("%s at %d" % (op, pc))
        pc += 1
    return ("exit", len(instrs) - 1)


def _matching_end(instrs, pc):
    depth = 0
    for j in range(pc + 1, len(instrs)):
        op = instrs[j].op
        if op in ("block", "loop", "if"):
            depth += 1
        elif op == "end":
            if depth == 0:
                return j
            depth -= 1
    raise _Undecidable("unbalanced body")


def _else_of(instrs, k):
    """Index of the ``else`` belonging to the ``if`` at ``k``, or None."""
    depth = 0
    for j in range(k + 1, len(instrs)):
        op = instrs[j].op
        if op in ("block", "loop", "if"):
            depth += 1
        elif op == "end":
            if depth == 0:
                return None
            depth -= 1
        elif op == "else" and depth == 0:
            return j
    return None


def _error_branch_start(instrs, c):
    """Index where the errno != 0 path starts after ``call random_get`` at ``c``.

    Returns ``(start, how)``; raises :class:`_Undecidable` for shapes a
    linear scan cannot follow (errno stashed in a local, br_table, ...).
    """
    window = instrs[c + 1:c + 4]
    ops = [ins.op for ins in window]
    zero = bool(window) and window[0].op == "i32.const" and window[0].args[0] == 0

    if ops[:1] == ["if"]:
        return c + 2, "errno tested directly"
    if ops[:3] == ["i32.const", "i32.ne", "if"] and zero:
        return c + 4, "errno != 0"
    if ops[:2] == ["i32.eqz", "if"] or (ops[:3] == ["i32.const", "i32.eq", "if"] and zero):
        k = c + 2 if ops[0] == "i32.eqz" else c + 3
        els = _else_of(instrs, k)
        if els is not None:
            return els + 1, "errno == 0 tested, else arm"
        return _matching_end(instrs, k) + 1, "errno == 0 tested, fallthrough"
    if ops[:1] == ["drop"]:
        return c + 2, "errno dropped"
    raise _Undecidable("errno consumed by %s" % (ops[0] if ops else "end of body"))


def _stores_guard(instrs, guard):
    if guard.kind == "Global":
        return any(ins.op == "global.set" and ins.args[0] == guard.value for ins in instrs)
    return (any(ins.op == "i32.store" for ins in instrs)
            and any(ins.op == "i32.const" and ins.args[0] & 0xFFFFFFFF == guard.value
                    for ins in instrs))


def check_p1(m: WasmModule, guard: Optional[GuardLocation] = None) -> Verdict:
    rg = m.find_import(WASI_MODULE, RANDOM_GET)
    if rg is None:
        return _v("Unknown", "module does not import %s.%s" % (WASI_MODULE, RANDOM_GET))
    guard = locate_guard(m) if guard is None else guard
    if guard.kind == "NotFound":
        return _v("Unknown", "guard location not found")
    inits = [fi for fi in m.defined_func_indices()
             if any(ins.op == "call" and ins.args[0] == rg for ins in m.body(fi).instrs)
             and _stores_guard(m.body(fi).instrs, guard)]
    if not inits:
        return _v("Unknown", "no function both calls random_get and stores the guard")
    verdicts = [_p1_for(m, fi, rg, guard) for fi in inits]
    for status in (Status.FAIL, Status.UNKNOWN):
        for v in verdicts:
            if v.status is status:
                return v
    return verdicts[0]


def _p1_for(m, fi, rg, guard):
    instrs = m.body(fi).instrs
    calls = [pc for pc, ins in enumerate(instrs) if ins.op == "call" and ins.args[0] == rg]
    results = []
    for c in calls:
        try:
            start, how = _error_branch_start(instrs, c)
            res = _scan_error_path(instrs, start, guard)
        except _Undecidable as exc:
            return _v("Unknown", "error path after random_get not decidable: %s" % exc,
                      (_site(fi, c), "random_get call"))
        results.append((c, how, res))
    for c, how, res in results:
        if res[0] == "store":
            _, pc, value, multiplied = res
            ev = [(_site(fi, c), "random_get call; %s" % how),
                  (_site(fi, pc), "guard written on the error path")]
            if multiplied:
                ev.append((_site(fi, pc), "const %d multiply in error branch" % LEGACY_MULTIPLIER))
            if value is not None:
                ev.append((_site(fi, pc), "deterministic guard value 0x%08x" % value))
            return _v("Fail", "random_get failure leaves a predictable guard", *ev)
        if res[0] == "exit":
            return _v("Fail", "random_get failure returns without trapping; guard keeps its static value",
                      (_site(fi, c), "random_get call; %s" % how),
                      (_site(fi, res[1]), "error path exits"))
    c, how, res = results[0]
    return _v("Pass", "random_get failure traps before any guard store",
              (_site(fi, c), "random_get call; %s" % how),
              (_site(fi, res[1]), "unreachable on the error path"))


# ---------------------------------------------------------------------------
# P2, P3


def check_p2(m: WasmModule, guard: Optional[GuardLocation] = None, layout=None):
    """``(p2a, p2b)`` verdicts."""
    guard = locate_guard(m) if guard is None else guard
    if guard.kind == "Global":
        why = "stored outside linear memory, VM-managed (global %d)" % guard.value
        return _v("Pass", why), _v("Pass", why)
    if guard.kind == "NotFound":
        return (_v("Unknown", "guard location not found"),) * 2
    addr = guard.value
    p2b = _v("Fail", "linear memory has no write protection",
             ("address %d" % addr, "guard slot is writable by any guest store"))
    report = classify_layout(m) if layout is None else layout
    reach = reachable_by_ascending_overflow(report, addr)
    if reach is None:
        p2a = _v("Unknown", "memory layout unknown")
    elif reach:
        p2a = _v("Fail", "guard lies above the stack bottom in a %s layout" % report.layout.value,
                 ("address %d" % addr, "reachable from stack region %s" % (list(report.stack_region),)))
    else:
        p2a = _v("Pass", "guard lies below the stack in a %s layout" % report.layout.value,
                 ("address %d" % addr, "below stack region %s" % (list(report.stack_region),)))
    return p2a, p2b


def _fail_targets(m, checks):
    targets = sorted({c.fail_target for c in checks})
    if not targets:
        named = m.func_index_by_name(FAIL_NAME)
        if named is not None:
            targets = [named]
    return targets


def _p3_for(m, f):
    if f < m.num_imported_funcs:
        return _v("Unknown", "fail target %d is imported; body not inspectable" % f)
    for pc, ins in enumerate(m.body(f).instrs[:P3_BUDGET]):
        op = ins.op
        if op == "unreachable":
            return _v("Pass", "traps after %d instruction(s)" % (pc + 1),
                      (_site(f, pc), "unreachable"))
        if op in LOADS:
            return _v("Fail", "memory load before the trap", (_site(f, pc), op))
        if op in ("call", "call_indirect"):
            return _v("Fail", "%s before the trap" % op, (_site(f, pc), repr(ins)))
        if op in ("return", "br", "br_if", "br_table", "if", "end", "else"):
            return _v("Fail", "control leaves the straight-line path before trapping",
                      (_site(f, pc), op))
    return _v("Fail", "no unreachable within %d instructions" % P3_BUDGET, (_site(f), "budget exhausted"))


def check_p3(m: WasmModule, checks=None) -> Verdict:
    checks = find_canary_checks(m) if checks is None else checks
    targets = _fail_targets(m, checks)
    if not targets:
        return _v("Unknown", "no canary failure function found")
    verdicts = [_p3_for(m, f) for f in targets]
    for status in (Status.FAIL, Status.UNKNOWN):
        for v in verdicts:
            if v.status is status:
                return v
    return verdicts[0]


def audit(m: WasmModule) -> RobustnessReport:
    checks = find_canary_checks(m)
    guard = locate_guard(m, checks)
    layout = classify_layout(m)
    p2a, p2b = check_p2(m, guard, layout)
    return RobustnessReport(
        p1=check_p1(m, guard),
        p2a=p2a,
        p2b=p2b,
        p3=check_p3(m, checks),
        guard_location=guard,
        layout=layout,
    )
