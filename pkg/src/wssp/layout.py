"""Shadow-stack discovery and linear-memory layout classification.

Compilers targeting wasm32 keep a software stack in linear memory, addressed
through a mutable i32 global.  This module finds that global, recognises the
per-function frame set-up/tear-down sequences, and decides whether the stack
sits below the static data (stack-first) or above it (no-stack-first).
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional

from .wasm.module import WasmModule

STACK_POINTER_NAME = "__stack_pointer"

_CONTROL = frozenset(
    {"block", "loop", "if", "else", "end", "br", "br_if", "br_table", "return", "unreachable"})


class AmbiguousStackPointer(UserWarning):
    """More than one global matches the stack-pointer prologue heuristic."""


class Layout(str, enum.Enum):
    STACK_FIRST = "StackFirst"
    NO_STACK_FIRST = "NoStackFirst"
    UNKNOWN = "Unknown"


class FramePattern(str, enum.Enum):
    TEE_SET = "TeeSet"
    GET_SUB_SET = "GetSubSet"
    UNRECOGNIZED = "Unrecognized"


@dataclass(frozen=True)
class LayoutReport:
    sp_global: Optional[int]
    sp_initial: Optional[int]
    layout: Layout
    data_range: Optional[tuple] = None
    stack_region: Optional[tuple] = None
    evidence: tuple = ()

    def to_json(self):
        return {
            "layout": self.layout.value,
            "sp_global": self.sp_global,
            "sp_initial": self.sp_initial,
            "data_range": list(self.data_range) if self.data_range else None,
            "stack_region": list(self.stack_region) if self.stack_region else None,
            "evidence": list(self.evidence),
        }


@dataclass(frozen=True)
class FrameInfo:
    func_index: int
    sp_global: int
    frame_size: int = 0
    frame_local: Optional[int] = None
    prologue_span: Optional[tuple] = None
    epilogue_sites: tuple = ()
    recognized: bool = False
    pattern: FramePattern = FramePattern.UNRECOGNIZED
    touches_sp: bool = False
    reason: str = ""


def match_prologue(instrs, i, sp=None):
    """Match ``global.get g; i32.const k; i32.sub; (local.tee t)?; global.set g``.

    Returns ``(g, k, t_or_None, end)`` with ``end`` one past the match.
    """
    if i + 4 > len(instrs):
        return None
    a, b, c = instrs[i:i + 3]
    if a.op != "global.get" or b.op != "i32.const" or c.op != "i32.sub":
        return None
    g = a.args[0]
    if sp is not None and g != sp:
        return None
    nxt = instrs[i + 3]
    if nxt.op == "local.tee" and i + 4 < len(instrs):
        last = instrs[i + 4]
        if last.op == "global.set" and last.args[0] == g:
            return g, b.args[0], nxt.args[0], i + 5
        return None
    if nxt.op == "global.set" and nxt.args[0] == g:
        return g, b.args[0], None, i + 4
    return None


def match_epilogue(instrs, j, sp, frame_local):
    """Match an epilogue ending with the ``global.set sp`` at index ``j``.

    Returns ``(k, start)`` or None.
    """
    if j < 3:
        return None
    base, const, add = instrs[j - 3:j]
    if const.op != "i32.const" or add.op != "i32.add":
        return None
    if base.op == "global.get" and base.args[0] == sp:
        return const.args[0], j - 3
    if base.op == "local.get" and frame_local is not None and base.args[0] == frame_local:
        return const.args[0], j - 3
    return None


def _mutable_i32(m, g):
    gt = m.global_type(g)
    return gt.valtype == "i32" and gt.mutable


def stack_pointer_candidates(m: WasmModule) -> list:
    """Mutable i32 globals used in a frame-allocation prologue, ascending."""
    found = set()
    for body in m.code:
        instrs = body.instrs
        for i, ins in enumerate(instrs):
            if ins.op == "global.get":
                hit = match_prologue(instrs, i)
                if hit and _mutable_i32(m, hit[0]):
                    found.add(hit[0])
    return sorted(found)


def find_stack_pointer(m: WasmModule) -> Optional[int]:
    """Locate the shadow-stack pointer global.

    A global named ``__stack_pointer`` (name section, export or import) wins.
    Otherwise the unique mutable i32 global that appears in a prologue
    pattern is returned.  Several candidates yield None plus an
    :class:`AmbiguousStackPointer` warning.
    """
    g = m.global_index_by_name(STACK_POINTER_NAME)
    if g is None:
        for i, imp in enumerate(m.imports_of("global")):
            if imp.name == STACK_POINTER_NAME:
                g = i
                break
    if g is not None and g < m.num_globals and _mutable_i32(m, g):
        return g
    candidates = stack_pointer_candidates(m)
    if len(candidates) == 1:
        return candidates[0]
    if len(candidates) > 1:
        warnings.warn(
            AmbiguousStackPointer("stack pointer candidates %s" % candidates), stacklevel=2)
    return None


def _frame_for(m, fi, sp):
    instrs = m.body(fi).instrs
    n = len(instrs)
    touches = [i for i, ins in enumerate(instrs)
               if ins.op in ("global.get", "global.set") and ins.args[0] == sp]

    def unrecognized(reason, **kw):
        return FrameInfo(fi, sp, touches_sp=bool(touches), reason=reason, **kw)

    if not touches:
        return unrecognized("no stack pointer access")
    first = touches[0]
    depth = 0
    for ins in instrs[:first]:
        if ins.op in ("block", "loop", "if"):
            depth += 1
        elif ins.op == "end":
            depth -= 1
    hit = match_prologue(instrs, first, sp)
    if hit is None or depth != 0:
        return unrecognized("no recognised prologue")
    _, k, t, pro_end = hit
    pattern = FramePattern.TEE_SET if t is not None else FramePattern.GET_SUB_SET
    if k <= 0:
        return unrecognized("non-positive frame size %d" % k)

    epilogues = []
    last_control = pro_end - 1
    for j in range(pro_end, n):
        ins = instrs[j]
        op = ins.op
        if op in ("local.set", "local.tee") and t is not None and ins.args[0] == t:
            return unrecognized("frame base local %d reassigned" % t)
        if op == "global.set" and ins.args[0] == sp:
            ep = match_epilogue(instrs, j, sp, t)
            if ep is None:
                return unrecognized("stack pointer written outside an epilogue")
            if ep[0] != k:
                return unrecognized("epilogue constant %d differs from prologue %d" % (ep[0], k))
            if ep[1] <= last_control:
                return unrecognized("epilogue straddles control flow")
            epilogues.append((ep[1], j + 1))
            # the frame must be released only right before leaving the function
            for nxt in range(j + 1, n):
                nop = instrs[nxt].op
                if nop == "global.set" and instrs[nxt].args[0] == sp:
                    return unrecognized("stack pointer written after epilogue")
                if nop in _CONTROL:
                    if nop == "return" or nxt == n - 1:
                        break
                    return unrecognized("epilogue not followed by a return")
        if op == "return":
            if not epilogues or epilogues[-1][0] <= last_control:
                return unrecognized("return without epilogue")
        if op in _CONTROL:
            last_control = j
    if not epilogues:
        return unrecognized("no epilogue")
    # fallthrough at the final end must be covered by an epilogue
    tail_control = max((i for i in range(pro_end, n - 1) if instrs[i].op in _CONTROL),
                       default=pro_end - 1)
    tail_exits = n >= 2 and instrs[n - 2].op in ("return", "unreachable", "br")
    if not tail_exits and epilogues[-1][0] <= tail_control:
        return unrecognized("fallthrough path keeps the frame")
    return FrameInfo(
        fi, sp,
        frame_size=k,
        frame_local=t,
        prologue_span=(first, pro_end),
        epilogue_sites=tuple(epilogues),
        recognized=True,
        pattern=pattern,
        touches_sp=True,
    )


def detect_frames(m: WasmModule, sp: int) -> list:
    """One :class:`FrameInfo` per defined function.

    A frame is recognised only when its prologue and every epilogue use the
    same constant and every exit path releases the frame.  Anything else is
    reported unrecognised with a reason, never guessed.
    """
    if not _mutable_i32(m, sp):
        raise ValueError("global %d is not a mutable i32" % sp)
    return [_frame_for(m, fi, sp) for fi in m.defined_func_indices()]


def data_range(m: WasmModule):
    spans = [(seg.const_offset, seg.const_offset + len(seg.data))
             for seg in m.data if seg.const_offset is not None and seg.data]
    if not spans:
        return None
    return min(lo for lo, _ in spans), max(hi for _, hi in spans)


def classify_layout(m: WasmModule, sp: Optional[int] = None) -> LayoutReport:
    evidence = []
    if sp is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sp = find_stack_pointer(m)
        evidence.extend(str(w.message) for w in caught)
    sp_initial = None
    if sp is not None:
        how = "named %s" % STACK_POINTER_NAME if m.global_index_by_name(
            STACK_POINTER_NAME) == sp else "prologue pattern"
        evidence.append("stack pointer is global %d (%s)" % (sp, how))
        gdef = m.global_def(sp)
        if gdef is not None and gdef.const_value is not None:
            sp_initial = gdef.const_value & 0xFFFFFFFF
            evidence.append("initial stack pointer %d" % sp_initial)
        else:
            evidence.append("stack pointer initial value not constant")
    else:
        evidence.append("no stack pointer found")
    dr = data_range(m)
    if dr is not None:
        evidence.append("active data spans [%d, %d)" % dr)
    else:
        evidence.append("no active data segments")

    layout, region = Layout.UNKNOWN, None
    if sp_initial is not None and dr is not None:
        if sp_initial <= dr[0]:
            layout, region = Layout.STACK_FIRST, (0, sp_initial)
            evidence.append("stack top %d at or below data start %d" % (sp_initial, dr[0]))
        elif sp_initial >= dr[1]:
            layout, region = Layout.NO_STACK_FIRST, (dr[1], sp_initial)
            evidence.append("stack top %d at or above data end %d" % (sp_initial, dr[1]))
        else:
            evidence.append("stack top %d falls inside data" % sp_initial)
    return LayoutReport(sp, sp_initial, layout, dr, region, tuple(evidence))


def reachable_by_ascending_overflow(report: LayoutReport, target_addr: int) -> Optional[bool]:
    """Can a contiguous upward write that starts in the stack reach ``target_addr``?

    None when the layout is unknown.
    """
    if report.layout is Layout.UNKNOWN or report.stack_region is None:
        return None
    return target_addr > report.stack_region[0]
