"""Ground-truth guest modules with declared outcomes per build flavor.

Every guest is assembled directly with the module model, so no C toolchain
is involved.  Common shape:

* imports ``wasi_snapshot_preview1.fd_write`` and nothing else;
* one exported memory of 3 pages, page 2 (``IO_BASE``) used for iovecs and
  printed text;
* a mutable i32 ``__stack_pointer`` starting at 65536;
* a 64-byte static data segment, placed after the stack (stack-first) or
  at 1040 below it (no-stack-first), with the legacy guard slot reserved
  right in front of it.

Expected outcomes are derived by replaying each attack's stores over the
frame geometry the instrumenter produces, so an overflow that happens to
overwrite both the canary and a linear-memory guard with the same bytes is
predicted Silent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import harness
from .harness import Category, MatrixEntry, RandomSource, RunSpec
from .layout import Layout
from .ssp import LEGACY_MULTIPLIER, SspConfig, inject_fault_random, instrument, legacy_instrument
from .wasm.binary import decode, encode
from .wasm.module import (
    BLOCK_EMPTY,
    DataSegment,
    Export,
    FuncBody,
    FuncType,
    GlobalDef,
    I,
    Import,
    Limits,
    NameSection,
    WasmModule,
)

log = logging.getLogger(__name__)

FLAVORS = ("none", "legacy", "hardened")
MODES = ("fixed", "fail", "inject")
FIXED_ENTROPY = bytes.fromhex("01020304")
MANIFEST = "manifest.json"

SP_INITIAL = 65536
IO_BASE = 131072
MEMORY_PAGES = 3
STATIC_DATA = b"wssp corpus static data".ljust(64, b".")
CANARY_SLOT = 16

# (legacy guard slot, static data start) per layout
_GEOMETRY = {
    Layout.STACK_FIRST: (65536, 65552),
    Layout.NO_STACK_FIRST: (1024, 1040),
}

END = I("end")


@dataclass(frozen=True)
class GuestTemplate:
    name: str
    layout: Layout
    parameters: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)  # flavor -> mode -> category
    ground_truth: dict = field(default_factory=dict)
    stdout: Optional[str] = None  # checked on Silent runs
    timeout: float = 5.0

    def to_json(self):
        return {
            "name": self.name,
            "layout": self.layout.value,
            "parameters": dict(self.parameters),
            "expected": {f: dict(m) for f, m in self.expected.items()},
            "ground_truth": dict(self.ground_truth),
            "stdout": self.stdout,
            "timeout_ms": int(self.timeout * 1000),
            "file": self.name + ".wasm",
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            name=d["name"],
            layout=Layout(d["layout"]),
            parameters=dict(d.get("parameters", {})),
            expected={f: dict(m) for f, m in d["expected"].items()},
            ground_truth=dict(d.get("ground_truth", {})),
            stdout=d.get("stdout"),
            timeout=d.get("timeout_ms", 5000) / 1000.0,
        )


# ---------------------------------------------------------------------------
# assembly helpers


class _Builder:
    """Declare-then-define function assembler with a fixed guest skeleton."""

    def __init__(self, layout, name_stack_pointer=True):
        if layout not in _GEOMETRY:
            raise ValueError("guests need a StackFirst or NoStackFirst layout")
        self.layout = layout
        self.slot, self.data_lo = _GEOMETRY[layout]
        self.types = []
        self.imports = [Import("wasi_snapshot_preview1", "fd_write", "func",
                               self._type(("i32",) * 4, ("i32",)))]
        self.fd_write = 0
        self.decls = []  # (name, type_index)
        self.bodies = {}
        self.globals = [GlobalDef("i32", True, (I("i32.const", SP_INITIAL), END))]
        self.sp = 0
        self.global_names = {0: "__stack_pointer"} if name_stack_pointer else {}
        self.print = self.declare("print", ("i32", "i32"))
        self.print_u32 = self.declare("print_u32", ("i32",))
        self._define_printers()

    def _type(self, params, results=()):
        ft = FuncType(tuple(params), tuple(results))
        if ft not in self.types:
            self.types.append(ft)
        return self.types.index(ft)

    def declare(self, name, params=(), results=()):
        self.decls.append((name, self._type(params, results)))
        return len(self.imports) + len(self.decls) - 1

    def define(self, idx, instrs, locals=()):
        self.bodies[idx] = FuncBody(tuple(locals), tuple(instrs) + (END,))

    def add_global(self, value, name=None):
        self.globals.append(GlobalDef("i32", True, (I("i32.const", value), END)))
        idx = len(self.globals) - 1
        if name:
            self.global_names[idx] = name
        return idx

    # code snippets

    def prologue(self, size, tee=None):
        out = [I("global.get", self.sp), I("i32.const", size), I("i32.sub")]
        if tee is not None:
            out.append(I("local.tee", tee))
        return out + [I("global.set", self.sp)]

    def epilogue(self, size, base_local=None):
        base = I("global.get", self.sp) if base_local is None else I("local.get", base_local)
        return [base, I("i32.const", size), I("i32.add"), I("global.set", self.sp)]

    def text(self, s):
        """Write ``s`` into the IO page and print it."""
        data = s.encode()
        out = []
        for start in range(0, len(data), 48):
            chunk = data[start:start + 48]
            for i, b in enumerate(chunk):
                out += [I("i32.const", IO_BASE + 16 + i), I("i32.const", b), I("i32.store8", 0, 0)]
            out += [I("i32.const", IO_BASE + 16), I("i32.const", len(chunk)), I("call", self.print)]
        return out

    def _define_printers(self):
        io = IO_BASE
        self.define(self.print, [
            I("i32.const", io), I("local.get", 0), I("i32.store", 2, 0),
            I("i32.const", io), I("local.get", 1), I("i32.store", 2, 4),
            I("i32.const", 1), I("i32.const", io), I("i32.const", 1), I("i32.const", io + 8),
            I("call", self.fd_write), I("drop"),
        ])
        end = io + 80
        # param 0: n, local 1: cursor
        self.define(self.print_u32, [
            I("i32.const", end), I("local.set", 1),
            I("loop", BLOCK_EMPTY),
            I("local.get", 1), I("i32.const", 1), I("i32.sub"), I("local.set", 1),
            I("local.get", 1),
            I("local.get", 0), I("i32.const", 10), I("i32.rem_u"), I("i32.const", 48), I("i32.add"),
            I("i32.store8", 0, 0),
            I("local.get", 0), I("i32.const", 10), I("i32.div_u"), I("local.tee", 0),
            I("br_if", 0),
            END,
            I("local.get", 1), I("i32.const", end), I("local.get", 1), I("i32.sub"),
            I("call", self.print),
        ], locals=((1, "i32"),))

    def build(self, start_body, start_locals=()) -> WasmModule:
        start = self.declare("_start")
        self.define(start, start_body, start_locals)
        nimp = len(self.imports)
        missing = [n for i, (n, _) in enumerate(self.decls) if i + nimp not in self.bodies]
        if missing:
            raise ValueError("declared but undefined: %s" % missing)
        names = {0: "__imported_wasi_snapshot_preview1_fd_write"}
        names.update({i + nimp: n for i, (n, _) in enumerate(self.decls)})
        return WasmModule(
            types=tuple(self.types),
            imports=tuple(self.imports),
            functions=tuple(t for _, t in self.decls),
            memories=(Limits(MEMORY_PAGES),),
            globals=tuple(self.globals),
            exports=(Export("memory", "memory", 0), Export("_start", "func", start)),
            code=tuple(self.bodies[i + nimp] for i in range(len(self.decls))),
            data=(DataSegment(0, (I("i32.const", self.data_lo), END), STATIC_DATA),),
            names=NameSection(functions=names, globals=dict(self.global_names)),
        )

    def ground_truth(self, **extra):
        out = {
            "sp_global": self.sp,
            "sp_initial": SP_INITIAL,
            "guard_slot": self.slot,
            "data_range": [self.data_lo, self.data_lo + len(STATIC_DATA)],
        }
        out.update(extra)
        return out


def _frame_size(buffer):
    # buffer rounded to 16 plus a 16-byte spill area, as a compiler would lay it out
    return (buffer + 15) // 16 * 16 + 16


def _legacy_guard(slot, mode):
    if mode == "fixed":
        return int.from_bytes(FIXED_ENTROPY[:4], "little")
    return (slot * LEGACY_MULTIPLIER) % 2**32


def _hardened_guard(mode):
    return int.from_bytes(FIXED_ENTROPY[:4], "little") if mode == "fixed" else None


def _replay_check(write_lo, write_hi, byte_at, canary_addr, guard_value, guard_addr=None):
    """Outcome of the epilogue check after bytes [write_lo, write_hi) were stored."""
    ref = guard_value.to_bytes(4, "little")

    def word(addr):
        return bytes(byte_at(a) if write_lo <= a < write_hi else ref[a - addr]
                     for a in range(addr, addr + 4))

    canary = word(canary_addr)
    guard = word(guard_addr) if guard_addr is not None else ref
    return Category.SSP_FAULT if canary != guard else Category.SILENT


def _attack_expectations(frame, slot, write_span, byte_at):
    """Expected category per flavor/mode for a single-frame overflow from ``_start``.

    ``write_span(base)`` gives the [lo, hi) range written for a frame base.
    """
    expected = {"none": {"fixed": Category.SILENT.value, "fail": Category.SILENT.value}}
    base = SP_INITIAL - frame - CANARY_SLOT
    lo, hi = write_span(base)
    for flavor in ("legacy", "hardened"):
        cells = {}
        for mode in MODES:
            if flavor == "hardened":
                g = _hardened_guard(mode)
                cat = (Category.STARTUP_ABORT if g is None
                       else _replay_check(lo, hi, byte_at, base + frame, g))
            else:
                cat = _replay_check(lo, hi, byte_at, base + frame, _legacy_guard(slot, mode), slot)
            cells[mode] = cat.value
        expected[flavor] = cells
    return expected


def _uniform_expectations(category=Category.SILENT):
    """Same outcome everywhere except the hardened preamble abort."""
    out = {"none": {"fixed": category.value, "fail": category.value}}
    out["legacy"] = {m: category.value for m in MODES}
    out["hardened"] = {"fixed": category.value, "fail": Category.STARTUP_ABORT.value,
                       "inject": Category.STARTUP_ABORT.value}
    return out


# ---------------------------------------------------------------------------
# attack guests


def gen_guest_A(buffer: int = 16, overflow_len: int = 0, layout=Layout.STACK_FIRST):
    """Byte-wise ascending overflow of ``overflow_len`` bytes from a stack buffer."""
    if buffer < 1:
        raise ValueError("buffer size must be >= 1")
    if overflow_len < 0:
        raise ValueError("overflow_len must be >= 0")
    layout = Layout(layout)
    b = _Builder(layout)
    frame = _frame_size(buffer)
    vuln = b.declare("vuln")
    t, i = 0, 1
    b.define(vuln, b.prologue(frame, tee=t) + [
        I("i32.const", 0), I("local.set", i),
        I("block", BLOCK_EMPTY), I("loop", BLOCK_EMPTY),
        I("local.get", i), I("i32.const", overflow_len), I("i32.ge_u"), I("br_if", 1),
        I("local.get", t), I("local.get", i), I("i32.add"), I("i32.const", 0x41),
        I("i32.store8", 0, 0),
        I("local.get", i), I("i32.const", 1), I("i32.add"), I("local.set", i),
        I("br", 0),
        END, END,
    ] + b.epilogue(frame, t), locals=((2, "i32"),))
    marker = "guest A done\n"
    m = b.build([I("call", vuln)] + b.text(marker))
    name = "guest_a_%s_b%d_len%d" % (_layout_tag(layout), buffer, overflow_len)
    tpl = GuestTemplate(
        name=name,
        layout=layout,
        parameters={"buffer": buffer, "overflow_len": overflow_len, "frame_size": frame},
        expected=_attack_expectations(
            frame, b.slot, lambda base: (base, base + overflow_len), lambda a: 0x41),
        ground_truth=b.ground_truth(frame_sizes={"vuln": frame}, epilogues={"vuln": 1}),
        stdout=marker,
    )
    return m, tpl


def gen_guest_B_bypass(attack_value: int = 0x41414141, layout=Layout.STACK_FIRST,
                       buffer: int = 16):
    """Word-wise ascending overwrite of the canary and, when reachable, the legacy guard.

    Stack-first: the write runs up to and including the legacy guard slot.
    No-stack-first: the slot sits below the stack, so the write stops at the
    stack top, which is as far as a contiguous overflow gets there.
    """
    layout = Layout(layout)
    av = attack_value & 0xFFFFFFFF
    b = _Builder(layout)
    frame = _frame_size(buffer)
    stop = b.slot + 4 if layout is Layout.STACK_FIRST else SP_INITIAL
    vuln = b.declare("vuln")
    t, p = 0, 1
    b.define(vuln, b.prologue(frame, tee=t) + [
        I("local.get", t), I("local.set", p),
        I("block", BLOCK_EMPTY), I("loop", BLOCK_EMPTY),
        I("local.get", p), I("i32.const", stop), I("i32.ge_u"), I("br_if", 1),
        I("local.get", p), I("i32.const", av), I("i32.store", 2, 0),
        I("local.get", p), I("i32.const", 4), I("i32.add"), I("local.set", p),
        I("br", 0),
        END, END,
    ] + b.epilogue(frame, t), locals=((2, "i32"),))
    marker = "guest B done\n"
    m = b.build([I("call", vuln)] + b.text(marker))
    av_bytes = av.to_bytes(4, "little")
    tpl = GuestTemplate(
        name="guest_b_%s_%08x" % (_layout_tag(layout), av),
        layout=layout,
        parameters={"buffer": buffer, "attack_value": av, "frame_size": frame, "write_end": stop},
        # frame bases are 16-aligned, so the byte at a is av_bytes[a % 4]
        expected=_attack_expectations(
            frame, b.slot, lambda base: (base, max(base, stop)), lambda a: av_bytes[a % 4]),
        ground_truth=b.ground_truth(frame_sizes={"vuln": frame}, epilogues={"vuln": 1}),
        stdout=marker,
    )
    return m, tpl


def _layout_tag(layout):
    return "sf" if layout is Layout.STACK_FIRST else "nsf"


# ---------------------------------------------------------------------------
# benign suite


def _benign(name, layout, builder, start, stdout, start_locals=(), **truth):
    m = builder.build(start, start_locals)
    return m, GuestTemplate(
        name="%s_%s" % (name, _layout_tag(layout)), layout=layout, parameters={}, expected=_uniform_expectations(),
        ground_truth=builder.ground_truth(**truth), stdout=stdout)


def _g_frame0(layout):
    b = _Builder(layout)
    answer = b.declare("answer", (), ("i32",))
    b.define(answer, [I("i32.const", 7), I("i32.const", 6), I("i32.mul")])
    start = b.text("frame0: ") + [I("call", answer), I("call", b.print_u32)] + b.text("\n")
    return _benign("benign_frame0", layout, b, start, "frame0: 42\n",
                   frame_sizes={"answer": 0}, epilogues={})


def _g_frame4(layout):
    b = _Builder(layout)
    inc = b.declare("inc", ("i32",), ("i32",))
    r = 1
    # get/sub/set prologue, no frame-base local
    b.define(inc, b.prologue(4) + [
        I("global.get", b.sp), I("local.get", 0), I("i32.store", 2, 0),
        I("global.get", b.sp), I("i32.load", 2, 0), I("i32.const", 1), I("i32.add"),
        I("local.set", r),
    ] + b.epilogue(4) + [I("local.get", r)], locals=((1, "i32"),))
    start = b.text("frame4: ") + [I("i32.const", 41), I("call", inc), I("call", b.print_u32)] + b.text("\n")
    return _benign("benign_frame4", layout, b, start, "frame4: 42\n",
                   frame_sizes={"inc": 4}, epilogues={"inc": 1})


def _g_frame16(layout):
    # stack pointer left unnamed, plus a decoy mutable global
    b = _Builder(layout, name_stack_pointer=False)
    heap_end = b.add_global(IO_BASE + 1024)
    sum4 = b.declare("sum4", (), ("i32",))
    t, r = 0, 1
    body = b.prologue(16, tee=t)
    for k in range(4):
        body += [I("local.get", t), I("i32.const", k + 1), I("i32.store", 2, 4 * k)]
    body += [I("local.get", t), I("i32.load", 2, 0)]
    for k in range(1, 4):
        body += [I("local.get", t), I("i32.load", 2, 4 * k), I("i32.add")]
    body += [I("local.set", r)] + b.epilogue(16, t) + [I("local.get", r)]
    b.define(sum4, body, locals=((2, "i32"),))
    start = [
        I("global.get", heap_end), I("i32.const", 16), I("i32.add"), I("global.set", heap_end),
    ] + b.text("frame16: ") + [I("call", sum4), I("call", b.print_u32)] + b.text("\n")
    return _benign("benign_frame16", layout, b, start, "frame16: 10\n",
                   frame_sizes={"sum4": 16}, epilogues={"sum4": 1}, sp_named=False)


def _g_frame256(layout):
    b = _Builder(layout)
    fill = b.declare("fill_sum", (), ("i32",))
    t, i, acc = 0, 1, 2

    def loop(step):
        return [
            I("i32.const", 0), I("local.set", i),
            I("block", BLOCK_EMPTY), I("loop", BLOCK_EMPTY),
            I("local.get", i), I("i32.const", 256), I("i32.ge_u"), I("br_if", 1),
        ] + step + [
            I("local.get", i), I("i32.const", 1), I("i32.add"), I("local.set", i),
            I("br", 0), END, END,
        ]

    body = b.prologue(256, tee=t)
    body += loop([I("local.get", t), I("local.get", i), I("i32.add"), I("local.get", i),
                  I("i32.store8", 0, 0)])
    body += [I("i32.const", 0), I("local.set", acc)]
    body += loop([I("local.get", acc), I("local.get", t), I("local.get", i), I("i32.add"),
                  I("i32.load8_u", 0, 0), I("i32.add"), I("local.set", acc)])
    body += b.epilogue(256, t) + [I("local.get", acc)]
    b.define(fill, body, locals=((3, "i32"),))
    start = b.text("frame256: ") + [I("call", fill), I("call", b.print_u32)] + b.text("\n")
    return _benign("benign_frame256", layout, b, start, "frame256: %d\n" % sum(range(256)),
                   frame_sizes={"fill_sum": 256}, epilogues={"fill_sum": 1})


def _factorial(n):
    out = 1
    for k in range(2, n + 1):
        out *= k
    return out


def _g_factorial(layout, n=10):
    b = _Builder(layout)
    fact = b.declare("fact", ("i32",), ("i32",))
    t, r = 1, 2
    b.define(fact, b.prologue(16, tee=t) + [
        I("local.get", t), I("local.get", 0), I("i32.store", 2, 0),
        I("local.get", 0), I("i32.const", 1), I("i32.le_u"),
        I("if", -1),  # result i32
        I("i32.const", 1),
        I("else"),
        I("local.get", t), I("i32.load", 2, 0),
        I("local.get", t), I("i32.load", 2, 0), I("i32.const", 1), I("i32.sub"),
        I("call", fact),
        I("i32.mul"),
        END,
        I("local.set", r),
    ] + b.epilogue(16, t) + [I("local.get", r)], locals=((2, "i32"),))
    start = b.text("factorial(%d) = " % n) + [
        I("i32.const", n), I("call", fact), I("call", b.print_u32)] + b.text("\n")
    return _benign("benign_factorial", layout, b, start,
                   "factorial(%d) = %d\n" % (n, _factorial(n) % 2**32),
                   frame_sizes={"fact": 16}, epilogues={"fact": 1})


def _g_early_return(layout):
    b = _Builder(layout)
    big = b.declare("is_big", ("i32",), ("i32",))
    t = 1
    b.define(big, b.prologue(16, tee=t) + [
        I("local.get", t), I("local.get", 0), I("i32.store", 2, 0),
        I("local.get", t), I("i32.load", 2, 0), I("i32.const", 10), I("i32.gt_u"),
        I("if", BLOCK_EMPTY),
    ] + b.epilogue(16, t) + [
        I("i32.const", 1), I("return"),
        END,
    ] + b.epilogue(16, t) + [I("i32.const", 0)], locals=((1, "i32"),))
    start = (b.text("early: ") + [I("i32.const", 5), I("call", big), I("call", b.print_u32)]
             + b.text(" ") + [I("i32.const", 20), I("call", big), I("call", b.print_u32)]
             + b.text("\n"))
    return _benign("benign_early_return", layout, b, start, "early: 0 1\n",
                   frame_sizes={"is_big": 16}, epilogues={"is_big": 2})


def _g_strings(layout):
    b = _Builder(layout)
    greet = b.declare("greet")
    t = 0
    words = [(0, "wasm "), (8, "stack "), (16, "canary\n")]
    body = b.prologue(32, tee=t)
    for off, w in words:
        for k, ch in enumerate(w.encode()):
            body += [I("local.get", t), I("i32.const", ch), I("i32.store8", 0, off + k)]
    # three iovecs pointing into the frame
    for n, (off, w) in enumerate(words):
        body += [I("i32.const", IO_BASE + 8 * n), I("local.get", t), I("i32.const", off), I("i32.add"),
                 I("i32.store", 2, 0),
                 I("i32.const", IO_BASE + 8 * n + 4), I("i32.const", len(w)), I("i32.store", 2, 0)]
    body += [I("i32.const", 1), I("i32.const", IO_BASE), I("i32.const", len(words)),
             I("i32.const", IO_BASE + 32), I("call", b.fd_write), I("drop")]
    body += b.epilogue(32, t)
    b.define(greet, body, locals=((1, "i32"),))
    start = [I("call", greet), I("call", greet)]
    return _benign("benign_strings", layout, b, start, "wasm stack canary\n" * 2,
                   frame_sizes={"greet": 32}, epilogues={"greet": 1})


def gen_benign_suite(layout=Layout.NO_STACK_FIRST):
    """Benign guests; every flavor must print the same bytes and exit 0."""
    layout = Layout(layout)
    return [g(layout) for g in (_g_frame0, _g_frame4, _g_frame16, _g_frame256,
                                _g_factorial, _g_early_return, _g_strings)]


# ---------------------------------------------------------------------------
# negative controls


def gen_heap_overflow(layout=Layout.NO_STACK_FIRST):
    """Overflow of a buffer outside the stack; no flavor notices it."""
    b = _Builder(layout)
    heap_buf = IO_BASE + 256
    smash = b.declare("heap_smash")
    t, i = 0, 1
    b.define(smash, b.prologue(32, tee=t) + [
        I("i32.const", 0), I("local.set", i),
        I("block", BLOCK_EMPTY), I("loop", BLOCK_EMPTY),
        I("local.get", i), I("i32.const", 64), I("i32.ge_u"), I("br_if", 1),
        I("i32.const", heap_buf), I("local.get", i), I("i32.add"), I("i32.const", 0x42),
        I("i32.store8", 0, 0),
        I("local.get", i), I("i32.const", 1), I("i32.add"), I("local.set", i),
        I("br", 0), END, END,
    ] + b.epilogue(32, t), locals=((2, "i32"),))
    marker = "heap overflow done\n"
    m = b.build([I("call", smash)] + b.text(marker))
    return m, GuestTemplate(
        "control_heap_overflow", layout, {"buffer": 16, "overflow_len": 64},
        _uniform_expectations(), b.ground_truth(frame_sizes={"heap_smash": 32}, epilogues={"heap_smash": 1}), marker)


def gen_oob(layout=Layout.NO_STACK_FIRST):
    b = _Builder(layout)
    m = b.build([I("i32.const", -16), I("i32.load", 2, 0), I("drop")])
    return m, GuestTemplate(
        "control_oob", layout, {}, _uniform_expectations(Category.MEMORY_FAULT),
        b.ground_truth(frame_sizes={}, epilogues={}))


def gen_spin(layout=Layout.NO_STACK_FIRST, timeout=0.3):
    b = _Builder(layout)
    m = b.build([I("loop", BLOCK_EMPTY), I("br", 0), END])
    return m, GuestTemplate(
        "control_spin", layout, {}, _uniform_expectations(Category.TIMEOUT),
        b.ground_truth(frame_sizes={}, epilogues={}), timeout=timeout)


def gen_layout_fixture(layout) -> WasmModule:
    """Minimal module arranged per ``layout``; ``Unknown`` has no stack pointer."""
    layout = Layout(layout)
    if layout is Layout.UNKNOWN:
        return WasmModule(
            memories=(Limits(1),),
            data=(DataSegment(0, (I("i32.const", 1024), END), STATIC_DATA),),
        )
    b = _Builder(layout)
    f = b.declare("framed")
    b.define(f, b.prologue(32) + b.epilogue(32))
    return b.build([I("call", f)])


def generate_corpus():
    """The full evaluation corpus as ``[(WasmModule, GuestTemplate)]``."""
    out = []
    for layout in (Layout.STACK_FIRST, Layout.NO_STACK_FIRST):
        for length in (0, 16, 32, 33, 36, 48, 64):
            out.append(gen_guest_A(16, length, layout))
        out.append(gen_guest_B_bypass(0x41414141, layout))
        out.extend(gen_benign_suite(layout))
    out += [gen_heap_overflow(), gen_oob(), gen_spin()]
    return out


# ---------------------------------------------------------------------------
# builds, manifest and evaluation


def flavor_config(tpl: GuestTemplate, debug_export=False) -> SspConfig:
    return SspConfig(legacy_guard_address=tpl.ground_truth.get("guard_slot"),
                     debug_export=debug_export)


def build_flavor(m: WasmModule, tpl: GuestTemplate, flavor: str, debug_export=False) -> WasmModule:
    if flavor == "none":
        return m
    cfg = flavor_config(tpl, debug_export)
    if flavor == "hardened":
        return instrument(m, cfg)[0]
    if flavor == "legacy":
        return legacy_instrument(m, cfg)[0]
    raise ValueError("unknown flavor %r" % flavor)


def mode_build(m: WasmModule, mode: str):
    """Return ``(module, RandomSource)`` for a random mode."""
    if mode == "fixed":
        return m, RandomSource.fixed(FIXED_ENTROPY)
    if mode == "fail":
        return m, RandomSource.fail()
    if mode == "inject":
        return inject_fault_random(m), RandomSource.fixed(FIXED_ENTROPY)
    raise ValueError("unknown random mode %r" % mode)


def write_corpus(directory, entries=None):
    """Emit ``<name>.wasm`` files plus the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = generate_corpus() if entries is None else entries
    for m, tpl in entries:
        (directory / (tpl.name + ".wasm")).write_bytes(encode(m))
    manifest = {"version": 1, "entropy": FIXED_ENTROPY.hex().upper(),
                "guests": [tpl.to_json() for _, tpl in entries]}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(directory):
    """Read a corpus directory; an empty or manifest-less directory yields []."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        return []
    manifest = json.loads(path.read_text())
    out = []
    for d in manifest.get("guests", []):
        tpl = GuestTemplate.from_json(d)
        out.append((decode((directory / d.get("file", tpl.name + ".wasm")).read_bytes()), tpl))
    return out


def matrix_entries(entries):
    """One :class:`MatrixEntry` per (guest, flavor, mode) cell of the expected tables."""
    out = []
    for m, tpl in entries:
        for flavor, modes in tpl.expected.items():
            built = build_flavor(m, tpl, flavor)
            for mode in modes:
                mm, src = mode_build(built, mode)
                spec = RunSpec(encode(mm), random=src, timeout=tpl.timeout)
                out.append(MatrixEntry("%s/%s" % (tpl.name, mode), spec, flavor, mode))
    return out


def evaluate(entries, jobs=1):
    """Run the full matrix and attach every deviation from the expected tables."""
    cells = matrix_entries(entries)
    report = harness.run_matrix(cells, jobs=jobs)
    tpls = {tpl.name: tpl for _, tpl in entries}
    for rec in report.runs:
        tpl = tpls[rec.name.rsplit("/", 1)[0]]
        want = tpl.expected[rec.flavor][rec.mode]
        got = rec.category
        if got != want:
            report.mismatches.append(
                "%s [%s/%s]: expected %s, got %s%s" % (
                    tpl.name, rec.flavor, rec.mode, want, got,
                    " (%s)" % rec.error if rec.error else ""))
        elif (got == Category.SILENT.value and tpl.stdout is not None
              and rec.outcome.stdout.decode("utf-8", "replace") != tpl.stdout):
            report.mismatches.append(
                "%s [%s/%s]: stdout %r, expected %r" % (
                    tpl.name, rec.flavor, rec.mode, rec.outcome.stdout.decode("utf-8", "replace"),
                    tpl.stdout))
    return report
