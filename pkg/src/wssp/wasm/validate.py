"""Structural validation: index ranges, global typing and block nesting.

Operand-stack type checking is left to the execution engine.
"""

from __future__ import annotations

from dataclasses import dataclass

from .module import PAGE_SIZE, WasmModule
from .opcodes import LOADS, STORES


@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    detail: str

    def __str__(self):
        return "%s at %s: %s" % (self.kind, self.where, self.detail)


_CONST_TYPES = {"i32.const": "i32", "i64.const": "i64", "f32.const": "f32", "f64.const": "f64"}


def validate(m: WasmModule) -> list:
    out = []

    def bad(kind, where, detail):
        out.append(Violation(kind, where, detail))

    ntypes = len(m.types)
    nfuncs = m.num_funcs
    nglobals = m.num_globals
    ntables = len(m.tables) + len(m.imports_of("table"))
    nmems = len(m.memories) + len(m.imports_of("memory"))

    for i, imp in enumerate(m.imports):
        if imp.kind == "func" and not 0 <= imp.desc < ntypes:
            bad("OutOfRangeIndex", "import %d" % i, "type %d of %d" % (imp.desc, ntypes))
    for i, t in enumerate(m.functions):
        if not 0 <= t < ntypes:
            bad("OutOfRangeIndex", "function %d" % i, "type %d of %d" % (t, ntypes))
    if len(m.code) != len(m.functions):
        bad("CountMismatch", "code", "%d bodies for %d functions" % (len(m.code), len(m.functions)))
    if nmems > 1:
        bad("MultipleMemories", "memory", "%d memories" % nmems)

    def check_const_expr(expr, valtype, where):
        if not expr or expr[-1].op != "end":
            bad("UnbalancedNesting", where, "constant expression lacks end")
            return
        if len(expr) != 2:
            bad("NonConstantExpr", where, "expected a single constant instruction")
            return
        ins = expr[0]
        if ins.op in _CONST_TYPES:
            if _CONST_TYPES[ins.op] != valtype:
                bad("TypeMismatch", where, "%s initialiser for %s" % (ins.op, valtype))
        elif ins.op == "global.get":
            g = ins.args[0]
            if not 0 <= g < m.num_imported_globals:
                bad("OutOfRangeIndex", where, "global.get %d must name an imported global" % g)
            elif m.global_type(g).valtype != valtype:
                bad("TypeMismatch", where, "global %d is not %s" % (g, valtype))
        else:
            bad("NonConstantExpr", where, "instruction %s" % ins.op)

    for i, g in enumerate(m.globals):
        check_const_expr(g.init, g.valtype, "global %d" % (i + m.num_imported_globals))

    kinds = {"func": nfuncs, "table": ntables, "memory": nmems, "global": nglobals}
    seen = set()
    for e in m.exports:
        if e.name in seen:
            bad("DuplicateExport", "export %r" % e.name, "name exported twice")
        seen.add(e.name)
        if not 0 <= e.index < kinds[e.kind]:
            bad("OutOfRangeIndex", "export %r" % e.name, "%s %d" % (e.kind, e.index))
    if m.start is not None:
        if not 0 <= m.start < nfuncs:
            bad("OutOfRangeIndex", "start", "function %d of %d" % (m.start, nfuncs))
        elif m.func_type(m.start).params or m.func_type(m.start).results:
            bad("TypeMismatch", "start", "start function must be [] -> []")

    for i, seg in enumerate(m.elements):
        where = "element %d" % i
        if not 0 <= seg.table < ntables:
            bad("OutOfRangeIndex", where, "table %d" % seg.table)
        check_const_expr(seg.offset, "i32", where)
        for f in seg.funcs:
            if not 0 <= f < nfuncs:
                bad("OutOfRangeIndex", where, "function %d of %d" % (f, nfuncs))

    min_bytes = None
    if m.memories:
        min_bytes = m.memories[0].min * PAGE_SIZE
    elif m.imports_of("memory"):
        min_bytes = m.imports_of("memory")[0].desc.min * PAGE_SIZE
    for i, seg in enumerate(m.data):
        where = "data %d" % i
        if nmems == 0:
            bad("OutOfRangeIndex", where, "no memory")
        if seg.offset is None:
            continue
        check_const_expr(seg.offset, "i32", where)
        off = seg.const_offset
        if off is not None and min_bytes is not None and off + len(seg.data) > min_bytes:
            bad("DataOutOfBounds", where, "[%d, %d) exceeds %d bytes" % (off, off + len(seg.data), min_bytes))

    for fi, body in zip(m.defined_func_indices(), m.code):
        if 0 <= m.functions[fi - m.num_imported_funcs] < ntypes:
            _validate_body(m, fi, body, bad, nfuncs, nglobals, ntypes, ntables, nmems)
    return out


def _validate_body(m, fi, body, bad, nfuncs, nglobals, ntypes, ntables, nmems):
    where = "function %d" % fi
    nlocals = len(body.local_types(m.func_type(fi).params))
    depth = 0
    closed = False
    kinds = ["func"]
    instrs = body.instrs
    if not instrs or instrs[-1].op != "end":
        bad("UnbalancedNesting", where, "body does not end with end")
    for pc, ins in enumerate(instrs):
        at = "%s instr %d" % (where, pc)
        op, a = ins.op, ins.args
        if op in ("block", "loop", "if"):
            depth += 1
            kinds.append(op)
            if a[0] >= 0 and a[0] >= ntypes:
                bad("OutOfRangeIndex", at, "block type %d" % a[0])
        elif op == "else":
            if kinds[-1] != "if":
                bad("UnbalancedNesting", at, "else without if")
            else:
                kinds[-1] = "else"
        elif op == "end":
            if depth == 0:
                closed = True
                if pc != len(instrs) - 1:
                    bad("UnbalancedNesting", at, "instructions after final end")
                    return
            else:
                depth -= 1
                kinds.pop()
        elif op in ("br", "br_if"):
            if a[0] > depth:
                bad("OutOfRangeIndex", at, "label %d at depth %d" % (a[0], depth))
        elif op == "br_table":
            if any(lbl > depth for lbl in a[0]) or a[1] > depth:
                bad("OutOfRangeIndex", at, "br_table label beyond depth %d" % depth)
        elif op in ("call", "ref.func"):
            if not 0 <= a[0] < nfuncs:
                bad("OutOfRangeIndex", at, "function %d of %d" % (a[0], nfuncs))
        elif op == "call_indirect":
            if not 0 <= a[0] < ntypes:
                bad("OutOfRangeIndex", at, "type %d" % a[0])
            if not 0 <= a[1] < ntables:
                bad("OutOfRangeIndex", at, "table %d" % a[1])
        elif op in ("local.get", "local.set", "local.tee"):
            if not 0 <= a[0] < nlocals:
                bad("OutOfRangeIndex", at, "local %d of %d" % (a[0], nlocals))
        elif op in ("global.get", "global.set"):
            if not 0 <= a[0] < nglobals:
                bad("OutOfRangeIndex", at, "global %d of %d" % (a[0], nglobals))
            elif op == "global.set" and not m.global_type(a[0]).mutable:
                bad("ImmutableGlobalSet", at, "global %d is immutable" % a[0])
        elif op in LOADS or op in STORES or op in ("memory.size", "memory.grow"):
            if nmems == 0:
                bad("OutOfRangeIndex", at, "memory access without memory")
    if depth != 0 or (instrs and not closed):
        bad("UnbalancedNesting", where, "%d unclosed block(s)" % (depth + 1))
