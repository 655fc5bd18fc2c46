"""Binary decoding and encoding of WebAssembly modules."""

from __future__ import annotations

from . import leb128
from .module import (
    VALTYPE_CODES,
    VALTYPES,
    CustomSection,
    DataSegment,
    ElementSegment,
    Export,
    FuncBody,
    FuncType,
    GlobalDef,
    GlobalType,
    Import,
    Instr,
    Limits,
    NameSection,
    TableType,
    WasmModule,
)
from .opcodes import BY_CODE, BY_NAME, FC_OPS, OPAQUE_OPS
from .validate import validate

MAGIC = b"\x00asm"
VERSION = b"\x01\x00\x00\x00"

# Canonical order of known sections; the data-count section sits before code.
SECTION_ORDER = (1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 10, 11)
_RANK = {sid: i for i, sid in enumerate(SECTION_ORDER)}

KIND_CODES = {0: "func", 1: "table", 2: "memory", 3: "global"}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

U32_MAX = 0xFFFFFFFF


class MalformedModule(ValueError):
    def __init__(self, offset, reason):
        super().__init__("malformed module at offset %d: %s" % (offset, reason))
        self.offset = offset
        self.reason = reason


class EncodeOverflow(ValueError):
    pass


# ---------------------------------------------------------------------------
# decoding


class _Reader:
    def __init__(self, data, pos=0, end=None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def fail(self, reason, offset=None):
        raise MalformedModule(self.pos if offset is None else offset, reason)

    def byte(self):
        if self.pos >= self.end:
            self.fail("unexpected end of data")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def bytes(self, n):
        if self.pos + n > self.end:
            self.fail("unexpected end of data")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def _leb(self, fn, bits):
        start = self.pos
        try:
            value, pos = fn(self.data[:self.end], self.pos, bits)
        except leb128.LEBError as exc:
            self.fail(str(exc), start)
        self.pos = pos
        return value

    def u32(self):
        return self._leb(leb128.decode_unsigned, 32)

    def s32(self):
        return self._leb(leb128.decode_signed, 32)

    def s33(self):
        return self._leb(leb128.decode_signed, 33)

    def s64(self):
        return self._leb(leb128.decode_signed, 64)

    def name(self):
        n = self.u32()
        start = self.pos
        raw = self.bytes(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail("invalid UTF-8 name", start)

    def valtype(self):
        start = self.pos
        b = self.byte()
        if b not in VALTYPES:
            self.fail("bad value type 0x%02x" % b, start)
        return VALTYPES[b]

    def vec(self, fn):
        return tuple(fn() for _ in range(self.u32()))

    def limits(self):
        flag = self.byte()
        if flag == 0:
            return Limits(self.u32())
        if flag == 1:
            return Limits(self.u32(), self.u32())
        self.fail("unsupported limits flag 0x%02x" % flag, self.pos - 1)


def _read_instr(r: _Reader) -> Instr:
    start = r.pos
    code = r.byte()
    if code in BY_CODE:
        op, kind = BY_CODE[code]
        if kind == "none":
            return Instr(op)
        if kind == "block":
            return Instr(op, (r.s33(),))
        if kind in ("label", "func", "local", "global"):
            return Instr(op, (r.u32(),))
        if kind == "br_table":
            labels = r.vec(r.u32)
            return Instr(op, (labels, r.u32()))
        if kind == "call_ind":
            return Instr(op, (r.u32(), r.u32()))
        if kind == "memarg":
            align = r.u32()
            if align & 0x40:
                r.fail("multi-memory memarg unsupported", start)
            return Instr(op, (align, r.u32()))
        if kind == "mem":
            if r.byte() != 0:
                r.fail("multi-memory unsupported", start)
            return Instr(op)
        if kind == "i32":
            return Instr(op, (r.s32(),))
        if kind == "i64":
            return Instr(op, (r.s64(),))
        if kind == "f32":
            r.bytes(4)
            return Instr(op, raw=bytes(r.data[start:r.pos]))
        if kind == "f64":
            r.bytes(8)
            return Instr(op, raw=bytes(r.data[start:r.pos]))
    if code in OPAQUE_OPS:
        op, shape = OPAQUE_OPS[code]
        _skip_immediates(r, shape)
        return Instr(op, raw=bytes(r.data[start:r.pos]))
    if code == 0xFC:
        sub = r.u32()
        if sub not in FC_OPS:
            r.fail("unknown 0xfc sub-opcode %d" % sub, start)
        op, shape = FC_OPS[sub]
        _skip_immediates(r, shape)
        return Instr(op, raw=bytes(r.data[start:r.pos]))
    r.fail("unsupported opcode 0x%02x" % code, start)


def _skip_immediates(r, shape):
    for kind in shape:
        if kind == "u32":
            r.u32()
        elif kind == "byte":
            r.byte()
        elif kind == "valtypes":
            r.vec(r.valtype)


def _read_expr(r: _Reader, end=None):
    """Read a well-nested instruction sequence up to its closing ``end``."""
    instrs = []
    depth = 0
    while True:
        if end is not None and r.pos >= end:
            r.fail("unbalanced nesting: missing end")
        ins = _read_instr(r)
        instrs.append(ins)
        if ins.op in ("block", "loop", "if"):
            depth += 1
        elif ins.op == "else":
            if depth == 0:
                r.fail("else outside if", r.pos - 1)
        elif ins.op == "end":
            if depth == 0:
                return tuple(instrs)
            depth -= 1


def _read_body(r: _Reader):
    size = r.u32()
    end = r.pos + size
    if end > r.end:
        r.fail("function body exceeds section")
    sub = _Reader(r.data, r.pos, end)
    runs = sub.vec(lambda: (sub.u32(), sub.valtype()))
    if sum(c for c, _ in runs) > U32_MAX:
        sub.fail("too many locals")
    instrs = _read_expr(sub, end)
    if sub.pos != end:
        sub.fail("trailing bytes after function end")
    r.pos = end
    return FuncBody(runs, instrs)


def _read_import(r):
    module = r.name()
    name = r.name()
    start = r.pos
    kind = KIND_CODES.get(r.byte())
    if kind is None:
        r.fail("bad import kind", start)
    if kind == "func":
        desc = r.u32()
    elif kind == "table":
        elem = r.valtype()
        desc = TableType(elem, r.limits())
    elif kind == "memory":
        desc = r.limits()
    else:
        vt = r.valtype()
        desc = GlobalType(vt, _mut(r))
    return Import(module, name, kind, desc)


def _mut(r):
    start = r.pos
    m = r.byte()
    if m not in (0, 1):
        r.fail("bad mutability flag", start)
    return bool(m)


def _read_element(r):
    start = r.pos
    flag = r.u32()
    if flag == 0:
        offset = _read_expr(r)
        return ElementSegment(0, offset, r.vec(r.u32))
    if flag == 2:
        table = r.u32()
        offset = _read_expr(r)
        if r.byte() != 0:
            r.fail("unsupported element kind", r.pos - 1)
        return ElementSegment(table, offset, r.vec(r.u32))
    r.fail("unsupported element segment form %d" % flag, start)


def _read_data(r):
    start = r.pos
    flag = r.u32()
    if flag == 0:
        offset = _read_expr(r)
        return DataSegment(0, offset, r.bytes(r.u32()))
    if flag == 1:
        return DataSegment(0, None, r.bytes(r.u32()))
    if flag == 2:
        mem = r.u32()
        if mem != 0:
            r.fail("multi-memory data segment unsupported", start)
        offset = _read_expr(r)
        return DataSegment(mem, offset, r.bytes(r.u32()))
    r.fail("bad data segment flag %d" % flag, start)


def _parse_name_section(data, after):
    r = _Reader(data)
    module = None
    functions, local_names, global_names = {}, {}, {}
    extra = []

    def namemap(sub):
        return {idx: nm for idx, nm in sub.vec(lambda: (sub.u32(), sub.name()))}

    while r.pos < r.end:
        sid = r.byte()
        size = r.u32()
        end = r.pos + size
        if end > r.end:
            r.fail("name subsection exceeds section")
        sub = _Reader(data, r.pos, end)
        if sid == 0:
            module = sub.name()
        elif sid == 1:
            functions = namemap(sub)
        elif sid == 2:
            local_names = {f: m for f, m in sub.vec(lambda: (sub.u32(), namemap(sub)))}
        elif sid == 7:
            global_names = namemap(sub)
        else:
            extra.append((sid, bytes(data[r.pos:end])))
            sub.pos = end
        if sub.pos != end:
            sub.fail("name subsection size mismatch")
        r.pos = end
    return NameSection(module, functions, local_names, global_names, tuple(extra), after)


def decode(data) -> WasmModule:
    """Decode a binary module.  Raises :class:`MalformedModule`."""
    data = bytes(data)
    if len(data) < 8 or data[:4] != MAGIC:
        raise MalformedModule(0, "bad magic")
    if data[4:8] != VERSION:
        raise MalformedModule(4, "unsupported version")
    r = _Reader(data, 8)
    fields = {}
    custom = []
    names = None
    last = 0
    seen = set()
    bodies = ()
    while r.pos < r.end:
        sec_start = r.pos
        sid = r.byte()
        size = r.u32()
        end = r.pos + size
        if end > r.end:
            r.fail("section exceeds module", sec_start)
        s = _Reader(data, r.pos, end)
        if sid == 0:
            name = s.name()
            payload = bytes(data[s.pos:end])
            parsed = None
            if name == "name" and names is None:
                try:
                    parsed = _parse_name_section(payload, last)
                except MalformedModule:
                    parsed = None
            if parsed is not None:
                names = parsed
            else:
                custom.append(CustomSection(name, payload, last))
            r.pos = end
            continue
        if sid not in _RANK:
            r.fail("unknown section id %d" % sid, sec_start)
        if sid in seen or (last and _RANK[sid] < _RANK[last]):
            r.fail("section %d out of order" % sid, sec_start)
        seen.add(sid)
        last = sid
        if sid == 1:
            def functype():
                start = s.pos
                if s.byte() != 0x60:
                    s.fail("bad function type form", start)
                return FuncType(s.vec(s.valtype), s.vec(s.valtype))
            fields["types"] = s.vec(functype)
        elif sid == 2:
            fields["imports"] = s.vec(lambda: _read_import(s))
        elif sid == 3:
            fields["functions"] = s.vec(s.u32)
        elif sid == 4:
            fields["tables"] = s.vec(lambda: TableType(s.valtype(), s.limits()))
        elif sid == 5:
            fields["memories"] = s.vec(s.limits)
        elif sid == 6:
            def globaldef():
                vt = s.valtype()
                mut = _mut(s)
                return GlobalDef(vt, mut, _read_expr(s))
            fields["globals"] = s.vec(globaldef)
        elif sid == 7:
            def export():
                name = s.name()
                start = s.pos
                kind = KIND_CODES.get(s.byte())
                if kind is None:
                    s.fail("bad export kind", start)
                return Export(name, kind, s.u32())
            fields["exports"] = s.vec(export)
        elif sid == 8:
            fields["start"] = s.u32()
        elif sid == 9:
            fields["elements"] = s.vec(lambda: _read_element(s))
        elif sid == 12:
            fields["data_count"] = s.u32()
        elif sid == 10:
            bodies = s.vec(lambda: _read_body(s))
            fields["code"] = bodies
        elif sid == 11:
            fields["data"] = s.vec(lambda: _read_data(s))
        if s.pos != end:
            s.fail("section %d size mismatch" % sid)
        r.pos = end
    nfuncs = len(fields.get("functions", ()))
    if len(bodies) != nfuncs:
        raise MalformedModule(r.pos, "function and code section lengths differ")
    nmem = len(fields.get("memories", ())) + sum(
        1 for imp in fields.get("imports", ()) if imp.kind == "memory")
    if nmem > 1:
        raise MalformedModule(r.pos, "multiple memories unsupported")
    m = WasmModule(names=names, custom=tuple(custom), **fields)
    _check_indices(m, r.pos)
    return m


def _check_indices(m, offset):
    for v in validate(m):
        if v.kind in ("OutOfRangeIndex", "UnbalancedNesting"):
            raise MalformedModule(offset, str(v))


# ---------------------------------------------------------------------------
# encoding


def _u32(value):
    if not 0 <= value <= U32_MAX:
        raise EncodeOverflow("value %r does not fit in u32" % (value,))
    return leb128.encode_unsigned(value)


def _name(s):
    raw = s.encode("utf-8")
    return _u32(len(raw)) + raw


def _vec(items, fn):
    out = bytearray(_u32(len(items)))
    for item in items:
        out += fn(item)
    return bytes(out)


def _limits(lim):
    if lim.max is None:
        return b"\x00" + _u32(lim.min)
    return b"\x01" + _u32(lim.min) + _u32(lim.max)


def encode_instr(ins: Instr) -> bytes:
    if ins.raw is not None:
        return ins.raw
    code, kind = BY_NAME[ins.op]
    head = bytes([code])
    a = ins.args
    if kind == "none":
        return head
    if kind == "block":
        return head + leb128.encode_signed(a[0])
    if kind in ("label", "func", "local", "global"):
        return head + _u32(a[0])
    if kind == "br_table":
        return head + _vec(a[0], _u32) + _u32(a[1])
    if kind == "call_ind":
        return head + _u32(a[0]) + _u32(a[1])
    if kind == "memarg":
        return head + _u32(a[0]) + _u32(a[1])
    if kind == "mem":
        return head + b"\x00"
    if kind == "i32":
        v = a[0]
        if v > 0x7FFFFFFF:
            v -= 1 << 32
        return head + leb128.encode_signed(v)
    if kind == "i64":
        v = a[0]
        if v > 0x7FFFFFFFFFFFFFFF:
            v -= 1 << 64
        return head + leb128.encode_signed(v)
    raise EncodeOverflow("instruction %r needs raw bytes" % (ins,))


def encode_expr(instrs) -> bytes:
    return b"".join(encode_instr(i) for i in instrs)


def _import(imp):
    out = _name(imp.module) + _name(imp.name) + bytes([KIND_NAMES[imp.kind]])
    if imp.kind == "func":
        return out + _u32(imp.desc)
    if imp.kind == "table":
        return out + bytes([VALTYPE_CODES[imp.desc.elem]]) + _limits(imp.desc.limits)
    if imp.kind == "memory":
        return out + _limits(imp.desc)
    return out + bytes([VALTYPE_CODES[imp.desc.valtype], int(imp.desc.mutable)])


def _functype(ft):
    valtypes = lambda vts: _vec(vts, lambda v: bytes([VALTYPE_CODES[v]]))
    return b"\x60" + valtypes(ft.params) + valtypes(ft.results)


def _element(seg):
    if seg.table == 0:
        return b"\x00" + encode_expr(seg.offset) + _vec(seg.funcs, _u32)
    return b"\x02" + _u32(seg.table) + encode_expr(seg.offset) + b"\x00" + _vec(seg.funcs, _u32)


def _body(body):
    locals_ = _vec(body.locals, lambda run: _u32(run[0]) + bytes([VALTYPE_CODES[run[1]]]))
    payload = locals_ + encode_expr(body.instrs)
    return _u32(len(payload)) + payload


def _data(seg):
    if seg.offset is None:
        return b"\x01" + _u32(len(seg.data)) + seg.data
    return b"\x00" + encode_expr(seg.offset) + _u32(len(seg.data)) + seg.data


def _namemap(mapping):
    return _vec(sorted(mapping.items()), lambda kv: _u32(kv[0]) + _name(kv[1]))


def encode_name_section(ns: NameSection) -> bytes:
    subs = []
    if ns.module is not None:
        subs.append((0, _name(ns.module)))
    if ns.functions:
        subs.append((1, _namemap(ns.functions)))
    if ns.locals:
        subs.append((2, _vec(sorted(ns.locals.items()), lambda kv: _u32(kv[0]) + _namemap(kv[1]))))
    if ns.globals:
        subs.append((7, _namemap(ns.globals)))
    subs.extend(ns.extra)
    subs.sort(key=lambda s: s[0])
    return b"".join(bytes([sid]) + _u32(len(p)) + p for sid, p in subs)


def _section(sid, payload):
    return bytes([sid]) + _u32(len(payload)) + payload


def encode(m: WasmModule) -> bytes:
    """Encode ``m``; output is canonical and a pure function of the value."""
    if len(m.code) != len(m.functions):
        raise EncodeOverflow("function and code lengths differ")
    known = {
        1: m.types and _vec(m.types, _functype),
        2: m.imports and _vec(m.imports, _import),
        3: m.functions and _vec(m.functions, _u32),
        4: m.tables and _vec(m.tables, lambda t: bytes([VALTYPE_CODES[t.elem]]) + _limits(t.limits)),
        5: m.memories and _vec(m.memories, _limits),
        6: m.globals and _vec(
            m.globals,
            lambda g: bytes([VALTYPE_CODES[g.valtype], int(g.mutable)]) + encode_expr(g.init)),
        7: m.exports and _vec(
            m.exports, lambda e: _name(e.name) + bytes([KIND_NAMES[e.kind]]) + _u32(e.index)),
        8: None if m.start is None else _u32(m.start),
        9: m.elements and _vec(m.elements, _element),
        12: None if m.data_count is None else _u32(m.data_count),
        10: m.code and _vec(m.code, _body),
        11: m.data and _vec(m.data, _data),
    }
    customs = [(c.after, _section(0, _name(c.name) + c.data)) for c in m.custom]
    if m.names is not None:
        customs.append((m.names.after, _section(0, _name("name") + encode_name_section(m.names))))

    def place(after):
        return -1 if after == 0 else _RANK.get(after, len(SECTION_ORDER))

    out = bytearray(MAGIC + VERSION)
    pending = sorted(enumerate(customs), key=lambda ic: (place(ic[1][0]), ic[0]))
    pending = [blob for _, (after, blob) in pending]
    pending_rank = sorted(place(a) for a, _ in customs)
    cursor = 0
    for rank, sid in [(-1, None)] + list(enumerate(SECTION_ORDER)):
        if sid is not None and known[sid] not in (None, b"", ()):
            out += _section(sid, known[sid])
        while cursor < len(pending) and pending_rank[cursor] <= rank:
            out += pending[cursor]
            cursor += 1
    for blob in pending[cursor:]:
        out += blob
    return bytes(out)
