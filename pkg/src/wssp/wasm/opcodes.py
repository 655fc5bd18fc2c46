"""Opcode table for the WebAssembly 1.0 instruction set.

Each entry maps a mnemonic to its single-byte opcode and an immediate kind.
Immediate kinds:

``none``      no immediates
``block``     block type (s33)
``label``     label depth (u32)
``br_table``  vector of labels plus default label
``func``      function index
``call_ind``  type index, table index
``local``     local index
``global``    global index
``memarg``    alignment exponent, offset
``mem``       memory index byte (must be 0)
``i32``/``i64``  signed constants
``f32``/``f64``  raw little-endian bytes, kept opaque
"""

_TABLE = [
    ("unreachable", 0x00, "none"),
    ("nop", 0x01, "none"),
    ("block", 0x02, "block"),
    ("loop", 0x03, "block"),
    ("if", 0x04, "block"),
    ("else", 0x05, "none"),
    ("end", 0x0B, "none"),
    ("br", 0x0C, "label"),
    ("br_if", 0x0D, "label"),
    ("br_table", 0x0E, "br_table"),
    ("return", 0x0F, "none"),
    ("call", 0x10, "func"),
    ("call_indirect", 0x11, "call_ind"),
    ("drop", 0x1A, "none"),
    ("select", 0x1B, "none"),
    ("local.get", 0x20, "local"),
    ("local.set", 0x21, "local"),
    ("local.tee", 0x22, "local"),
    ("global.get", 0x23, "global"),
    ("global.set", 0x24, "global"),
    ("i32.load", 0x28, "memarg"),
    ("i64.load", 0x29, "memarg"),
    ("f32.load", 0x2A, "memarg"),
    ("f64.load", 0x2B, "memarg"),
    ("i32.load8_s", 0x2C, "memarg"),
    ("i32.load8_u", 0x2D, "memarg"),
    ("i32.load16_s", 0x2E, "memarg"),
    ("i32.load16_u", 0x2F, "memarg"),
    ("i64.load8_s", 0x30, "memarg"),
    ("i64.load8_u", 0x31, "memarg"),
    ("i64.load16_s", 0x32, "memarg"),
    ("i64.load16_u", 0x33, "memarg"),
    ("i64.load32_s", 0x34, "memarg"),
    ("i64.load32_u", 0x35, "memarg"),
    ("i32.store", 0x36, "memarg"),
    ("i64.store", 0x37, "memarg"),
    ("f32.store", 0x38, "memarg"),
    ("f64.store", 0x39, "memarg"),
    ("i32.store8", 0x3A, "memarg"),
    ("i32.store16", 0x3B, "memarg"),
    ("i64.store8", 0x3C, "memarg"),
    ("i64.store16", 0x3D, "memarg"),
    ("i64.store32", 0x3E, "memarg"),
    ("memory.size", 0x3F, "mem"),
    ("memory.grow", 0x40, "mem"),
    ("i32.const", 0x41, "i32"),
    ("i64.const", 0x42, "i64"),
    ("f32.const", 0x43, "f32"),
    ("f64.const", 0x44, "f64"),
    ("ref.is_null", 0xD1, "none"),
    ("ref.func", 0xD2, "func"),
]

# Numeric instructions without immediates, 0x45..0xC4.
_NUMERIC = """
i32.eqz i32.eq i32.ne i32.lt_s i32.lt_u i32.gt_s i32.gt_u i32.le_s i32.le_u
i32.ge_s i32.ge_u i64.eqz i64.eq i64.ne i64.lt_s i64.lt_u i64.gt_s i64.gt_u
i64.le_s i64.le_u i64.ge_s i64.ge_u f32.eq f32.ne f32.lt f32.gt f32.le f32.ge
f64.eq f64.ne f64.lt f64.gt f64.le f64.ge i32.clz i32.ctz i32.popcnt i32.add
i32.sub i32.mul i32.div_s i32.div_u i32.rem_s i32.rem_u i32.and i32.or i32.xor
i32.shl i32.shr_s i32.shr_u i32.rotl i32.rotr i64.clz i64.ctz i64.popcnt
i64.add i64.sub i64.mul i64.div_s i64.div_u i64.rem_s i64.rem_u i64.and i64.or
i64.xor i64.shl i64.shr_s i64.shr_u i64.rotl i64.rotr f32.abs f32.neg f32.ceil
f32.floor f32.trunc f32.nearest f32.sqrt f32.add f32.sub f32.mul f32.div
f32.min f32.max f32.copysign f64.abs f64.neg f64.ceil f64.floor f64.trunc
f64.nearest f64.sqrt f64.add f64.sub f64.mul f64.div f64.min f64.max
f64.copysign i32.wrap_i64 i32.trunc_f32_s i32.trunc_f32_u i32.trunc_f64_s
i32.trunc_f64_u i64.extend_i32_s i64.extend_i32_u i64.trunc_f32_s
i64.trunc_f32_u i64.trunc_f64_s i64.trunc_f64_u f32.convert_i32_s
f32.convert_i32_u f32.convert_i64_s f32.convert_i64_u f32.demote_f64
f64.convert_i32_s f64.convert_i32_u f64.convert_i64_s f64.convert_i64_u
f64.promote_f32 i32.reinterpret_f32 i64.reinterpret_f64 f32.reinterpret_i32
f64.reinterpret_i64 i32.extend8_s i32.extend16_s i64.extend8_s i64.extend16_s
i64.extend32_s
""".split()

for _i, _name in enumerate(_NUMERIC):
    _TABLE.append((_name, 0x45 + _i, "none"))

BY_NAME = {name: (code, kind) for name, code, kind in _TABLE}
BY_CODE = {code: (name, kind) for name, code, kind in _TABLE}

assert BY_NAME["i64.extend32_s"][0] == 0xC4

# Reference-type instructions kept opaque, with their immediate shapes.
OPAQUE_OPS = {
    0x1C: ("select_t", ("valtypes",)),
    0x25: ("table.get", ("u32",)),
    0x26: ("table.set", ("u32",)),
    0xD0: ("ref.null", ("byte",)),
}

# Prefixed 0xFC instructions (saturating truncation, bulk memory, tables).
# They are carried opaquely; the tuple lists immediate shapes for skipping.
FC_OPS = {
    0: ("i32.trunc_sat_f32_s", ()),
    1: ("i32.trunc_sat_f32_u", ()),
    2: ("i32.trunc_sat_f64_s", ()),
    3: ("i32.trunc_sat_f64_u", ()),
    4: ("i64.trunc_sat_f32_s", ()),
    5: ("i64.trunc_sat_f32_u", ()),
    6: ("i64.trunc_sat_f64_s", ()),
    7: ("i64.trunc_sat_f64_u", ()),
    8: ("memory.init", ("u32", "byte")),
    9: ("data.drop", ("u32",)),
    10: ("memory.copy", ("byte", "byte")),
    11: ("memory.fill", ("byte",)),
    12: ("table.init", ("u32", "u32")),
    13: ("elem.drop", ("u32",)),
    14: ("table.copy", ("u32", "u32")),
    15: ("table.grow", ("u32",)),
    16: ("table.size", ("u32",)),
    17: ("table.fill", ("u32",)),
}

LOADS = frozenset(n for n, c, k in _TABLE if k == "memarg" and ".load" in n)
STORES = frozenset(n for n, c, k in _TABLE if k == "memarg" and ".store" in n)
BLOCK_STARTS = frozenset({"block", "loop", "if"})
