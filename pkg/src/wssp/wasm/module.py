"""In-memory representation of a decoded WebAssembly module.

All types are frozen dataclasses holding tuples, so a module value can be
shared freely; transforms build new values with :func:`dataclasses.replace`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

VALTYPES = {0x7F: "i32", 0x7E: "i64", 0x7D: "f32", 0x7C: "f64", 0x70: "funcref", 0x6F: "externref"}
VALTYPE_CODES = {v: k for k, v in VALTYPES.items()}

# Block types are stored as the s33 they are encoded with.
BLOCK_EMPTY = -64
BLOCK_VALTYPES = {-1: "i32", -2: "i64", -3: "f32", -4: "f64"}

PAGE_SIZE = 65536


@dataclass(frozen=True)
class Instr:
    """One instruction.

    ``args`` holds decoded immediates.  Instructions the toolkit does not
    interpret (float constants, prefixed ops, reference-type ops) keep their
    complete original encoding in ``raw`` and are re-emitted verbatim.
    """

    op: str
    args: tuple = ()
    raw: Optional[bytes] = None

    def __repr__(self):
        if self.raw is not None:
            return "%s<%s>" % (self.op, self.raw.hex())
        if not self.args:
            return self.op
        return "%s %s" % (self.op, " ".join(str(a) for a in self.args))


def I(op, *args):
    return Instr(op, tuple(args))


@dataclass(frozen=True)
class FuncType:
    params: tuple = ()
    results: tuple = ()

    def __repr__(self):
        return "(%s) -> (%s)" % (", ".join(self.params), ", ".join(self.results))


@dataclass(frozen=True)
class Limits:
    min: int
    max: Optional[int] = None


@dataclass(frozen=True)
class TableType:
    elem: str
    limits: Limits


@dataclass(frozen=True)
class GlobalType:
    valtype: str
    mutable: bool


@dataclass(frozen=True)
class Import:
    module: str
    name: str
    kind: str  # "func" | "table" | "memory" | "global"
    desc: object  # type index, TableType, Limits or GlobalType


@dataclass(frozen=True)
class GlobalDef:
    valtype: str
    mutable: bool
    init: tuple  # constant expression ending in ``end``

    @property
    def const_value(self):
        """Initial value when ``init`` is a plain ``*.const``, else None."""
        if len(self.init) == 2 and self.init[0].op in ("i32.const", "i64.const"):
            return self.init[0].args[0]
        return None


@dataclass(frozen=True)
class Export:
    name: str
    kind: str
    index: int


@dataclass(frozen=True)
class ElementSegment:
    table: int
    offset: tuple
    funcs: tuple


@dataclass(frozen=True)
class FuncBody:
    locals: tuple = ()  # (count, valtype) runs
    instrs: tuple = ()

    def local_types(self, params=()):
        out = list(params)
        for count, vt in self.locals:
            out.extend([vt] * count)
        return out


@dataclass(frozen=True)
class DataSegment:
    memory: int
    offset: Optional[tuple]  # None for passive segments
    data: bytes

    @property
    def const_offset(self):
        if self.offset is not None and len(self.offset) == 2 and self.offset[0].op == "i32.const":
            return self.offset[0].args[0] & 0xFFFFFFFF
        return None


@dataclass(frozen=True)
class CustomSection:
    name: str
    data: bytes
    after: int = 0  # id of the preceding known section, 0 if first


@dataclass(frozen=True)
class NameSection:
    module: Optional[str] = None
    functions: dict = field(default_factory=dict)
    locals: dict = field(default_factory=dict)  # func -> {local -> name}
    globals: dict = field(default_factory=dict)
    extra: tuple = ()  # (subsection id, raw payload) for unparsed kinds
    after: int = 255


@dataclass(frozen=True)
class WasmModule:
    types: tuple = ()
    imports: tuple = ()
    functions: tuple = ()  # type index per defined function
    tables: tuple = ()
    memories: tuple = ()
    globals: tuple = ()
    exports: tuple = ()
    start: Optional[int] = None
    elements: tuple = ()
    data_count: Optional[int] = None
    code: tuple = ()
    data: tuple = ()
    names: Optional[NameSection] = None
    custom: tuple = ()

    def replace(self, **changes) -> "WasmModule":
        return dataclasses.replace(self, **changes)

    # index-space helpers

    def imports_of(self, kind):
        return [imp for imp in self.imports if imp.kind == kind]

    @property
    def num_imported_funcs(self):
        return sum(1 for imp in self.imports if imp.kind == "func")

    @property
    def num_imported_globals(self):
        return sum(1 for imp in self.imports if imp.kind == "global")

    @property
    def num_funcs(self):
        return self.num_imported_funcs + len(self.functions)

    @property
    def num_globals(self):
        return self.num_imported_globals + len(self.globals)

    def func_type(self, index) -> FuncType:
        nimp = self.num_imported_funcs
        if index < nimp:
            return self.types[self.imports_of("func")[index].desc]
        return self.types[self.functions[index - nimp]]

    def global_type(self, index) -> GlobalType:
        nimp = self.num_imported_globals
        if index < nimp:
            return self.imports_of("global")[index].desc
        g = self.globals[index - nimp]
        return GlobalType(g.valtype, g.mutable)

    def global_def(self, index) -> Optional[GlobalDef]:
        nimp = self.num_imported_globals
        return None if index < nimp else self.globals[index - nimp]

    def body(self, index) -> FuncBody:
        return self.code[index - self.num_imported_funcs]

    def defined_func_indices(self):
        nimp = self.num_imported_funcs
        return range(nimp, nimp + len(self.functions))

    def func_name(self, index):
        if self.names is None:
            return None
        return self.names.functions.get(index)

    def func_index_by_name(self, name):
        if self.names is not None:
            for idx, n in self.names.functions.items():
                if n == name:
                    return idx
        return None

    def global_index_by_name(self, name):
        if self.names is not None:
            for idx, n in self.names.globals.items():
                if n == name:
                    return idx
        for exp in self.exports:
            if exp.kind == "global" and exp.name == name:
                return exp.index
        return None

    def export(self, name, kind=None):
        for exp in self.exports:
            if exp.name == name and (kind is None or exp.kind == kind):
                return exp
        return None

    def find_import(self, module, name, kind="func"):
        """Index of an import within its kind's index space, or None."""
        for i, imp in enumerate(self.imports_of(kind)):
            if imp.module == module and imp.name == name:
                return i
        return None
