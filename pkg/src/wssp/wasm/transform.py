"""Index-space rewrites shared by the instrumentation passes."""

from __future__ import annotations

import dataclasses

from .module import Export, FuncBody, Import, Instr, NameSection, WasmModule


def map_function_indices(m: WasmModule, fmap) -> WasmModule:
    """Apply ``fmap`` (old function index -> new) to every function reference.

    Covers ``call``/``ref.func`` immediates, element segments, func exports,
    the start index and the function keys of the name section.  Import and
    code lists are left alone; callers arrange those first.
    """

    def body(b):
        changed = False
        out = []
        for ins in b.instrs:
            if ins.op in ("call", "ref.func"):
                new = fmap(ins.args[0])
                if new != ins.args[0]:
                    ins = Instr(ins.op, (new,))
                    changed = True
            out.append(ins)
        return FuncBody(b.locals, tuple(out)) if changed else b

    elements = tuple(
        dataclasses.replace(seg, funcs=tuple(fmap(f) for f in seg.funcs)) for seg in m.elements)
    exports = tuple(
        Export(e.name, e.kind, fmap(e.index)) if e.kind == "func" else e for e in m.exports)
    names = m.names
    if names is not None:
        names = dataclasses.replace(
            names,
            functions={fmap(k): v for k, v in names.functions.items()},
            locals={fmap(k): v for k, v in names.locals.items()},
        )
    return m.replace(
        code=tuple(body(b) for b in m.code),
        elements=elements,
        exports=exports,
        start=None if m.start is None else fmap(m.start),
        names=names,
    )


def remap_function_indices(m: WasmModule, inserted_import_count: int) -> WasmModule:
    """Shift defined-function references after new function imports.

    ``m`` must already list the ``inserted_import_count`` new imports as the
    last function imports; every reference to a function that was defined
    before the insertion moves up by that count.
    """
    k = inserted_import_count
    if k < 0:
        raise ValueError("inserted_import_count must be >= 0")
    if k == 0:
        return m
    old_imports = m.num_imported_funcs - k
    if old_imports < 0:
        raise ValueError("module has fewer than %d function imports" % k)
    return map_function_indices(m, lambda i: i + k if i >= old_imports else i)


def add_function_import(m: WasmModule, module: str, name: str, type_index: int):
    """Append a function import, remap, and return ``(new_module, func_index)``."""
    idx = m.num_imported_funcs
    imports = list(m.imports)
    # keep the new import after every existing func import
    pos = max((i + 1 for i, imp in enumerate(imports) if imp.kind == "func"), default=len(imports))
    imports.insert(pos, Import(module, name, "func", type_index))
    return remap_function_indices(m.replace(imports=tuple(imports)), 1), idx


def ensure_type(m: WasmModule, functype):
    """Return ``(module, type_index)`` with ``functype`` present in the type section."""
    for i, t in enumerate(m.types):
        if t == functype:
            return m, i
    return m.replace(types=m.types + (functype,)), len(m.types)


def add_function(m: WasmModule, type_index: int, body: FuncBody, name=None):
    """Append a defined function; return ``(new_module, func_index)``."""
    idx = m.num_funcs
    m = m.replace(functions=m.functions + (type_index,), code=m.code + (body,))
    if name is not None:
        m = set_names(m, functions={idx: name})
    return m, idx


def add_global(m: WasmModule, gdef, name=None):
    idx = m.num_globals
    m = m.replace(globals=m.globals + (gdef,))
    if name is not None:
        m = set_names(m, globals={idx: name})
    return m, idx


def set_names(m: WasmModule, functions=None, globals=None) -> WasmModule:
    """Merge entries into the name section, creating it if absent."""
    ns = m.names or NameSection()
    return m.replace(names=dataclasses.replace(
        ns,
        functions={**ns.functions, **(functions or {})},
        globals={**ns.globals, **(globals or {})},
    ))
