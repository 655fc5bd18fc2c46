"""Post-link stack smashing protection for wasm32 modules.

Two flavors share the canary placement and check code:

* hardened: the reference value lives in a dedicated mutable i32 global,
  outside linear memory, and the start-up routine traps when ``random_get``
  reports an error;
* legacy: the reference value lives in a 4-byte linear-memory slot and a
  failed ``random_get`` falls back to ``slot_address * 1103515245``, the
  scheme shipped by the existing wasi-libc.  It exists as an audit baseline.

Each protected frame of ``S`` bytes grows to ``S + 16``; the canary occupies
``[base + S, base + S + 4)`` so that an upward overflow of any in-frame
buffer crosses it before reaching the caller's frame.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional

from .layout import FramePattern, data_range, detect_frames, find_stack_pointer, match_epilogue, match_prologue
from .wasm.binary import encode
from .wasm.module import (
    BLOCK_EMPTY,
    PAGE_SIZE,
    DataSegment,
    Export,
    FuncBody,
    FuncType,
    GlobalDef,
    I,
    WasmModule,
)
from .wasm.transform import add_function, add_function_import, add_global, ensure_type, map_function_indices, set_names

log = logging.getLogger(__name__)

WASI_MODULE = "wasi_snapshot_preview1"
RANDOM_GET = "random_get"
RANDOM_GET_TYPE = FuncType(("i32", "i32"), ("i32",))
LEGACY_MULTIPLIER = 1103515245
SCRATCH_BYTES = 16
DEBUG_GUARD_EXPORT = "__ssp_debug_guard"
DEBUG_GUARD_ADDR_EXPORT = "__ssp_debug_guard_addr"
FAULT_STUB_NAME = "__wasi_random_get_fault"
END = I("end")


class SspError(Exception):
    pass


class NoStackPointer(SspError):
    pass


class RandomImportConflict(SspError):
    pass


class FrameRewriteConflict(SspError):
    pass


class AlreadyInstrumented(SspError):
    pass


class ImportNotFound(SspError):
    pass


class SelectionMode(str, enum.Enum):
    ALL = "all"
    HEURISTIC = "heuristic"


class InitHook(str, enum.Enum):
    START_SECTION = "start-section"
    PREPEND_TO_START = "prepend-to-start"
    PREPEND_TO_EXPORT = "prepend-to-export"


@dataclass(frozen=True)
class SspConfig:
    mode: SelectionMode = SelectionMode.ALL
    heuristic_threshold: int = 8
    canary_slot_bytes: int = 16
    guard_global_name: str = "__stack_chk_guard"
    fail_func_name: str = "__stack_chk_fail"
    init_func_name: str = "__ssp_init"
    init_hook: InitHook = InitHook.START_SECTION
    init_export: str = "_start"
    wipe_scratch: bool = True
    debug_export: bool = False
    # legacy flavor only; default is the first 4-aligned address past the data
    legacy_guard_address: Optional[int] = None

    def __post_init__(self):
        if self.canary_slot_bytes <= 0 or self.canary_slot_bytes % 16:
            raise ValueError("canary_slot_bytes must be a positive multiple of 16")
        if self.heuristic_threshold < 0:
            raise ValueError("heuristic_threshold must be >= 0")
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        object.__setattr__(self, "init_hook", InitHook(self.init_hook))


@dataclass(frozen=True)
class InstrumentationSummary:
    flavor: str
    functions_instrumented: int
    functions_skipped: tuple  # (func_index, reason)
    functions_frameless: int
    guard_global_index: Optional[int]
    guard_address: Optional[int]
    injected_func_indices: tuple  # (init, fail)
    random_get_index: int
    size_delta_bytes: int
    instrumented_funcs: tuple = ()

    def to_json(self):
        return {
            "flavor": self.flavor,
            "functions_instrumented": self.functions_instrumented,
            "functions_skipped": [{"func_index": f, "reason": r} for f, r in self.functions_skipped],
            "functions_frameless": self.functions_frameless,
            "guard_global_index": self.guard_global_index,
            "guard_address": self.guard_address,
            "injected_func_indices": {"init": self.injected_func_indices[0],
                                      "fail": self.injected_func_indices[1]},
            "random_get_index": self.random_get_index,
            "size_delta_bytes": self.size_delta_bytes,
            "instrumented_funcs": list(self.instrumented_funcs),
        }


# ---------------------------------------------------------------------------
# guard access


@dataclass(frozen=True)
class _GlobalGuard:
    index: int

    def load(self):
        return [I("global.get", self.index)]

    def store(self, value):
        return list(value) + [I("global.set", self.index)]


@dataclass(frozen=True)
class _MemoryGuard:
    address: int

    def load(self):
        return [I("i32.const", self.address), I("i32.load", 2, 0)]

    def store(self, value):
        return [I("i32.const", self.address)] + list(value) + [I("i32.store", 2, 0)]


def _init_body(sp, random_get, wipe, branches):
    """Scratch reservation, ``random_get`` call and errno test around ``branches``.

    ``branches`` continues right after the ``if`` opened on a non-zero errno.
    """
    reserve = [I("global.get", sp), I("i32.const", SCRATCH_BYTES), I("i32.sub"), I("global.set", sp)]
    release = [I("global.get", sp), I("i32.const", SCRATCH_BYTES), I("i32.add"), I("global.set", sp)]
    body = reserve + [
        I("global.get", sp), I("i32.const", 4), I("call", random_get),
        I("i32.const", 0), I("i32.ne"),
        I("if", BLOCK_EMPTY),
    ] + branches
    if wipe:
        body += [I("global.get", sp), I("i32.const", 0), I("i32.store", 2, 0)]
    return FuncBody((), tuple(body + release + [END]))


def _copy_scratch(sp, guard):
    return guard.store([I("global.get", sp), I("i32.load", 2, 0)])


def build_init_function(cfg: SspConfig, sp: int, random_get: int, guard: int) -> FuncBody:
    """Start-up routine for the hardened flavor.

    Reserves 16 scratch bytes on the shadow stack, asks ``random_get`` for 4
    bytes, traps on any non-zero errno, copies the bytes into the guard
    global, optionally zeroes the scratch word, then releases the scratch.
    """
    branches = [I("unreachable"), END] + _copy_scratch(sp, _GlobalGuard(guard))
    return _init_body(sp, random_get, cfg.wipe_scratch, branches)


def build_legacy_init_function(cfg: SspConfig, sp: int, random_get: int, address: int) -> FuncBody:
    guard = _MemoryGuard(address)
    fallback = guard.store([
        I("i32.const", address), I("i32.const", LEGACY_MULTIPLIER), I("i32.mul")])
    branches = fallback + [I("else")] + _copy_scratch(sp, guard) + [END]
    return _init_body(sp, random_get, cfg.wipe_scratch, branches)


# ---------------------------------------------------------------------------
# frame rewriting


def _rewrite_frame(instrs, fr, sp, slot, guard, fail_idx):
    S = fr.frame_size
    lo, hi = fr.prologue_span
    hit = match_prologue(instrs, lo, sp)
    if hit is None or hit[1] != S or hit[3] != hi or hit[2] != fr.frame_local:
        raise FrameRewriteConflict(
            "function %d: prologue at %d does not allocate %d bytes" % (fr.func_index, lo, S))
    for start, end in fr.epilogue_sites:
        ep = match_epilogue(instrs, end - 1, sp, fr.frame_local)
        if ep is None or ep[0] != S or ep[1] != start:
            raise FrameRewriteConflict(
                "function %d: frame size %d has no matching epilogue at %d" % (fr.func_index, S, start))

    if fr.pattern is FramePattern.TEE_SET:
        base = I("local.get", fr.frame_local)
    else:
        base = I("global.get", sp)
    grown = I("i32.const", S + slot)
    out = list(instrs)
    out[lo + 1] = grown
    for start, _ in fr.epilogue_sites:
        out[start + 1] = grown
    check = [base, I("i32.load", 2, S)] + guard.load() + [
        I("i32.ne"), I("if", BLOCK_EMPTY), I("call", fail_idx), END]
    for start, _ in sorted(fr.epilogue_sites, reverse=True):
        out[start:start] = check
    store = [base] + guard.load() + [I("i32.store", 2, S)]
    for off in range(S + 4, S + slot, 4):
        store += [base, I("i32.const", 0), I("i32.store", 2, off)]
    out[hi:hi] = store
    return tuple(out)


def _prepend_call(m, func_index, callee):
    body = m.body(func_index)
    code = list(m.code)
    code[func_index - m.num_imported_funcs] = FuncBody(
        body.locals, (I("call", callee),) + body.instrs)
    return m.replace(code=tuple(code))


def _is_instrumented(m, cfg):
    return (m.global_index_by_name(cfg.guard_global_name) is not None
            or m.func_index_by_name(cfg.fail_func_name) is not None
            or m.func_index_by_name(cfg.init_func_name) is not None)


def _ensure_random_get(m):
    """Return ``(module, random_get_index, inserted_count)``."""
    idx = m.find_import(WASI_MODULE, RANDOM_GET)
    if idx is not None:
        if m.func_type(idx) != RANDOM_GET_TYPE:
            raise RandomImportConflict(
                "existing %s.%s has type %r" % (WASI_MODULE, RANDOM_GET, m.func_type(idx)))
        return m, idx, 0
    m, t = ensure_type(m, RANDOM_GET_TYPE)
    m, idx = add_function_import(m, WASI_MODULE, RANDOM_GET, t)
    m = set_names(m, functions={idx: "__imported_%s_%s" % (WASI_MODULE, RANDOM_GET)})
    return m, idx, 1


def _legacy_slot(m, cfg):
    if cfg.legacy_guard_address is not None:
        addr = cfg.legacy_guard_address
    else:
        dr = data_range(m)
        if dr is None:
            raise SspError("no data zone to host the legacy guard; set legacy_guard_address")
        addr = (dr[1] + 3) & ~3
    for seg in m.data:
        off = seg.const_offset
        if off is not None and off < addr + 4 and addr < off + len(seg.data):
            raise SspError("legacy guard slot %d overlaps a data segment" % addr)
    mem = m.memories[0] if m.memories else None
    if mem is None or addr + 4 > mem.min * PAGE_SIZE:
        raise SspError("legacy guard slot %d outside initial memory" % addr)
    return addr


def _instrument(m, cfg, frames, sp, flavor):
    if _is_instrumented(m, cfg):
        raise AlreadyInstrumented("module is already instrumented")
    if sp is None and frames:
        sp = frames[0].sp_global
    if sp is None:
        sp = find_stack_pointer(m)
    if sp is None:
        raise NoStackPointer("cannot identify the stack pointer global")
    if frames is None:
        frames = detect_frames(m, sp)
    original_size = len(encode(m))
    old_imports = m.num_imported_funcs
    defined = set(m.defined_func_indices())

    m, random_get, k = _ensure_random_get(m)
    shift = lambda fi: fi + k if fi >= old_imports else fi
    m, void_t = ensure_type(m, FuncType())

    if flavor == "hardened":
        m, guard_idx = add_global(
            m, GlobalDef("i32", True, (I("i32.const", 0), END)), name=cfg.guard_global_name)
        guard = _GlobalGuard(guard_idx)
        guard_addr = None
    else:
        guard_addr = _legacy_slot(m, cfg)
        m = m.replace(data=m.data + (DataSegment(0, (I("i32.const", guard_addr), END), bytes(4)),))
        if m.data_count is not None:
            m = m.replace(data_count=m.data_count + 1)
        guard = _MemoryGuard(guard_addr)
        guard_idx = None

    fail_idx = m.num_funcs
    init_idx = fail_idx + 1

    code = list(m.code)
    instrumented, skipped, frameless = [], [], 0
    by_func = {fr.func_index: fr for fr in frames}
    for old_fi in sorted(defined):
        fr = by_func.get(old_fi)
        fi = shift(old_fi)
        if fr is None:
            skipped.append((fi, "no frame information"))
            continue
        if not fr.touches_sp:
            frameless += 1
            continue
        if not fr.recognized:
            log.warning("function %d skipped: %s", fi, fr.reason)
            skipped.append((fi, "Unrecognized: %s" % fr.reason))
            continue
        if cfg.mode is SelectionMode.HEURISTIC and fr.frame_size < cfg.heuristic_threshold:
            skipped.append((fi, "BelowThreshold"))
            continue
        pos = fi - m.num_imported_funcs
        code[pos] = FuncBody(code[pos].locals, _rewrite_frame(
            code[pos].instrs, fr, sp, cfg.canary_slot_bytes, guard, fail_idx))
        instrumented.append(fi)
    m = m.replace(code=tuple(code))

    m, got = add_function(m, void_t, FuncBody((), (I("unreachable"), END)), name=cfg.fail_func_name)
    assert got == fail_idx
    if flavor == "hardened":
        init_body = build_init_function(cfg, sp, random_get, guard_idx)
    else:
        init_body = build_legacy_init_function(cfg, sp, random_get, guard_addr)
    m, got = add_function(m, void_t, init_body, name=cfg.init_func_name)
    assert got == init_idx

    m = _hook_init(m, cfg, init_idx)

    if cfg.debug_export:
        if flavor == "hardened":
            m = m.replace(exports=m.exports + (Export(DEBUG_GUARD_EXPORT, "global", guard_idx),))
        else:
            m, addr_g = add_global(m, GlobalDef("i32", False, (I("i32.const", guard_addr), END)))
            m = m.replace(exports=m.exports + (Export(DEBUG_GUARD_ADDR_EXPORT, "global", addr_g),))

    summary = InstrumentationSummary(
        flavor=flavor,
        functions_instrumented=len(instrumented),
        functions_skipped=tuple(skipped),
        functions_frameless=frameless,
        guard_global_index=guard_idx,
        guard_address=guard_addr,
        injected_func_indices=(init_idx, fail_idx),
        random_get_index=random_get,
        size_delta_bytes=len(encode(m)) - original_size,
        instrumented_funcs=tuple(instrumented),
    )
    return m, summary


def _hook_init(m, cfg, init_idx):
    hook = cfg.init_hook
    if hook is InitHook.START_SECTION:
        if m.start is None:
            return m.replace(start=init_idx)
        hook = InitHook.PREPEND_TO_START
    if hook is InitHook.PREPEND_TO_START:
        if m.start is not None and m.start >= m.num_imported_funcs:
            return _prepend_call(m, m.start, init_idx)
        hook = InitHook.PREPEND_TO_EXPORT
    exp = m.export(cfg.init_export, "func")
    if exp is None or exp.index < m.num_imported_funcs:
        raise SspError("no defined function exported as %r to run the initialiser" % cfg.init_export)
    return _prepend_call(m, exp.index, init_idx)


def instrument(m: WasmModule, cfg: SspConfig = SspConfig(), frames=None, sp=None):
    """Apply hardened SSP; returns ``(module, InstrumentationSummary)``.

    ``frames`` defaults to :func:`~wssp.layout.detect_frames` on ``sp``,
    which defaults to :func:`~wssp.layout.find_stack_pointer`.
    """
    return _instrument(m, cfg, frames, sp, "hardened")


def legacy_instrument(m: WasmModule, cfg: SspConfig = SspConfig(), frames=None, sp=None):
    """Apply the linear-memory-guard baseline scheme (audit reference only)."""
    return _instrument(m, cfg, frames, sp, "legacy")


def inject_fault_random(m: WasmModule) -> WasmModule:
    """Replace the ``random_get`` import by a local stub that returns errno 1."""
    r = m.find_import(WASI_MODULE, RANDOM_GET)
    if r is None:
        raise ImportNotFound("module does not import %s.%s" % (WASI_MODULE, RANDOM_GET))
    type_idx = m.imports_of("func")[r].desc
    n = 0
    imports = []
    for imp in m.imports:
        if imp.kind == "func":
            if n == r:
                n += 1
                continue
            n += 1
        imports.append(imp)
    new_idx = m.num_funcs - 1

    def fmap(i):
        if i == r:
            return new_idx
        return i - 1 if i > r else i

    m = map_function_indices(m.replace(imports=tuple(imports)), fmap)
    m, idx = add_function(m, type_idx, FuncBody((), (I("i32.const", 1), END)), name=FAULT_STUB_NAME)
    assert idx == new_idx
    return m
