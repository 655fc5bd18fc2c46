import dataclasses

import pytest

from wssp import corpus
from wssp.harness import Category, RandomSource, RunSpec, Session, engine_validate
from wssp.layout import detect_frames
from wssp.ssp import (
    DEBUG_GUARD_ADDR_EXPORT,
    DEBUG_GUARD_EXPORT,
    FAULT_STUB_NAME,
    RANDOM_GET_TYPE,
    SCRATCH_BYTES,
    AlreadyInstrumented,
    FrameRewriteConflict,
    ImportNotFound,
    InitHook,
    NoStackPointer,
    RandomImportConflict,
    SelectionMode,
    SspConfig,
    SspError,
    build_init_function,
    inject_fault_random,
    instrument,
    legacy_instrument,
)
from wssp.wasm import (
    BLOCK_EMPTY,
    FuncBody,
    FuncType,
    I,
    WasmModule,
    encode,
    validate,
)
from wssp.wasm.transform import add_function_import, ensure_type

from conftest import DEADBEEF, run_module

END = I("end")


def _guest_a(length=8, layout=corpus.Layout.STACK_FIRST):
    return corpus.gen_guest_A(16, length, layout)


def _benign(prefix, layout=corpus.Layout.NO_STACK_FIRST):
    return next(e for e in corpus.gen_benign_suite(layout) if e[1].name.startswith(prefix))


def _body_of(m, name):
    return m.body(m.func_index_by_name(name)).instrs


def test_guest_a_frame_rewrite():
    m, _ = _guest_a()
    out, summary = instrument(m)
    assert summary.functions_instrumented == 1
    vuln = _body_of(out, "vuln")
    guard = summary.guard_global_index
    fail = summary.injected_func_indices[1]
    t = 0
    assert vuln[:5] == (I("global.get", 0), I("i32.const", 48), I("i32.sub"), I("local.tee", t),
                        I("global.set", 0))
    assert vuln[5:8] == (I("local.get", t), I("global.get", guard), I("i32.store", 2, 32))
    # the 12 bytes after the canary are zeroed
    zero_offsets = [ins.args[1] for k, ins in enumerate(vuln[8:17]) if ins.op == "i32.store"]
    assert zero_offsets == [36, 40, 44]
    check = (I("local.get", t), I("i32.load", 2, 32), I("global.get", guard), I("i32.ne"),
             I("if", BLOCK_EMPTY), I("call", fail), END)
    assert vuln[-12:] == check + (I("local.get", t), I("i32.const", 48), I("i32.add"),
                                  I("global.set", 0), END)
    assert validate(out) == [] and engine_validate(encode(out)) is None


def test_injected_symbols_and_bodies():
    m, _ = _guest_a()
    out, s = instrument(m)
    init, fail = s.injected_func_indices
    assert out.func_name(fail) == "__stack_chk_fail"
    assert out.func_name(init) == "__ssp_init"
    assert out.names.globals[s.guard_global_index] == "__stack_chk_guard"
    assert out.body(fail).instrs == (I("unreachable"), END)
    g = out.global_def(s.guard_global_index)
    assert g.mutable and g.valtype == "i32" and g.const_value == 0
    assert out.start == init
    assert out.func_type(s.random_get_index) == RANDOM_GET_TYPE
    assert out.func_name(s.random_get_index) == "__imported_wasi_snapshot_preview1_random_get"


def test_init_body_sequence():
    body = build_init_function(SspConfig(), sp=0, random_get=1, guard=3).instrs
    assert body == (
        I("global.get", 0), I("i32.const", 16), I("i32.sub"), I("global.set", 0),
        I("global.get", 0), I("i32.const", 4), I("call", 1),
        I("i32.const", 0), I("i32.ne"), I("if", BLOCK_EMPTY), I("unreachable"), END,
        I("global.get", 0), I("i32.load", 2, 0), I("global.set", 3),
        I("global.get", 0), I("i32.const", 0), I("i32.store", 2, 0),
        I("global.get", 0), I("i32.const", 16), I("i32.add"), I("global.set", 0),
        END,
    )
    no_wipe = build_init_function(SspConfig(wipe_scratch=False), 0, 1, 3).instrs
    assert len(no_wipe) == len(body) - 3


def test_index_remap_after_import():
    m, _ = _guest_a()
    out, s = instrument(m)
    assert s.random_get_index == 1
    assert out.num_imported_funcs == 2
    # every defined function moved up by one, including the _start export
    assert out.export("_start").index == m.export("_start").index + 1
    for fi in m.defined_func_indices():
        assert out.func_name(fi + 1) == m.func_name(fi)


def _with_import(m, params, results):
    m, t = ensure_type(m, FuncType(params, results))
    return add_function_import(m, "wasi_snapshot_preview1", "random_get", t)


def test_existing_random_get_reused():
    m, _ = _guest_a()
    m, rg = _with_import(m, ("i32", "i32"), ("i32",))
    out, s = instrument(m)
    assert s.random_get_index == rg
    assert out.num_imported_funcs == m.num_imported_funcs
    assert run_module(out).category is Category.SILENT


def test_random_import_conflict():
    m, _ = _guest_a()
    m, _ = _with_import(m, ("i32",), ("i32",))
    with pytest.raises(RandomImportConflict):
        instrument(m)


def test_zero_frame_module():
    m, tpl = _benign("benign_frame0")
    out, s = instrument(m)
    assert s.functions_instrumented == 0
    assert s.functions_skipped == ()
    assert s.functions_frameless == len(m.functions)
    assert len(out.functions) == len(m.functions) + 2
    assert len(out.globals) == len(m.globals) + 1
    assert run_module(out).category is Category.SILENT


def test_heuristic_below_threshold():
    m, _ = _benign("benign_frame4")
    cfg = SspConfig(mode=SelectionMode.HEURISTIC, heuristic_threshold=8)
    out, s = instrument(m, cfg)
    inc = m.func_index_by_name("inc") + 1
    assert s.functions_instrumented == 0
    assert s.functions_skipped == ((inc, "BelowThreshold"),)
    assert _body_of(out, "inc") == _body_of(m, "inc")
    _, s_all = instrument(m, SspConfig())
    assert s_all.functions_instrumented == 1


def test_summary_counts_cover_all_functions(full_corpus):
    for m, tpl in full_corpus:
        for fn in (instrument, legacy_instrument):
            _, s = fn(m, corpus.flavor_config(tpl))
            total = s.functions_instrumented + len(s.functions_skipped) + s.functions_frameless
            assert total == len(m.functions), tpl.name


def test_unrecognized_frames_left_alone():
    m, _ = _guest_a()
    fi = m.func_index_by_name("vuln")
    body = m.body(fi)
    # write sp outside an epilogue pattern
    instrs = body.instrs[:-1] + (I("i32.const", 0), I("global.set", 0), END)
    code = list(m.code)
    code[fi - m.num_imported_funcs] = FuncBody(body.locals, instrs)
    m = m.replace(code=tuple(code))
    out, s = instrument(m)
    assert s.functions_instrumented == 0
    assert s.functions_skipped[0][1].startswith("Unrecognized")
    assert out.body(fi + 1).instrs == instrs


def test_idempotence_guard():
    m, _ = _guest_a()
    out, _ = instrument(m)
    with pytest.raises(AlreadyInstrumented):
        instrument(out)
    with pytest.raises(AlreadyInstrumented):
        legacy_instrument(out)


def test_no_stack_pointer():
    m = WasmModule(types=(FuncType(),), functions=(0,), code=(FuncBody((), (END,)),))
    with pytest.raises(NoStackPointer):
        instrument(m)


def test_frame_rewrite_conflict():
    m, _ = _guest_a()
    frames = detect_frames(m, 0)
    k = next(i for i, f in enumerate(frames) if f.recognized)
    frames[k] = dataclasses.replace(frames[k], frame_size=64)
    with pytest.raises(FrameRewriteConflict):
        instrument(m, frames=frames)


def _with_start_function(m):
    t = next(i for i, ft in enumerate(m.types) if ft == FuncType())
    idx = m.num_funcs
    m = m.replace(functions=m.functions + (t,), code=m.code + (FuncBody((), (I("nop"), END)),),
                  start=idx)
    return m, idx


def test_init_hook_prepends_to_existing_start():
    m, _ = _guest_a()
    m, st = _with_start_function(m)
    out, s = instrument(m)
    assert out.start == st + 1
    assert out.body(out.start).instrs[0] == I("call", s.injected_func_indices[0])


def test_init_hook_export():
    m, _ = _guest_a()
    out, s = instrument(m, SspConfig(init_hook=InitHook.PREPEND_TO_EXPORT))
    assert out.start is None
    start = out.export("_start").index
    assert out.body(start).instrs[0] == I("call", s.injected_func_indices[0])
    outcome = run_module(out, RandomSource.fail())
    assert outcome.category is Category.STARTUP_ABORT


def test_init_hook_without_target():
    m, _ = _guest_a()
    m = m.replace(exports=tuple(e for e in m.exports if e.name != "_start"))
    with pytest.raises(SspError):
        instrument(m, SspConfig(init_hook=InitHook.PREPEND_TO_EXPORT))


def test_config_validation():
    with pytest.raises(ValueError):
        SspConfig(canary_slot_bytes=8)
    with pytest.raises(ValueError):
        SspConfig(heuristic_threshold=-1)
    assert SspConfig(mode="heuristic").mode is SelectionMode.HEURISTIC


def test_wider_canary_slot():
    m, _ = _guest_a(0)
    out, _ = instrument(m, SspConfig(canary_slot_bytes=32))
    assert _body_of(out, "vuln")[1] == I("i32.const", 64)
    assert run_module(out).category is Category.SILENT


def _debug_session(module, random):
    sess = Session(RunSpec(encode(module), random=random))
    sess.instantiate()
    return sess


def test_fixed_entropy_guard_value():
    m, _ = _guest_a(0)
    out, _ = instrument(m, SspConfig(debug_export=True))
    assert out.export(DEBUG_GUARD_EXPORT, "global") is not None
    sess = _debug_session(out, RandomSource.fixed(DEADBEEF))
    assert sess.debug_guard() == 0xEFBEADDE


@pytest.mark.parametrize("wipe", [True, False])
def test_scratch_wipe(wipe):
    m, tpl = _guest_a(0)
    out, _ = instrument(m, SspConfig(debug_export=True, wipe_scratch=wipe))
    sess = _debug_session(out, RandomSource.fixed(DEADBEEF))
    sp = tpl.ground_truth["sp_initial"]
    scratch = sess.read_memory(sp - SCRATCH_BYTES, sp - SCRATCH_BYTES + 4)
    assert scratch == (bytes(4) if wipe else DEADBEEF)


def test_fail_random_aborts_before_output():
    m, _ = _guest_a(0)
    out, _ = instrument(m)
    outcome = run_module(out, RandomSource.fail())
    assert outcome.category is Category.STARTUP_ABORT
    assert outcome.stdout == b""
    assert outcome.symbol == "__ssp_init"


def test_inject_fault_random():
    m, _ = _guest_a(0)
    out, _ = instrument(m)
    faulty = inject_fault_random(out)
    assert faulty.find_import("wasi_snapshot_preview1", "random_get") is None
    stub = faulty.func_index_by_name(FAULT_STUB_NAME)
    assert faulty.func_type(stub) == RANDOM_GET_TYPE
    assert faulty.body(stub).instrs == (I("i32.const", 1), END)
    assert validate(faulty) == [] and engine_validate(encode(faulty)) is None
    assert run_module(faulty).category is Category.STARTUP_ABORT


def test_inject_requires_import():
    m, _ = _guest_a(0)
    with pytest.raises(ImportNotFound):
        inject_fault_random(m)


# legacy baseline


def test_legacy_guard_slot_and_fallback():
    m, tpl = _guest_a(0, corpus.Layout.NO_STACK_FIRST)
    slot = tpl.ground_truth["guard_slot"]
    out, s = legacy_instrument(m, SspConfig(legacy_guard_address=slot, debug_export=True))
    assert s.guard_address == slot == 1024 and s.guard_global_index is None
    assert out.export(DEBUG_GUARD_ADDR_EXPORT, "global") is not None
    vuln = _body_of(out, "vuln")
    assert (I("i32.const", slot), I("i32.load", 2, 0)) == vuln[6:8]
    faulty = inject_fault_random(out)
    outcome = run_module(faulty)
    assert outcome.category is Category.SILENT
    # 1024 * 1103515245 = 1129999610880; minus 263 * 2**32
    assert outcome.guard == 1129999610880 - 263 * 2**32 == 0x1939B400


def test_legacy_default_slot_after_data():
    m, tpl = _guest_a(0, corpus.Layout.NO_STACK_FIRST)
    _, s = legacy_instrument(m)
    assert s.guard_address == tpl.ground_truth["data_range"][1]


def test_legacy_slot_overlap_rejected():
    m, tpl = _guest_a(0, corpus.Layout.NO_STACK_FIRST)
    with pytest.raises(SspError):
        legacy_instrument(m, SspConfig(legacy_guard_address=tpl.ground_truth["data_range"][0]))
    with pytest.raises(SspError):
        legacy_instrument(m, SspConfig(legacy_guard_address=10 * 65536))


def test_legacy_and_hardened_outputs_match_on_benign(benign_nsf):
    for m, tpl in benign_nsf:
        outs = {f: run_module(corpus.build_flavor(m, tpl, f)) for f in corpus.FLAVORS}
        stdouts = {o.stdout for o in outs.values()}
        assert len(stdouts) == 1 and stdouts.pop().decode() == tpl.stdout, tpl.name
