"""End-to-end acceptance criteria, each with its time budget."""

import contextlib
import time

from wssp import corpus
from wssp.audit import audit, check_p3
from wssp.cli import main
from wssp.harness import Category, RandomSource, engine_validate
from wssp.layout import Layout
from wssp.ssp import SspConfig, inject_fault_random, instrument, legacy_instrument
from wssp.wasm import FuncBody, FuncType, I, decode, encode
from wssp.wasm.transform import add_function

from conftest import ACCEPTANCE, run_module

SF, NSF = Layout.STACK_FIRST, Layout.NO_STACK_FIRST
MULTIPLIER = 1103515245


@contextlib.contextmanager
def criterion(n, title, budget=None):
    t0 = time.monotonic()
    ACCEPTANCE[n] = "FAIL  %d  %s" % (n, title)
    yield
    elapsed = time.monotonic() - t0
    if budget is not None:
        assert elapsed < budget, "took %.2fs, budget %ss" % (elapsed, budget)
    ACCEPTANCE[n] = "PASS  %d  %s  (%.2fs)" % (n, title, elapsed)
    print(ACCEPTANCE[n])


def _instrumented(flavor, layout, **cfg):
    m, tpl = corpus.gen_guest_A(16, 0, layout)
    fn = instrument if flavor == "hardened" else legacy_instrument
    return fn(m, SspConfig(legacy_guard_address=tpl.ground_truth["guard_slot"], **cfg))


def test_1_robustness_truth_table():
    with criterion(1, "robustness truth table", 5):
        want = {
            ("legacy", SF): {"P1": "Fail", "P2a": "Fail", "P2b": "Fail", "P3": "Pass"},
            ("legacy", NSF): {"P1": "Fail", "P2a": "Pass", "P2b": "Fail", "P3": "Pass"},
            ("hardened", SF): {"P1": "Pass", "P2a": "Pass", "P2b": "Pass", "P3": "Pass"},
            ("hardened", NSF): {"P1": "Pass", "P2a": "Pass", "P2b": "Pass", "P3": "Pass"},
        }
        got = {}
        for key in want:
            report = audit(_instrumented(*key)[0])
            got[key] = {k: v.status.value for k, v in report.verdicts.items()}
        cells = sum(got[k][p] == want[k][p] for k in want for p in want[k])
        assert cells == 16, got


def test_2_bypass_asymmetry():
    with criterion(2, "guest B bypass: legacy Silent, hardened SspFault", 5):
        m, tpl = corpus.gen_guest_B_bypass(0x41414141, SF)
        fixed = RandomSource.fixed(corpus.FIXED_ENTROPY)
        for _ in range(2):
            legacy = run_module(corpus.build_flavor(m, tpl, "legacy"), fixed)
            hard = run_module(corpus.build_flavor(m, tpl, "hardened"), fixed)
            assert legacy.category is Category.SILENT
            assert legacy.stdout == b"guest B done\n"
            assert hard.category is Category.SSP_FAULT
            assert hard.symbol == "__stack_chk_fail"


def test_3_preamble_abort():
    with criterion(3, "fault-injected preamble", 5):
        for layout in (SF, NSF):
            m, tpl = corpus.gen_benign_suite(layout)[0]
            hard = inject_fault_random(corpus.build_flavor(m, tpl, "hardened"))
            out = run_module(hard)
            assert out.category is Category.STARTUP_ABORT and out.stdout == b""

            slot = tpl.ground_truth["guard_slot"]
            legacy = inject_fault_random(corpus.build_flavor(m, tpl, "legacy", debug_export=True))
            out = run_module(legacy)
            assert out.category is Category.SILENT and out.stdout == tpl.stdout.encode()
            assert out.guard == (slot * MULTIPLIER) % 2**32
        # frozen values for the two corpus slots
        assert (1024 * MULTIPLIER) % 2**32 == 0x1939B400
        assert (65536 * MULTIPLIER) % 2**32 == 0x4E6D0000  # low half of 0x41C64E6D, shifted


def test_4_detection_boundary():
    with criterion(4, "guest A sweep over overflow_len 0..64", 30):
        wrong = []
        for layout in (SF, NSF):
            for length in range(65):
                m, tpl = corpus.gen_guest_A(16, length, layout)
                frame = tpl.parameters["frame_size"]
                canary = range(frame, frame + 4)  # offsets from the buffer start
                covers = any(b < length for b in canary)
                hard = run_module(corpus.build_flavor(m, tpl, "hardened")).category
                none = run_module(m).category
                if hard is not (Category.SSP_FAULT if covers else Category.SILENT):
                    wrong.append(("hardened", layout.value, length, hard.value))
                if none is not Category.SILENT:
                    wrong.append(("none", layout.value, length, none.value))
        assert wrong == []


def test_5_behaviour_preservation(full_corpus):
    with criterion(5, "benign stdout identical across flavors, round-trip fixpoint", 30):
        for layout in (SF, NSF):
            suite = corpus.gen_benign_suite(layout)
            assert len(suite) >= 5
            for m, tpl in suite:
                outs = [run_module(corpus.build_flavor(m, tpl, f)) for f in corpus.FLAVORS]
                assert {(o.category, o.stdout, o.exit_code) for o in outs} \
                    == {(Category.SILENT, tpl.stdout.encode(), 0)}, tpl.name
        for m, tpl in full_corpus:
            for f in corpus.FLAVORS:
                blob = encode(corpus.build_flavor(m, tpl, f))
                assert encode(decode(blob)) == blob


def test_6_entropy_plumbing():
    with criterion(6, "host guards differ, fixed guard is LE of first 4 bytes"):
        debug = _instrumented("hardened", NSF, debug_export=True)[0]
        a = run_module(debug, RandomSource.host()).guard
        b = run_module(debug, RandomSource.host()).guard
        assert a is not None and b is not None and a != b
        for seed in (bytes.fromhex("DEADBEEF"), bytes.fromhex("0102030405060708")):
            guard = run_module(debug, RandomSource.fixed(seed)).guard
            assert guard == int.from_bytes(seed[:4], "little")
        assert run_module(debug, RandomSource.fixed(bytes.fromhex("DEADBEEF"))).guard == 0xEFBEADDE


def test_7_p3_metamorphic():
    with criterion(7, "call before unreachable flips P3"):
        hard, summary = _instrumented("hardened", SF)
        assert check_p3(hard).status.value == "Pass"
        hard, logger = add_function(hard, hard.types.index(FuncType()), FuncBody((), (I("nop"), I("end"))))
        fail = summary.injected_func_indices[1]
        body = hard.body(fail)
        at = [ins.op for ins in body.instrs].index("unreachable")
        patched = body.instrs[:at] + (I("call", logger),) + body.instrs[at:]
        code = list(hard.code)
        code[fail - hard.num_imported_funcs] = FuncBody(body.locals, patched)
        mutated = hard.replace(code=tuple(code))
        assert engine_validate(encode(mutated)) is None
        assert check_p3(mutated).status.value == "Fail"


def test_8_validity_gate(full_corpus, tmp_path, capsys):
    with criterion(8, "emitted modules validate, eval exits 0", 120):
        for m, tpl in full_corpus:
            for f in corpus.FLAVORS:
                built = corpus.build_flavor(m, tpl, f)
                assert engine_validate(encode(built)) is None, (tpl.name, f)
                for mode in tpl.expected[f]:
                    assert engine_validate(encode(corpus.mode_build(built, mode)[0])) is None
        code = main(["eval", "--corpus", str(tmp_path), "--generate", "--jobs", "4"])
        out, err = capsys.readouterr()
        assert "MISMATCH" not in err
        assert code == 0
