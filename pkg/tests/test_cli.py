import json

import jsonschema
import pytest
import wasmtime as wt

from wssp import corpus
from wssp.cli import main
from wssp.wasm import decode, encode

from conftest import load_schema

# two unnamed globals both used like a stack pointer
AMBIGUOUS = """
(module
  (memory 1)
  (global (mut i32) (i32.const 4096))
  (global (mut i32) (i32.const 8192))
  (func (export "_start")
    (global.set 0 (i32.sub (global.get 0) (i32.const 16)))
    (global.set 0 (i32.add (global.get 0) (i32.const 16)))
    (global.set 1 (i32.sub (global.get 1) (i32.const 16)))
    (global.set 1 (i32.add (global.get 1) (i32.const 16)))))
"""


@pytest.fixture
def guest(tmp_path):
    m, _ = corpus.gen_guest_A(16, 40, corpus.Layout.NO_STACK_FIRST)
    p = tmp_path / "guest.wasm"
    p.write_bytes(encode(m))
    return p


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_instrument_and_run(capsys, tmp_path, guest):
    out_path = tmp_path / "hard.wasm"
    code, out, err = cli(capsys, "instrument", guest, out_path)
    assert code == 0
    summary = json.loads(out)
    jsonschema.validate(summary, load_schema("instrument_summary.schema.json"))
    assert summary["functions_instrumented"] == 1
    decode(out_path.read_bytes())

    code, out, _ = cli(capsys, "run", out_path, "--random", "fixed:01020304")
    assert code == 10
    jsonschema.validate(json.loads(out), load_schema("run_outcome.schema.json"))
    assert json.loads(out)["outcome"] == "SspFault"

    code, out, _ = cli(capsys, "run", guest, "--random", "fixed:01020304")
    assert code == 0 and json.loads(out)["stdout"] == "guest A done\n"


def test_reinstrument_rejected(capsys, tmp_path, guest):
    once = tmp_path / "once.wasm"
    assert cli(capsys, "instrument", guest, once)[0] == 0
    code, out, err = cli(capsys, "instrument", once, tmp_path / "twice.wasm")
    assert code == 1 and out == "" and "error:" in err
    assert not (tmp_path / "twice.wasm").exists()


def test_fault_inject_startup_abort(capsys, tmp_path, guest):
    hard, inj = tmp_path / "h.wasm", tmp_path / "i.wasm"
    cli(capsys, "instrument", guest, hard)
    assert cli(capsys, "fault-inject", hard, inj)[0] == 0
    code, out, _ = cli(capsys, "run", inj)
    assert code == 13 and json.loads(out)["stdout"] == ""
    # nothing to inject into an uninstrumented guest
    assert cli(capsys, "fault-inject", guest, tmp_path / "x.wasm")[0] == 1


def test_run_timeout_and_memory_fault(capsys, tmp_path):
    for gen, code_want, extra in ((corpus.gen_spin, 12, ["--timeout-ms", "100"]),
                                  (corpus.gen_oob, 11, [])):
        p = tmp_path / "g.wasm"
        p.write_bytes(encode(gen()[0]))
        code, out, _ = cli(capsys, "run", p, *extra)
        assert code == code_want


def test_run_rejects_bad_module(capsys, tmp_path):
    p = tmp_path / "bad.wasm"
    p.write_bytes(b"\0asm\x01\0\0\0\x05")
    code, out, err = cli(capsys, "run", p)
    assert code == 1 and out == "" and "engine rejected" in err


def test_audit_exit_codes(capsys, tmp_path, guest):
    legacy, hard = tmp_path / "l.wasm", tmp_path / "h.wasm"
    cli(capsys, "instrument", guest, legacy, "--flavor", "legacy")
    cli(capsys, "instrument", guest, hard)
    code, out, _ = cli(capsys, "audit", hard, "--json")
    assert code == 0
    report = json.loads(out)
    jsonschema.validate(report, load_schema("audit_report.schema.json"))
    assert cli(capsys, "audit", legacy)[0] == 2
    assert cli(capsys, "audit", guest)[0] == 3


def test_analyze(capsys, guest):
    code, out, _ = cli(capsys, "analyze", guest, "--json")
    data = json.loads(out)
    assert code == 0 and data["layout"]["layout"] == "NoStackFirst"
    assert [f["frame_size"] for f in data["frames"]] == [32]
    code, out, _ = cli(capsys, "analyze", guest)
    assert "layout: NoStackFirst" in out


def test_ambiguous_stack_pointer(capsys, tmp_path):
    p = tmp_path / "amb.wasm"
    p.write_bytes(wt.wat2wasm(AMBIGUOUS))
    code, out, err = cli(capsys, "instrument", p, tmp_path / "o.wasm")
    assert code == 4 and "--sp-global" in err
    assert cli(capsys, "instrument", p, tmp_path / "o.wasm", "--sp-global", "1")[0] == 0
    assert cli(capsys, "instrument", p, tmp_path / "o.wasm", "--sp-global", "9")[0] == 1


@pytest.mark.parametrize("argv", [
    ["instrument", "a", "b", "--threshold", "4"],
    ["instrument", "a", "b", "--guard-address", "1024"],
    ["run", "a", "--random", "fixed:12"],
    ["run", "a", "--timeout-ms", "0"],
    ["bogus"],
    [],
])
def test_usage_errors(capsys, argv):
    code, out, err = cli(capsys, *argv)
    assert code == 1 and out == ""


def test_missing_input(capsys, tmp_path):
    code, _, err = cli(capsys, "audit", tmp_path / "nope.wasm")
    assert code == 1 and "cannot read" in err


def test_eval_empty_directory(capsys, tmp_path):
    code, out, _ = cli(capsys, "eval", "--corpus", tmp_path, "--json")
    assert code == 0 and json.loads(out)["runs"] == []


def test_eval_mismatch_exit(capsys, tmp_path):
    m, tpl = corpus.gen_guest_A(16, 40)
    tpl.expected["hardened"]["fixed"] = "Silent"
    corpus.write_corpus(tmp_path, [(m, tpl)])
    report = tmp_path / "report.json"
    code, out, err = cli(capsys, "eval", "--corpus", tmp_path, "--report", report)
    assert code == 2
    assert err.count("MISMATCH") == 1
    data = json.loads(report.read_text())
    jsonschema.validate(data, load_schema("eval_report.schema.json"))
    assert len(data["mismatches"]) == 1


def test_json_output_has_no_logs(capsys, tmp_path, guest):
    code, out, err = cli(capsys, "-v", "instrument", guest, tmp_path / "o.wasm")
    assert code == 0 and "INFO" in err
    json.loads(out)
