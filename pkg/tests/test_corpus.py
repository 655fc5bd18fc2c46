import dataclasses
import json

import jsonschema
import pytest

from wssp import corpus
from wssp.harness import Category, engine_validate
from wssp.layout import Layout, classify_layout, detect_frames
from wssp.wasm import encode

from conftest import load_schema


def test_corpus_shape(full_corpus):
    names = [tpl.name for _, tpl in full_corpus]
    assert len(names) == len(set(names)) == 33
    assert "guest_a_sf_b16_len33" in names and "guest_b_nsf_41414141" in names


@pytest.mark.parametrize("flavor", corpus.FLAVORS)
def test_every_build_is_engine_valid(full_corpus, flavor):
    for m, tpl in full_corpus:
        built = corpus.build_flavor(m, tpl, flavor)
        assert engine_validate(encode(built)) is None, tpl.name
        for mode in tpl.expected[flavor]:
            assert engine_validate(encode(corpus.mode_build(built, mode)[0])) is None


def test_generation_is_deterministic(full_corpus):
    again = corpus.generate_corpus()
    assert [encode(m) for m, _ in again] == [encode(m) for m, _ in full_corpus]
    assert [t.to_json() for _, t in again] == [t.to_json() for _, t in full_corpus]


def test_ground_truth_matches_analysis(full_corpus):
    for m, tpl in full_corpus:
        gt = tpl.ground_truth
        rep = classify_layout(m)
        assert rep.sp_global == gt["sp_global"], tpl.name
        assert rep.sp_initial == gt["sp_initial"] == corpus.SP_INITIAL
        assert rep.layout is tpl.layout
        assert list(rep.data_range) == list(gt["data_range"])
        frames = {m.func_name(f.func_index): f for f in detect_frames(m, rep.sp_global)
                  if f.recognized}
        for fname, size in gt.get("frame_sizes", {}).items():
            if size == 0:
                assert fname not in frames
                continue
            assert frames[fname].frame_size == size
            assert len(frames[fname].epilogue_sites) == gt["epilogues"][fname]


def test_guest_a_frame_and_naming():
    m, tpl = corpus.gen_guest_A(16, 40, Layout.NO_STACK_FIRST)
    assert tpl.name == "guest_a_nsf_b16_len40"
    assert tpl.parameters["frame_size"] == 32
    assert corpus.gen_guest_A(17)[1].parameters["frame_size"] == 48
    for bad in ({"buffer": 0}, {"overflow_len": -1}):
        with pytest.raises(ValueError):
            corpus.gen_guest_A(**bad)


@pytest.mark.parametrize("length, hardened", [(0, "Silent"), (32, "Silent"),
                                              (33, "SspFault"), (64, "SspFault")])
def test_guest_a_expectations(length, hardened):
    _, tpl = corpus.gen_guest_A(16, length)
    assert tpl.expected["hardened"]["fixed"] == hardened
    assert tpl.expected["none"] == {"fixed": "Silent", "fail": "Silent"}


def test_guest_b_expectations():
    sf = corpus.gen_guest_B_bypass()[1].expected
    nsf = corpus.gen_guest_B_bypass(layout=Layout.NO_STACK_FIRST)[1].expected
    assert sf["legacy"]["fixed"] == "Silent" and sf["hardened"]["fixed"] == "SspFault"
    assert nsf["legacy"]["fixed"] == "SspFault" and nsf["hardened"]["fixed"] == "SspFault"


def test_manifest_round_trip(tmp_path, full_corpus):
    path = corpus.write_corpus(tmp_path)
    jsonschema.validate(json.loads(path.read_text()), load_schema("corpus_manifest.schema.json"))
    loaded = corpus.load_corpus(tmp_path)
    assert [t for _, t in loaded] == [t for _, t in full_corpus]
    assert [encode(m) for m, _ in loaded] == [encode(m) for m, _ in full_corpus]


def test_empty_directory(tmp_path):
    assert corpus.load_corpus(tmp_path) == []
    assert corpus.evaluate([]).mismatches == []


def test_unknown_flavor_and_mode():
    m, tpl = corpus.gen_guest_A()
    with pytest.raises(ValueError):
        corpus.build_flavor(m, tpl, "shadow")
    with pytest.raises(ValueError):
        corpus.mode_build(m, "sometimes")


def test_layout_fixtures():
    for layout in Layout:
        assert classify_layout(corpus.gen_layout_fixture(layout)).layout is layout


def test_sabotaged_expectation_is_one_mismatch():
    m, tpl = corpus.gen_guest_A(16, 40)
    expected = {f: dict(c) for f, c in tpl.expected.items()}
    assert expected["hardened"]["fixed"] == Category.SSP_FAULT.value
    expected["hardened"]["fixed"] = Category.SILENT.value
    report = corpus.evaluate([(m, dataclasses.replace(tpl, expected=expected))])
    assert len(report.mismatches) == 1
    assert "[hardened/fixed]" in report.mismatches[0] and "got SspFault" in report.mismatches[0]


def test_stdout_mismatch_detected(benign_nsf):
    m, tpl = benign_nsf[0]
    report = corpus.evaluate([(m, dataclasses.replace(tpl, stdout="nope"))])
    # every Silent cell checks stdout; hardened fail/inject abort instead
    assert len(report.mismatches) == 2 + 3 + 1
    assert all("stdout" in line for line in report.mismatches)


def test_full_matrix_has_no_mismatch(full_corpus):
    report = corpus.evaluate(full_corpus, jobs=4)
    assert report.mismatches == []
    assert len(report.runs) == 33 * 8
