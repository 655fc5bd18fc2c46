import json
from pathlib import Path

import pytest

from wssp import corpus
from wssp.harness import RandomSource, RunSpec, run
from wssp.wasm import encode

DOCS = Path(__file__).resolve().parent.parent / "docs"

DEADBEEF = bytes.fromhex("DEADBEEF")


def load_schema(name):
    return json.loads((DOCS / name).read_text())


def run_module(m, random=None, timeout=5.0, **kw):
    src = random if random is not None else RandomSource.fixed(corpus.FIXED_ENTROPY)
    return run(RunSpec(encode(m), random=src, timeout=timeout, **kw))


@pytest.fixture(scope="session")
def full_corpus():
    return corpus.generate_corpus()


@pytest.fixture(scope="session")
def benign_nsf():
    return corpus.gen_benign_suite(corpus.Layout.NO_STACK_FIRST)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
