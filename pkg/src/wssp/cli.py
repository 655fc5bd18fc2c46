"""``wssp`` command line.

Exit codes
----------
instrument    0 ok, 1 error, 4 ambiguous stack pointer without ``--sp-global``
audit         0 all Pass, 2 any Fail, 3 Unknown but no Fail, 1 unreadable input
analyze       0 ok, 1 unreadable input
run           0 Silent, 10 SspFault, 11 MemoryFault, 12 Timeout, 13 StartupAbort,
              1 engine rejection or host error
fault-inject  0 ok, 1 error
eval          0 no expectation mismatch, 2 mismatches, 1 error

Usage errors exit 1.  Machine-readable output goes to stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__, audit as auditor, corpus, harness
from .harness import Category
from .layout import AmbiguousStackPointer, classify_layout, detect_frames, find_stack_pointer
from .ssp import SelectionMode, SspConfig, SspError, inject_fault_random, instrument, legacy_instrument
from .wasm.binary import MalformedModule, decode, encode

log = logging.getLogger("wssp")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISMATCH = 2
EXIT_AMBIGUOUS_SP = 4

RUN_EXIT = {
    Category.SILENT: 0,
    Category.SSP_FAULT: 10,
    Category.MEMORY_FAULT: 11,
    Category.TIMEOUT: 12,
    Category.STARTUP_ABORT: 13,
}


class CliError(Exception):
    def __init__(self, message, code=EXIT_ERROR):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("%s: %s" % (self.prog, message))


def _dump(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_module(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError("cannot read %s: %s" % (path, exc.strerror)) from None
    try:
        return decode(data)
    except MalformedModule as exc:
        raise CliError("%s: %s" % (path, exc)) from None


def _write_bytes(path, data):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError("cannot write %s: %s" % (path, exc.strerror)) from None


def _emit(out_path, m):
    data = encode(m)
    err = harness.engine_validate(data)
    if err is not None:
        raise CliError("refusing to write a module the engine rejects: %s" % err)
    _write_bytes(out_path, data)


# ---------------------------------------------------------------------------
# subcommands


def cmd_instrument(args):
    m = _read_module(args.input)
    sp = args.sp_global
    if sp is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sp = find_stack_pointer(m)
        if sp is None and any(issubclass(w.category, AmbiguousStackPointer) for w in caught):
            raise CliError("%s; pass --sp-global" % caught[0].message, EXIT_AMBIGUOUS_SP)
    elif not 0 <= sp < m.num_globals:
        raise CliError("--sp-global %d out of range (%d globals)" % (sp, m.num_globals))
    cfg = SspConfig(
        mode=args.mode,
        heuristic_threshold=args.threshold if args.threshold is not None else 8,
        debug_export=args.debug_export,
        init_hook=args.init_hook,
        legacy_guard_address=args.guard_address,
    )
    fn = instrument if args.flavor == "hardened" else legacy_instrument
    try:
        out, summary = fn(m, cfg, sp=sp)
    except (SspError, ValueError) as exc:
        raise CliError(str(exc)) from None
    _emit(args.output, out)
    log.info("instrumented %d function(s) -> %s", summary.functions_instrumented, args.output)
    _dump(summary.to_json())
    return EXIT_OK


def _print_audit_text(report):
    print("guard location: %s" % report.guard_location)
    print("layout: %s" % report.layout.layout.value)
    for name, v in report.verdicts.items():
        print("%-4s %-7s %s" % (name, v.status.value, v.rationale))
        for site, desc in v.evidence:
            print("       %s: %s" % (site, desc))


def cmd_audit(args):
    m = _read_module(args.input)
    report = auditor.audit(m)
    if args.json:
        _dump(report.to_json())
    else:
        _print_audit_text(report)
    return report.exit_code


def cmd_analyze(args):
    m = _read_module(args.input)
    report = classify_layout(m, sp=args.sp_global)
    frames = []
    if report.sp_global is not None:
        frames = [{
            "func_index": f.func_index,
            "name": m.func_name(f.func_index),
            "recognized": f.recognized,
            "pattern": f.pattern.value,
            "frame_size": f.frame_size,
            "epilogues": len(f.epilogue_sites),
            "reason": f.reason,
        } for f in detect_frames(m, report.sp_global) if f.touches_sp]
    out = {"layout": report.to_json(), "frames": frames}
    if args.json:
        _dump(out)
    else:
        print("layout: %s" % report.layout.value)
        for line in report.evidence:
            print("  %s" % line)
        for f in frames:
            print("func %-4d %-20s %s" % (
                f["func_index"], f["name"] or "",
                "frame %d, %d epilogue(s), %s" % (f["frame_size"], f["epilogues"], f["pattern"])
                if f["recognized"] else "unrecognized: %s" % f["reason"]))
    return EXIT_OK


def cmd_run(args):
    try:
        data = Path(args.input).read_bytes()
        stdin = Path(args.stdin).read_bytes() if args.stdin else b""
    except OSError as exc:
        raise CliError("cannot read input: %s" % exc) from None
    spec = harness.RunSpec(
        module=data,
        random=args.random,
        timeout=args.timeout_ms / 1000.0,
        stdin=stdin,
        argv=(Path(args.input).name,) + tuple(args.arg),
        env=tuple(args.env),
    )
    try:
        outcome = harness.run(spec)
    except harness.EngineReject as exc:
        raise CliError("engine rejected module: %s" % exc) from None
    except harness.HarnessError as exc:
        raise CliError("harness error: %s" % exc) from None
    _dump(outcome.to_json())
    return RUN_EXIT[outcome.category]


def cmd_fault_inject(args):
    m = _read_module(args.input)
    try:
        out = inject_fault_random(m)
    except SspError as exc:
        raise CliError(str(exc)) from None
    _emit(args.output, out)
    return EXIT_OK


def cmd_eval(args):
    directory = Path(args.corpus)
    if args.generate:
        corpus.write_corpus(directory)
        log.info("wrote corpus to %s", directory)
    try:
        entries = corpus.load_corpus(directory)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("cannot load corpus %s: %s" % (directory, exc)) from None
    log.info("evaluating %d guest(s) with %d job(s)", len(entries), args.jobs)
    report = corpus.evaluate(entries, jobs=args.jobs)
    if args.report:
        try:
            Path(args.report).write_text(report.dumps() + "\n")
        except OSError as exc:
            raise CliError("cannot write report: %s" % exc.strerror) from None
    if args.json:
        sys.stdout.write(report.dumps() + "\n")
    else:
        print(report.to_table())
    if report.mismatches:
        for line in report.mismatches:
            sys.stderr.write("MISMATCH %s\n" % line)
        return EXIT_MISMATCH
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _nonneg(text):
    v = int(text, 0)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive(text):
    v = int(text, 0)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _random_source(text):
    try:
        return harness.RandomSource.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = _Parser(prog="wssp", description="Stack canaries for wasm32 modules: instrument, audit, run.")
    p.add_argument("--version", action="version", version="wssp %s" % __version__)
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    p.add_argument("-q", "--quiet", action="store_true", help="errors only on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("instrument", help="add stack canaries")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--mode", choices=[m.value for m in SelectionMode], default="all")
    s.add_argument("--threshold", type=_nonneg, help="minimum frame size (heuristic mode only)")
    s.add_argument("--flavor", choices=["hardened", "legacy"], default="hardened")
    s.add_argument("--sp-global", type=_nonneg, help="stack pointer global index override")
    s.add_argument("--debug-export", action="store_true", help="export the guard for inspection")
    s.add_argument("--init-hook", choices=["start-section", "prepend-to-start", "prepend-to-export"],
                   default="start-section")
    s.add_argument("--guard-address", type=_nonneg, help="legacy guard slot address (legacy only)")
    s.set_defaults(func=cmd_instrument)

    s = sub.add_parser("audit", help="check P1/P2a/P2b/P3 statically")
    s.add_argument("input")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("analyze", help="report stack pointer, frames and memory layout")
    s.add_argument("input")
    s.add_argument("--sp-global", type=_nonneg)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("run", help="execute a guest and classify the outcome")
    s.add_argument("input")
    s.add_argument("--random", type=_random_source, default=harness.RandomSource.host(),
                   metavar="host|fail|fixed:HEX")
    s.add_argument("--timeout-ms", type=_positive, default=int(harness.DEFAULT_TIMEOUT * 1000))
    s.add_argument("--stdin", metavar="FILE")
    s.add_argument("--arg", action="append", default=[], help="extra guest argv entry")
    s.add_argument("--env", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("fault-inject", help="replace random_get by a stub returning errno 1")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_fault_inject)

    s = sub.add_parser("eval", help="run the corpus matrix against its expected outcomes")
    s.add_argument("--corpus", required=True, metavar="DIR")
    s.add_argument("--report", metavar="FILE")
    s.add_argument("--generate", action="store_true", help="(re)write the corpus into DIR first")
    s.add_argument("--jobs", type=_positive, default=1)
    s.add_argument("--json", action="store_true", help="print the report instead of the table")
    s.set_defaults(func=cmd_eval)
    return p


def _check_conflicts(args):
    if args.command != "instrument":
        return
    if args.threshold is not None and args.mode != "heuristic":
        raise CliError("--threshold requires --mode heuristic")
    if args.guard_address is not None and args.flavor != "legacy":
        raise CliError("--guard-address requires --flavor legacy")


def _configure_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _check_conflicts(args)
    except CliError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return exc.code
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else
                                              logging.INFO if args.verbose else logging.WARNING)
    _configure_logging(level)
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
