"""Run WASI preview 1 guests under wasmtime and classify how they end.

The WASI surface is implemented here rather than taken from wasmtime's
built-in WASI so that ``random_get`` can be pinned, failed or left to host
entropy, and so stdout can be captured per run.  Provided calls:
``random_get``, ``fd_write``, ``fd_read`` (stdin only), ``proc_exit``,
``args_*``, ``environ_*`` and ``clock_time_get``.  Every other
``wasi_snapshot_preview1`` import answers ``ENOSYS``; imports from other
modules are satisfied by no-op stubs returning zeros.

Outcome categories:

Silent        the entry point returned or called ``proc_exit``
SspFault      trapped inside the canary failure function
StartupAbort  trapped inside the SSP initialiser before any stdout output
Timeout       wall-clock limit (epoch interruption) or fuel exhausted
MemoryFault   any other engine trap: out-of-bounds access, ``unreachable``
              outside the SSP symbols, stack exhaustion, ...
"""

from __future__ import annotations

import enum
import json
import multiprocessing
import os
import struct
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import wasmtime as wt

FUEL_ENV = "WSSP_ENGINE_FUEL"
DEFAULT_TIMEOUT = 20.0

ERRNO_SUCCESS = 0
ERRNO_BADF = 8
ERRNO_FAULT = 21
ERRNO_INVAL = 28
ERRNO_NOSYS = 52
RANDOM_FAIL_ERRNO = 1


class Category(str, enum.Enum):
    SILENT = "Silent"
    MEMORY_FAULT = "MemoryFault"
    SSP_FAULT = "SspFault"
    TIMEOUT = "Timeout"
    STARTUP_ABORT = "StartupAbort"


class EngineReject(Exception):
    """The engine refused to compile or link the module."""


class HarnessError(Exception):
    pass


class _ProcExit(Exception):
    def __init__(self, code):
        super().__init__(code)
        self.code = code


class _GuestMemoryError(Exception):
    pass


@dataclass(frozen=True)
class RandomSource:
    kind: str = "host"  # "host" | "fixed" | "fail"
    data: bytes = b""

    def __post_init__(self):
        if self.kind not in ("host", "fixed", "fail"):
            raise ValueError("unknown random source %r" % self.kind)
        if self.kind == "fixed" and len(self.data) < 4:
            raise ValueError("fixed entropy needs at least 4 bytes")

    @classmethod
    def host(cls):
        return cls("host")

    @classmethod
    def fixed(cls, data):
        return cls("fixed", bytes(data))

    @classmethod
    def fail(cls):
        return cls("fail")

    @classmethod
    def parse(cls, text):
        """Parse ``host``, ``fail`` or ``fixed:HEX``."""
        if text in ("host", "fail"):
            return cls(text)
        if text.startswith("fixed:"):
            try:
                return cls.fixed(bytes.fromhex(text[len("fixed:"):]))
            except ValueError as exc:
                raise ValueError("bad fixed entropy %r: %s" % (text, exc)) from None
        raise ValueError("random source must be host, fail or fixed:HEX, got %r" % text)

    def __str__(self):
        return "fixed:%s" % self.data.hex().upper() if self.kind == "fixed" else self.kind


@dataclass(frozen=True)
class RunSpec:
    module: bytes
    random: RandomSource = RandomSource()
    timeout: float = DEFAULT_TIMEOUT
    stdin: bytes = b""
    argv: tuple = ("guest",)
    env: tuple = ()  # ("KEY=VALUE", ...)
    entry: str = "_start"
    fail_func_name: str = "__stack_chk_fail"
    init_func_name: str = "__ssp_init"
    fuel: Optional[int] = None  # None: take WSSP_ENGINE_FUEL if set

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class RunOutcome:
    category: Category
    duration: float
    exit_code: Optional[int] = None
    stdout: bytes = b""
    stderr: bytes = b""
    trap_kind: Optional[str] = None
    symbol: Optional[str] = None
    guard: Optional[int] = None
    message: str = ""

    def to_json(self):
        return {
            "outcome": self.category.value,
            "duration_ms": round(self.duration * 1000, 3),
            "exit_code": self.exit_code,
            "stdout": self.stdout.decode("utf-8", "replace"),
            "trap_kind": self.trap_kind,
            "symbol": self.symbol,
            "guard": self.guard,
        }


class _Wasi:
    """Host side of the WASI calls for one run."""

    def __init__(self, spec: RunSpec):
        self.spec = spec
        self.stdout = bytearray()
        self.stderr = bytearray()
        self.stdin = bytes(spec.stdin)
        self.stdin_pos = 0
        self._fixed_pos = 0
        self._clock0 = time.monotonic_ns()

    # memory helpers

    @staticmethod
    def _mem(caller):
        mem = caller.get("memory")
        if not isinstance(mem, wt.Memory):
            raise _GuestMemoryError("guest exports no memory")
        return mem

    def _read(self, caller, ptr, n):
        mem = self._mem(caller)
        if ptr < 0 or n < 0 or ptr + n > mem.data_len(caller):
            raise _GuestMemoryError("read out of bounds")
        return bytes(mem.read(caller, ptr, ptr + n))

    def _write(self, caller, ptr, data):
        mem = self._mem(caller)
        if ptr < 0 or ptr + len(data) > mem.data_len(caller):
            raise _GuestMemoryError("write out of bounds")
        mem.write(caller, data, ptr)

    def _u32(self, caller, ptr):
        return struct.unpack("<I", self._read(caller, ptr, 4))[0]

    # WASI calls; memory faults map to EFAULT

    def _guarded(fn):
        def wrapper(self, caller, *args):
            try:
                return fn(self, caller, *args)
            except _GuestMemoryError:
                return ERRNO_FAULT
        wrapper.__name__ = fn.__name__
        return wrapper

    @_guarded
    def random_get(self, caller, buf, buf_len):
        src = self.spec.random
        if src.kind == "fail":
            return RANDOM_FAIL_ERRNO
        if src.kind == "host":
            data = os.urandom(buf_len)
        else:
            pool = src.data
            data = bytes(pool[(self._fixed_pos + i) % len(pool)] for i in range(buf_len))
            self._fixed_pos += buf_len
        self._write(caller, buf, data)
        return ERRNO_SUCCESS

    @_guarded
    def fd_write(self, caller, fd, iovs, iovs_len, nwritten):
        if fd not in (1, 2):
            return ERRNO_BADF
        total = 0
        for i in range(iovs_len):
            ptr = self._u32(caller, iovs + 8 * i)
            ln = self._u32(caller, iovs + 8 * i + 4)
            chunk = self._read(caller, ptr, ln)
            (self.stdout if fd == 1 else self.stderr).extend(chunk)
            total += ln
        self._write(caller, nwritten, struct.pack("<I", total))
        return ERRNO_SUCCESS

    @_guarded
    def fd_read(self, caller, fd, iovs, iovs_len, nread):
        if fd != 0:
            return ERRNO_BADF
        total = 0
        for i in range(iovs_len):
            ptr = self._u32(caller, iovs + 8 * i)
            ln = self._u32(caller, iovs + 8 * i + 4)
            chunk = self.stdin[self.stdin_pos:self.stdin_pos + ln]
            self._write(caller, ptr, chunk)
            self.stdin_pos += len(chunk)
            total += len(chunk)
            if len(chunk) < ln:
                break
        self._write(caller, nread, struct.pack("<I", total))
        return ERRNO_SUCCESS

    def proc_exit(self, caller, code):
        raise _ProcExit(code)

    def _strings(self, items):
        return [s.encode("utf-8") + b"\0" for s in items]

    @_guarded
    def _sizes(self, caller, items, count_ptr, size_ptr):
        enc = self._strings(items)
        self._write(caller, count_ptr, struct.pack("<I", len(enc)))
        self._write(caller, size_ptr, struct.pack("<I", sum(len(s) for s in enc)))
        return ERRNO_SUCCESS

    @_guarded
    def _fill(self, caller, items, ptrs, buf):
        for i, s in enumerate(self._strings(items)):
            self._write(caller, ptrs + 4 * i, struct.pack("<I", buf))
            self._write(caller, buf, s)
            buf += len(s)
        return ERRNO_SUCCESS

    def args_sizes_get(self, caller, a, b):
        return self._sizes(caller, self.spec.argv, a, b)

    def args_get(self, caller, a, b):
        return self._fill(caller, self.spec.argv, a, b)

    def environ_sizes_get(self, caller, a, b):
        return self._sizes(caller, self.spec.env, a, b)

    def environ_get(self, caller, a, b):
        return self._fill(caller, self.spec.env, a, b)

    @_guarded
    def clock_time_get(self, caller, clock_id, precision, out):
        if clock_id not in (0, 1):
            return ERRNO_INVAL
        now = time.time_ns() if clock_id == 0 else time.monotonic_ns() - self._clock0
        self._write(caller, out, struct.pack("<Q", now))
        return ERRNO_SUCCESS

    del _guarded


_WASI_CALLS = {
    "random_get", "fd_write", "fd_read", "proc_exit", "args_sizes_get", "args_get",
    "environ_sizes_get", "environ_get", "clock_time_get",
}

_VALTYPES = {
    "i32": wt.ValType.i32, "i64": wt.ValType.i64, "f32": wt.ValType.f32, "f64": wt.ValType.f64,
}


def _zero_results(ft):
    results = [0.0 if str(r) in ("f32", "f64") else 0 for r in ft.results]
    if not results:
        return None
    return results[0] if len(results) == 1 else results


class Session:
    """One isolated engine, store and instance for a guest module."""

    def __init__(self, spec: RunSpec):
        self.spec = spec
        cfg = wt.Config()
        cfg.epoch_interruption = True
        fuel = spec.fuel
        if fuel is None and os.environ.get(FUEL_ENV):
            fuel = int(os.environ[FUEL_ENV])
        cfg.consume_fuel = fuel is not None
        self.engine = wt.Engine(cfg)
        self.store = wt.Store(self.engine)
        if fuel is not None:
            self.store.set_fuel(fuel)
        try:
            self.module = wt.Module(self.engine, spec.module)
        except wt.WasmtimeError as exc:
            raise EngineReject(str(exc)) from None
        self.wasi = _Wasi(spec)
        self.instance = None

    def _imports(self):
        out = []
        for imp in self.module.imports:
            ty = imp.type
            if not isinstance(ty, wt.FuncType):
                raise EngineReject("unsupported import %s.%s" % (imp.module, imp.name))
            if imp.module == "wasi_snapshot_preview1" and imp.name in _WASI_CALLS:
                fn = getattr(self.wasi, imp.name)
            elif imp.module == "wasi_snapshot_preview1":
                fn = self._stub(ty, ERRNO_NOSYS)
            else:
                fn = self._stub(ty, None)
            out.append(wt.Func(self.store, ty, fn, access_caller=True))
        return out

    @staticmethod
    def _stub(ty, errno):
        zero = _zero_results(ty)

        def stub(caller, *args):
            if errno is not None and zero == 0:
                return errno
            return zero
        return stub

    def instantiate(self):
        self.store.set_epoch_deadline(1)
        self.instance = wt.Instance(self.store, self.module, self._imports())
        return self.instance

    def export(self, name):
        if self.instance is None:
            return None
        return self.instance.exports(self.store).get(name)

    def read_memory(self, lo, hi):
        mem = self.export("memory")
        return bytes(mem.read(self.store, lo, hi))

    def debug_guard(self):
        """Guard value exposed by a debug build, else None."""
        g = self.export("__ssp_debug_guard")
        if isinstance(g, wt.Global):
            return g.value(self.store) & 0xFFFFFFFF
        g = self.export("__ssp_debug_guard_addr")
        if isinstance(g, wt.Global):
            addr = g.value(self.store) & 0xFFFFFFFF
            return struct.unpack("<I", self.read_memory(addr, addr + 4))[0]
        return None

    def execute(self) -> RunOutcome:
        """Instantiate (running any start function), then call the entry."""
        spec = self.spec
        timer = threading.Timer(spec.timeout, self.engine.increment_epoch)
        timer.daemon = True
        t0 = time.monotonic()
        timer.start()
        try:
            try:
                self.instantiate()
                entry = self.export(spec.entry)
                if not isinstance(entry, wt.Func):
                    raise EngineReject("module exports no function %r" % spec.entry)
                entry(self.store)
                exit_code = 0
            except _ProcExit as exc:
                exit_code = exc.code
            except wt.Trap as trap:
                return self._classify_trap(trap, time.monotonic() - t0)
            except wt.WasmtimeError as exc:
                raise EngineReject(str(exc)) from None
        finally:
            timer.cancel()
        return RunOutcome(
            Category.SILENT, time.monotonic() - t0, exit_code=exit_code,
            stdout=bytes(self.wasi.stdout), stderr=bytes(self.wasi.stderr),
            guard=self._safe_guard())

    def _safe_guard(self):
        try:
            return self.debug_guard()
        except (wt.WasmtimeError, struct.error):
            return None

    def _classify_trap(self, trap, duration):
        code = trap.trap_code
        kind = code.name.lower() if code is not None else "unknown"
        symbol = next((f.func_name for f in trap.frames if f.func_name), None)
        stdout = bytes(self.wasi.stdout)
        if code in (wt.TrapCode.INTERRUPT, wt.TrapCode.OUT_OF_FUEL):
            category = Category.TIMEOUT
        elif symbol == self.spec.fail_func_name:
            category = Category.SSP_FAULT
        elif symbol == self.spec.init_func_name and not stdout:
            category = Category.STARTUP_ABORT
        else:
            category = Category.MEMORY_FAULT
        return RunOutcome(
            category, duration, stdout=stdout, stderr=bytes(self.wasi.stderr),
            trap_kind=kind, symbol=symbol, guard=self._safe_guard(),
            message=trap.message.strip().splitlines()[-1] if trap.message else "")


def run(spec: RunSpec) -> RunOutcome:
    """Execute one guest in a fresh engine instance and classify the result."""
    try:
        return Session(spec).execute()
    except (EngineReject, HarnessError):
        raise
    except Exception as exc:  # host-side failure, never a guest outcome
        raise HarnessError("%s: %s" % (type(exc).__name__, exc)) from exc


def engine_validate(module_bytes) -> Optional[str]:
    """None if wasmtime accepts the module, else the engine's message."""
    try:
        wt.Module.validate(wt.Engine(), module_bytes)
    except wt.WasmtimeError as exc:
        return str(exc)
    return None


# ---------------------------------------------------------------------------
# matrices


@dataclass(frozen=True)
class MatrixEntry:
    name: str
    spec: RunSpec
    flavor: str = "none"
    mode: Optional[str] = None


@dataclass(frozen=True)
class RunRecord:
    name: str
    flavor: str
    mode: Optional[str]
    outcome: Optional[RunOutcome]
    error: Optional[str] = None

    @property
    def category(self):
        return "Error" if self.outcome is None else self.outcome.category.value

    def to_json(self):
        out = {
            "name": self.name,
            "flavor": self.flavor,
            "mode": self.mode,
            "outcome": self.category,
            "duration_ms": None if self.outcome is None else round(self.outcome.duration * 1000, 3),
        }
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class EvalReport:
    runs: list = field(default_factory=list)
    mismatches: list = field(default_factory=list)  # filled by the corpus evaluator

    @property
    def summary(self):
        out = {}
        for r in self.runs:
            cats = out.setdefault(r.flavor, {})
            cats[r.category] = cats.get(r.category, 0) + 1
        return out

    def to_json(self):
        out = {"runs": [r.to_json() for r in self.runs], "summary": self.summary}
        if self.mismatches:
            out["mismatches"] = list(self.mismatches)
        return out

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_table(self):
        cats = [c.value for c in Category] + (
            ["Error"] if any(r.outcome is None for r in self.runs) else [])
        summary = self.summary
        rows = [["flavor"] + cats + ["total"]]
        for flavor in sorted(summary):
            counts = summary[flavor]
            rows.append([flavor] + [str(counts.get(c, 0)) for c in cats]
                        + [str(sum(counts.values()))])
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        return "\n".join(
            "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                      for i, (cell, w) in enumerate(zip(row, widths)))
            for row in rows)


def _run_entry(entry):
    try:
        return RunRecord(entry.name, entry.flavor, entry.mode, run(entry.spec))
    except (EngineReject, HarnessError) as exc:
        return RunRecord(entry.name, entry.flavor, entry.mode, None,
                         "%s: %s" % (type(exc).__name__, exc))


def run_matrix(entries, jobs: int = 1) -> EvalReport:
    """Run every entry; a failing entry is recorded, never fatal.

    ``entries`` holds :class:`MatrixEntry` values or ``(name, RunSpec)`` pairs.
    """
    entries = [e if isinstance(e, MatrixEntry) else MatrixEntry(*e) for e in entries]
    if jobs > 1:
        # wasmtime-py keeps host callbacks in a process-global table that is
        # not thread safe, so parallel runs use worker processes
        with ProcessPoolExecutor(max_workers=jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            records = list(pool.map(_run_entry, entries))
    else:
        records = [_run_entry(e) for e in entries]
    return EvalReport(records)
