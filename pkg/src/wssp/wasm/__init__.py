"""WebAssembly module model: decode, validate, transform, encode."""

from .binary import EncodeOverflow, MalformedModule, decode, encode, encode_instr
from .module import (
    BLOCK_EMPTY,
    PAGE_SIZE,
    CustomSection,
    DataSegment,
    ElementSegment,
    Export,
    FuncBody,
    FuncType,
    GlobalDef,
    GlobalType,
    I,
    Import,
    Instr,
    Limits,
    NameSection,
    TableType,
    WasmModule,
)
from .transform import map_function_indices, remap_function_indices
from .validate import Violation, validate

__all__ = [
    "BLOCK_EMPTY", "PAGE_SIZE", "CustomSection", "DataSegment", "ElementSegment",
    "EncodeOverflow", "Export", "FuncBody", "FuncType", "GlobalDef", "GlobalType", "I",
    "Import", "Instr", "Limits", "MalformedModule", "NameSection", "TableType",
    "Violation", "WasmModule", "decode", "encode", "encode_instr",
    "map_function_indices", "remap_function_indices", "validate",
]
