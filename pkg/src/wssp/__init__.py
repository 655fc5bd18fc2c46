"""Post-link stack smashing protection and SSP robustness auditing for wasm32/WASI."""

__version__ = "0.1.0"
