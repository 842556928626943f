"""Byte-oriented range coder over quantized cumulative-frequency tables.

The coder is a carry-propagating range coder with a 64-bit state and 16-bit
frequency precision. Renormalization is byte-wise in the LZMA style: the
encoder stages one cache byte plus a run of pending 0xFF bytes so that a
carry out of the 64-bit low register can still propagate into bytes that are
already logically emitted. The stream starts with a single zero byte (the
initial cache) and ends with a fixed 9-byte flush, so an empty symbol
sequence codes to exactly 9 bytes.

Two interchangeable backends implement the same algorithm: the pure-Python
reference coder in this module and an optional native kernel (a Rust cdylib
loaded through ctypes). Both produce byte-identical output for identical
inputs; the native kernel is only a speedup.
"""

from __future__ import annotations

import ctypes
import os
from dataclasses import dataclass, field

import numpy as np

FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS
_MASK64 = (1 << 64) - 1
_TOP = 1 << 56
_FLUSH_BYTES = 9
_CACHE_THRESHOLD = 0xFF << 56


class RangeCoderError(Exception):
    """Base class for range-coder failures."""


class RangeEncodeError(RangeCoderError):
    """A symbol fell outside its table's support."""


class RangeDecodeError(RangeCoderError):
    """The coded stream was exhausted or otherwise unusable.

    Attributes:
        position: Byte offset in the payload at which decoding failed.
    """

    def __init__(self, message: str, position: int = 0):
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class CdfTable:
    """Quantized cumulative frequency table for one symbol distribution.

    Attributes:
        k_min: Integer value of the first symbol bin.
        cdf: Strictly increasing uint32 array of length n+1 for n bins,
            starting at 0 and ending at 2**16.
    """

    k_min: int
    cdf: np.ndarray = field(repr=False)

    def __post_init__(self):
        cdf = np.ascontiguousarray(self.cdf, dtype=np.uint32)
        object.__setattr__(self, "cdf", cdf)
        if cdf.ndim != 1 or cdf.size < 2:
            raise ValueError("cdf must be a 1-D array with at least two entries")
        if cdf[0] != 0 or cdf[-1] != FREQ_TOTAL:
            raise ValueError("cdf must start at 0 and end at 2**16")
        if np.any(np.diff(cdf.astype(np.int64)) <= 0):
            raise ValueError("cdf must be strictly increasing")

    @property
    def n_symbols(self) -> int:
        return self.cdf.size - 1

    @property
    def k_max(self) -> int:
        return self.k_min + self.n_symbols - 1

    def contains(self, k: int) -> bool:
        return self.k_min <= k <= self.k_max


class _ReferenceEncoder:
    """Stateful reference encoder; one instance per stream."""

    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < _CACHE_THRESHOLD or low > _MASK64:
            carry = low >> 64
            out = self.out
            b = self.cache
            for _ in range(self.cache_size):
                out.append((b + carry) & 0xFF)
                b = 0xFF
            self.cache_size = 0
            self.cache = (low >> 56) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & _MASK64

    def encode(self, cum_lo: int, cum_hi: int):
        r = self.range >> FREQ_BITS
        self.low += r * cum_lo
        self.range = r * (cum_hi - cum_lo)
        while self.range < _TOP:
            self._shift_low()
            self.range <<= 8

    def finish(self) -> bytes:
        for _ in range(_FLUSH_BYTES):
            self._shift_low()
        return bytes(self.out)


class _ReferenceDecoder:
    """Stateful reference decoder; one instance per stream."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK64
        self.code = 0
        for _ in range(_FLUSH_BYTES):
            self.code = ((self.code << 8) | self._next_byte()) & _MASK64

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise RangeDecodeError("coded stream exhausted", position=self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cdf: np.ndarray) -> int:
        r = self.range >> FREQ_BITS
        f = self.code // r
        if f >= FREQ_TOTAL:
            f = FREQ_TOTAL - 1  # only reachable on corrupt input
        sym = int(np.searchsorted(cdf, f, side="right")) - 1
        self.code -= r * int(cdf[sym])
        self.range = r * int(cdf[sym + 1] - cdf[sym])
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK64
            self.range <<= 8
        return sym


def _encode_reference(symbols: np.ndarray, tables: list[CdfTable]) -> bytes:
    enc = _ReferenceEncoder()
    for i, (k, table) in enumerate(zip(symbols, tables)):
        idx = int(k) - table.k_min
        if idx < 0 or idx >= table.n_symbols:
            raise RangeEncodeError(
                f"symbol {int(k)} at position {i} outside table support "
                f"[{table.k_min}, {table.k_max}]"
            )
        cdf = table.cdf
        enc.encode(int(cdf[idx]), int(cdf[idx + 1]))
    return enc.finish()


def _decode_reference(data: bytes, tables: list[CdfTable]) -> np.ndarray:
    dec = _ReferenceDecoder(data)
    out = np.empty(len(tables), dtype=np.int64)
    for i, table in enumerate(tables):
        out[i] = dec.decode(table.cdf) + table.k_min
    return out


# ---------------------------------------------------------------------------
# Native backend bridge
# ---------------------------------------------------------------------------

_NATIVE_ENV = "LRCVC_NATIVE_RANGECODER"
_ERR_CAPACITY = 256
_STATUS_MESSAGES = {
    1: "invalid arguments",
    2: "output capacity exceeded",
    3: "symbol outside table support",
    4: "coded stream exhausted",
}

_native_lib = None
_native_checked = False
_backend = "auto"


def _native_candidates():
    env = os.environ.get(_NATIVE_ENV)
    if env:
        yield env
    here = os.path.dirname(os.path.abspath(__file__))
    root = os.path.dirname(os.path.dirname(here))
    for profile in ("release", "debug"):
        yield os.path.join(root, "rangecoder", "target", profile, "liblrc_rangecoder.so")


def _load_native():
    global _native_lib, _native_checked
    if _native_checked:
        return _native_lib
    _native_checked = True
    for path in _native_candidates():
        if not os.path.exists(path):
            continue
        try:
            lib = ctypes.CDLL(path)
        except OSError:
            continue
        lib.lrc_rc_encode.restype = ctypes.c_int32
        lib.lrc_rc_encode.argtypes = [
            ctypes.POINTER(ctypes.c_uint32),  # per-symbol cum_lo
            ctypes.POINTER(ctypes.c_uint32),  # per-symbol cum_hi
            ctypes.c_size_t,                  # symbol count
            ctypes.POINTER(ctypes.c_uint8),   # output buffer
            ctypes.c_size_t,                  # output capacity
            ctypes.POINTER(ctypes.c_size_t),  # written length
            ctypes.c_char_p,                  # error message buffer
            ctypes.c_size_t,                  # error buffer capacity
        ]
        lib.lrc_rc_decode.restype = ctypes.c_int32
        lib.lrc_rc_decode.argtypes = [
            ctypes.POINTER(ctypes.c_uint8),   # payload
            ctypes.c_size_t,                  # payload length
            ctypes.POINTER(ctypes.c_uint32),  # concatenated cdf entries
            ctypes.POINTER(ctypes.c_uint32),  # per-table offsets (T+1)
            ctypes.c_size_t,                  # table count
            ctypes.POINTER(ctypes.c_uint32),  # per-symbol table ids
            ctypes.c_size_t,                  # symbol count
            ctypes.POINTER(ctypes.c_uint32),  # decoded bin indices
            ctypes.c_char_p,
            ctypes.c_size_t,
        ]
        _native_lib = lib
        return lib
    return None


def native_available() -> bool:
    return _load_native() is not None


def set_backend(name: str):
    """Select the coding backend: "auto", "reference" or "native"."""
    global _backend
    if name not in ("auto", "reference", "native"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "native" and not native_available():
        raise RuntimeError("native range coder library not found")
    _backend = name


def get_backend() -> str:
    return _backend


def _resolve_backend(backend: str | None) -> str:
    name = backend or _backend
    if name == "auto":
        return "native" if native_available() else "reference"
    if name == "native" and not native_available():
        raise RuntimeError("native range coder library not found")
    return name


def _flatten_tables(tables: list[CdfTable]):
    """Deduplicate tables by identity and build FFI-friendly buffers."""
    ids = np.empty(len(tables), dtype=np.uint32)
    unique: list[CdfTable] = []
    index: dict[int, int] = {}
    for i, t in enumerate(tables):
        key = id(t)
        ti = index.get(key)
        if ti is None:
            ti = len(unique)
            index[key] = ti
            unique.append(t)
        ids[i] = ti
    offsets = np.zeros(len(unique) + 1, dtype=np.uint32)
    for i, t in enumerate(unique):
        offsets[i + 1] = offsets[i] + t.cdf.size
    concat = np.concatenate([t.cdf for t in unique]) if unique else np.zeros(0, np.uint32)
    return unique, ids, offsets, np.ascontiguousarray(concat, dtype=np.uint32)


def _raise_native(status: int, err: ctypes.Array, n_read_hint: int = 0):
    msg = err.value.decode("utf-8", "replace") or _STATUS_MESSAGES.get(status, "error")
    if status == 3:
        raise RangeEncodeError(msg)
    if status == 4:
        raise RangeDecodeError(msg, position=n_read_hint)
    raise RangeCoderError(f"native coder failed (status {status}): {msg}")


def _encode_native(symbols: np.ndarray, tables: list[CdfTable]) -> bytes:
    lib = _load_native()
    n = len(tables)
    cum_lo = np.empty(n, dtype=np.uint32)
    cum_hi = np.empty(n, dtype=np.uint32)
    for i, (k, table) in enumerate(zip(symbols, tables)):
        idx = int(k) - table.k_min
        if idx < 0 or idx >= table.n_symbols:
            raise RangeEncodeError(
                f"symbol {int(k)} at position {i} outside table support "
                f"[{table.k_min}, {table.k_max}]"
            )
        cum_lo[i] = table.cdf[idx]
        cum_hi[i] = table.cdf[idx + 1]
    capacity = 2 * n + 64
    out = np.zeros(capacity, dtype=np.uint8)
    written = ctypes.c_size_t(0)
    err = ctypes.create_string_buffer(_ERR_CAPACITY)
    status = lib.lrc_rc_encode(
        cum_lo.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
        cum_hi.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
        n,
        out.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
        capacity,
        ctypes.byref(written),
        err,
        _ERR_CAPACITY,
    )
    if status != 0:
        _raise_native(status, err)
    return out[: written.value].tobytes()


def _decode_native(data: bytes, tables: list[CdfTable]) -> np.ndarray:
    lib = _load_native()
    unique, ids, offsets, concat = _flatten_tables(tables)
    n = len(tables)
    payload = np.frombuffer(data, dtype=np.uint8)
    payload = np.ascontiguousarray(payload)
    out = np.zeros(n, dtype=np.uint32)
    err = ctypes.create_string_buffer(_ERR_CAPACITY)
    status = lib.lrc_rc_decode(
        payload.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
        payload.size,
        concat.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
        offsets.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
        len(unique),
        ids.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
        n,
        out.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
        err,
        _ERR_CAPACITY,
    )
    if status != 0:
        _raise_native(status, err, n_read_hint=len(data))
    k_min = np.fromiter((t.k_min for t in tables), dtype=np.int64, count=n)
    return out.astype(np.int64) + k_min


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def rc_encode(symbols, tables, *, backend: str | None = None) -> bytes:
    """Encode integer symbols, one cumulative-frequency table per symbol.

    Args:
        symbols: Sequence of integer symbol values.
        tables: Sequence of CdfTable, same length as `symbols`. Entries may
            repeat (shared tables are encouraged).
        backend: Override the module backend for this call.

    Returns:
        The coded byte string (9 bytes for an empty input).

    Raises:
        RangeEncodeError: If a symbol lies outside its table's support.
    """
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    tables = list(tables)
    if symbols.size != len(tables):
        raise ValueError(
            f"got {symbols.size} symbols but {len(tables)} tables"
        )
    if _resolve_backend(backend) == "native":
        return _encode_native(symbols, tables)
    return _encode_reference(symbols, tables)


def rc_decode(data: bytes, tables, count: int | None = None, *,
              backend: str | None = None) -> np.ndarray:
    """Decode `len(tables)` symbols from a coded byte string.

    Args:
        data: Bytes produced by `rc_encode` with the same table sequence.
        tables: Sequence of CdfTable, one per expected symbol.
        count: Optional redundant symbol count; must match len(tables).
        backend: Override the module backend for this call.

    Returns:
        int64 array of decoded symbol values.

    Raises:
        RangeDecodeError: If the stream is exhausted before all symbols
            are recovered. Corrupt (but long enough) streams decode to
            wrong symbols within bounded time and memory.
    """
    tables = list(tables)
    if count is not None and count != len(tables):
        raise ValueError(f"count {count} does not match {len(tables)} tables")
    if len(data) < _FLUSH_BYTES:
        raise RangeDecodeError(
            f"payload too short: {len(data)} < {_FLUSH_BYTES}", position=len(data)
        )
    if _resolve_backend(backend) == "native":
        return _decode_native(bytes(data), tables)
    return _decode_reference(bytes(data), tables)
