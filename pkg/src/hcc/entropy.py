"""Exact entropy coding: quantized probability tables, a carry-propagating
range coder, and signed exp-Golomb codes.

Two implementations coexist. The pure-Python classes here define the coder
behaviour symbol by symbol and take arbitrary per-symbol tables; the batch
functions wrap the compiled kernels for the latent hot path. Both sides run
the same integer algorithm, so their byte output is identical.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CodecError

__all__ = [
    "TOT",
    "TOT_BITS",
    "BitWriter",
    "BitReader",
    "FreqTable",
    "quantize_pmf",
    "RangeEncoder",
    "RangeDecoder",
    "range_encode",
    "range_decode",
    "zigzag",
    "unzigzag",
    "expgolomb_bit_length",
    "write_signed_expgolomb",
    "read_signed_expgolomb",
    "expgolomb_encode_signed",
    "expgolomb_decode_signed",
    "eg_encode_array",
    "eg_decode_array",
    "encode_latent_grids",
    "decode_latent_grids",
]

TOT_BITS = kernels.TOT_BITS
TOT = kernels.TOT
_RC_TOP = kernels.RC_TOP
_RC_MASK = kernels.RC_MASK


# -- bit-level I/O ------------------------------------------------------------


class BitWriter:
    """MSB-first bit packer; getvalue() zero-pads the final byte."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._acc = 0
        self._n = 0
        self.bit_length = 0

    def write_bit(self, bit: int) -> None:
        self._acc = (self._acc << 1) | (bit & 1)
        self._n += 1
        self.bit_length += 1
        if self._n == 8:
            self._buf.append(self._acc)
            self._acc = 0
            self._n = 0

    def write_bits(self, value: int, width: int) -> None:
        for k in range(width - 1, -1, -1):
            self.write_bit((value >> k) & 1)

    def getvalue(self) -> bytes:
        out = bytearray(self._buf)
        if self._n:
            out.append(self._acc << (8 - self._n))
        return bytes(out)


class BitReader:
    """MSB-first bit reader over a bytes object."""

    def __init__(self, data: bytes, bit_offset: int = 0) -> None:
        self._data = data
        self.position = bit_offset
        self._total = 8 * len(data)

    def read_bit(self) -> int:
        if self.position >= self._total:
            raise CodecError("bit stream truncated")
        byte = self._data[self.position >> 3]
        bit = (byte >> (7 - (self.position & 7))) & 1
        self.position += 1
        return bit

    def read_bits(self, width: int) -> int:
        v = 0
        for _ in range(width):
            v = (v << 1) | self.read_bit()
        return v


# -- signed exp-Golomb ----------------------------------------------------------


def zigzag(v: int) -> int:
    """Map signed to unsigned: 0,1,-1,2,-2,... -> 0,1,2,3,4,..."""
    return 2 * v - 1 if v > 0 else -2 * v


def unzigzag(u: int) -> int:
    return (u + 1) >> 1 if u & 1 else -(u >> 1)


def expgolomb_bit_length(v: int) -> int:
    return 2 * (zigzag(v) + 1).bit_length() - 1


def write_signed_expgolomb(w: BitWriter, v: int) -> None:
    m = zigzag(v) + 1
    nb = m.bit_length()
    w.write_bits(m, 2 * nb - 1)


def read_signed_expgolomb(r: BitReader) -> int:
    z = 0
    while r.read_bit() == 0:
        z += 1
        if z > 62:
            raise CodecError("exp-golomb prefix run too long")
    m = 1
    for _ in range(z):
        m = (m << 1) | r.read_bit()
    return unzigzag(m - 1)


def expgolomb_encode_signed(values: Sequence[int], writer: BitWriter) -> None:
    """Append each signed value to the writer as an Exp-Golomb codeword."""
    for v in values:
        write_signed_expgolomb(writer, int(v))


def expgolomb_decode_signed(reader: BitReader, n: int) -> list[int]:
    """Read n signed Exp-Golomb codewords from the reader."""
    return [read_signed_expgolomb(reader) for _ in range(n)]


def eg_encode_array(values: np.ndarray) -> tuple[bytes, int]:
    """Batch signed exp-Golomb pack; returns (payload, exact bit count)."""
    vals = np.ascontiguousarray(values, dtype=np.int64).ravel()
    out = np.zeros(9 * vals.size + 16, dtype=np.uint8)
    try:
        nbytes, nbits = kernels.eg_encode_kernel(vals, out)
    except ValueError as e:
        raise CodecError(str(e)) from e
    return out[:nbytes].tobytes(), int(nbits)


def eg_decode_array(data: bytes, count: int, bit_offset: int = 0) -> tuple[np.ndarray, int]:
    """Batch signed exp-Golomb unpack; returns (values, end bit offset)."""
    buf = np.frombuffer(data, dtype=np.uint8)
    vals = np.zeros(count, dtype=np.int64)
    try:
        end = kernels.eg_decode_kernel(buf, bit_offset, vals)
    except ValueError as e:
        raise CodecError(str(e)) from e
    return vals, int(end)


# -- frequency tables -------------------------------------------------------------


@dataclass(frozen=True)
class FreqTable:
    """Integer probabilities f/2^16 over symbols lo..lo+n-1; every f >= 1."""

    lo: int
    freq: np.ndarray
    cum: np.ndarray

    @classmethod
    def from_freq(cls, lo: int, freq) -> "FreqTable":
        f = np.ascontiguousarray(freq, dtype=np.int64)
        if f.ndim != 1 or f.size < 1:
            raise ValueError(f"frequency table must be a 1-D vector, got shape {f.shape}")
        if f.min() < 1:
            raise ValueError("frequency table entries must be positive")
        if int(f.sum()) != TOT:
            raise ValueError(f"frequency table sums to {int(f.sum())}, expected {TOT}")
        cum = np.zeros(f.size + 1, dtype=np.int64)
        np.cumsum(f, out=cum[1:])
        return cls(lo, f, cum)

    @property
    def n(self) -> int:
        return self.freq.size

    def bits(self, symbol: int) -> float:
        """Ideal code length of one symbol under this table."""
        return TOT_BITS - float(np.log2(self.freq[symbol - self.lo]))


def quantize_pmf(mu: float, b: float, lo: int = -256, hi: int = 255) -> FreqTable:
    """Laplace(mu, b) boxed on integers [lo, hi], quantized to a coder table."""
    n = hi - lo + 1
    if n < 2:
        raise ValueError(f"alphabet [{lo}, {hi}] too small")
    p = np.empty(n)
    rem = np.empty(n)
    fq = np.empty(n, dtype=np.int64)
    cum = np.empty(n + 1, dtype=np.int64)
    kernels.fill_table(float(mu), float(b), lo, p, rem, fq, cum)
    return FreqTable(lo, fq, cum)


# -- range coder (reference implementation) -----------------------------------------


class RangeEncoder:
    """32-bit low/range encoder with byte-cache carry propagation."""

    def __init__(self) -> None:
        self._low = 0
        self._range = _RC_MASK
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._done = False

    def _shift_low(self) -> None:
        if self._low < 0xFF000000 or self._low > _RC_MASK:
            carry = self._low >> 32
            temp = self._cache
            for _ in range(self._cache_size):
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
            self._cache = (self._low >> 24) & 0xFF
            self._cache_size = 0
        self._cache_size += 1
        self._low = (self._low << 8) & _RC_MASK

    def encode(self, table: FreqTable, symbol: int) -> None:
        if self._done:
            raise CodecError("encoder already finished")
        idx = symbol - table.lo
        if idx < 0 or idx >= table.n:
            raise CodecError(f"symbol {symbol} outside table [{table.lo}, {table.lo + table.n - 1}]")
        r = self._range >> TOT_BITS
        self._low += r * int(table.cum[idx])
        self._range = r * int(table.freq[idx])
        while self._range < _RC_TOP:
            self._shift_low()
            self._range <<= 8

    def finish(self) -> bytes:
        if not self._done:
            for _ in range(5):
                self._shift_low()
            self._done = True
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder; consumes exactly the bytes it wrote."""

    def __init__(self, data: bytes) -> None:
        if len(data) < 5:
            raise CodecError("range coder stream shorter than its header")
        self._data = data
        self._range = _RC_MASK
        self._code = int.from_bytes(data[1:5], "big")
        self._pos = 5

    def decode(self, table: FreqTable) -> int:
        r = self._range >> TOT_BITS
        v = min(self._code // r, TOT - 1)
        idx = int(np.searchsorted(table.cum, v, side="right")) - 1
        self._code -= r * int(table.cum[idx])
        self._range = r * int(table.freq[idx])
        while self._range < _RC_TOP:
            if self._pos >= len(self._data):
                raise CodecError("range coder stream truncated")
            self._code = (self._code << 8) | self._data[self._pos]
            self._pos += 1
            self._range <<= 8
        return table.lo + idx

    @property
    def bytes_consumed(self) -> int:
        return self._pos


TableProvider = Callable[[int, list[int]], FreqTable]


def range_encode(symbols: Sequence[int], tables: Sequence[FreqTable] | TableProvider) -> bytes:
    """Range-code symbols; tables is a sequence or a (index, prefix) callable."""
    enc = RangeEncoder()
    prefix: list[int] = []
    for i, s in enumerate(symbols):
        t = tables(i, prefix) if callable(tables) else tables[i]
        enc.encode(t, int(s))
        prefix.append(int(s))
    return enc.finish()


def range_decode(data: bytes, count: int, tables: Sequence[FreqTable] | TableProvider) -> list[int]:
    dec = RangeDecoder(data)
    out: list[int] = []
    for i in range(count):
        t = tables(i, out) if callable(tables) else tables[i]
        out.append(dec.decode(t))
    return out


# -- latent grid coding (kernel wrappers) ----------------------------------------


def _check_arm(arm: Sequence[np.ndarray]) -> list[np.ndarray]:
    shapes = [(16, 8), (16,), (16, 16), (16,), (2, 16), (2,)]
    if len(arm) != 6:
        raise ValueError(f"context model takes 6 parameter tensors, got {len(arm)}")
    out = []
    for a, want in zip(arm, shapes):
        a = np.ascontiguousarray(a, dtype=np.float64)
        if a.shape != want:
            raise ValueError(f"context model tensor shape {a.shape}, expected {want}")
        out.append(a)
    return out


def _flatten_grids(grids: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    shapes = np.zeros((len(grids), 2), dtype=np.int64)
    parts = []
    for i, g in enumerate(grids):
        g = np.asarray(g)
        if g.ndim != 2:
            raise ValueError(f"latent grid {i} must be 2-D, got shape {g.shape}")
        if not np.issubdtype(g.dtype, np.integer):
            raise ValueError(f"latent grid {i} must be integer, got dtype {g.dtype}")
        shapes[i] = g.shape
        parts.append(g.astype(np.int64).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    if flat.size and (flat.min() < kernels.SYM_LO or flat.max() >= kernels.SYM_LO + kernels.N_SYM):
        raise CodecError("latent value outside [-256, 255]")
    return flat, shapes


def encode_latent_grids(grids: Sequence[np.ndarray], arm: Sequence[np.ndarray]) -> tuple[bytes, float]:
    """Adaptively code integer latent grids under the context model.

    Returns (payload, estimated bits), the estimate summing the table code
    lengths -log2(f/2^16) of the coded symbols.
    """
    w1, b1, w2, b2, w3, b3 = _check_arm(arm)
    flat, shapes = _flatten_grids(grids)
    if flat.size == 0:
        return b"", 0.0
    out = np.zeros(2 * flat.size + 64, dtype=np.uint8)
    try:
        nbytes, est = kernels.encode_latents_kernel(flat, shapes, w1, b1, w2, b2, w3, b3, out)
    except ValueError as e:
        raise CodecError(str(e)) from e
    return out[:nbytes].tobytes(), float(est)


def decode_latent_grids(data: bytes, shapes: Sequence[tuple[int, int]],
                        arm: Sequence[np.ndarray]) -> tuple[list[np.ndarray], int, float]:
    """Inverse of encode_latent_grids.

    Returns (grids, bytes consumed, estimated bits).
    """
    w1, b1, w2, b2, w3, b3 = _check_arm(arm)
    shp = np.asarray(shapes, dtype=np.int64).reshape(-1, 2)
    ncells = int((shp[:, 0] * shp[:, 1]).sum()) if shp.size else 0
    if ncells == 0:
        return [np.zeros((int(h), int(w)), dtype=np.int64) for h, w in shp], 0, 0.0
    flat = np.zeros(ncells, dtype=np.int64)
    buf = np.frombuffer(data, dtype=np.uint8)
    try:
        consumed, est = kernels.decode_latents_kernel(buf, shp, w1, b1, w2, b2, w3, b3, flat)
    except ValueError as e:
        raise CodecError(str(e)) from e
    grids = []
    off = 0
    for h, w in shp:
        h, w = int(h), int(w)
        grids.append(flat[off:off + h * w].reshape(h, w).copy())
        off += h * w
    return grids, int(consumed), float(est)
