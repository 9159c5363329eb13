"""64-bit carry-less range coder over 16-bit frequency tables.

Each :class:`PmfTable` covers an integer support ``[lo, lo + K)`` plus one
escape symbol. Values outside the support are sent as the escape symbol
followed by 32 bypass bits (two's complement). The encoder appends a CRC-32
of the coded values so that corrupt or mismatched streams fail loudly instead
of yielding wrong symbols.
"""

from __future__ import annotations

import math
import zlib
from bisect import bisect_right
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_MASK = (1 << 64) - 1
_TOP = 1 << 56
_BOT = 1 << 48
FLUSH_BYTES = 8


class CorruptStreamError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (symbol {position})")
        self.position = position


@dataclass(frozen=True)
class PmfTable:
    """Quantised cumulative table; ``cdf`` has K + 2 entries from 0 to 2**16."""

    lo: int
    cdf: tuple[int, ...]

    @property
    def support(self) -> int:
        return len(self.cdf) - 2

    @property
    def escape(self) -> int:
        return len(self.cdf) - 2

    def freq(self, index: int) -> int:
        return self.cdf[index + 1] - self.cdf[index]

    def prob(self, value: int) -> float:
        i = value - self.lo
        if not 0 <= i < self.support:
            i = self.escape
        return self.freq(i) / TOTAL

    def bits(self, value: int) -> float:
        """Ideal code length of ``value`` under this table, escape payload included."""
        i = value - self.lo
        extra = 0
        if not 0 <= i < self.support:
            i = self.escape
            extra = 32
        return PRECISION - math.log2(self.freq(i)) + extra


def quantize_pmfs(pmf: np.ndarray) -> np.ndarray:
    """Map rows of probabilities (last column = escape mass) to integer
    cumulative tables summing to 2**16 with every entry at least 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    pmf = np.clip(np.nan_to_num(pmf, nan=0.0), 0.0, None)
    n, k = pmf.shape
    norm = pmf.sum(axis=1, keepdims=True)
    norm[norm <= 0] = 1.0
    pmf = pmf / norm
    freq = np.floor(pmf * (TOTAL - k)).astype(np.int64) + 1
    rest = TOTAL - freq.sum(axis=1)
    freq[np.arange(n), np.argmax(freq, axis=1)] += rest
    cdf = np.zeros((n, k + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def tables_from_pmfs(pmf: np.ndarray, lo: int) -> list[PmfTable]:
    cdf = quantize_pmfs(pmf)
    return [PmfTable(lo, tuple(row)) for row in cdf.tolist()]


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK
        self.out = bytearray()
        self._crc = 0
        self.count = 0
        self.ideal_bits = 0.0

    def _put(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION
        low = self.low + cum * r
        rng = r * freq
        out = self.out
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            out.append(low >> 56)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low = low
        self.range = rng

    def encode(self, value: int, table: PmfTable) -> None:
        cdf = table.cdf
        i = value - table.lo
        if 0 <= i < len(cdf) - 2:
            self._put(cdf[i], cdf[i + 1] - cdf[i])
        else:
            e = len(cdf) - 2
            self._put(cdf[e], cdf[e + 1] - cdf[e])
            self._bypass32(value)
        self.ideal_bits += table.bits(value)
        self._crc = zlib.crc32((value & 0xFFFFFFFF).to_bytes(4, "little"), self._crc)
        self.count += 1

    def _bypass32(self, value: int) -> None:
        u = value & 0xFFFFFFFF
        self._put(u >> 16, 1)
        self._put(u & 0xFFFF, 1)

    def finish(self) -> bytes:
        self._bypass32(self._crc)
        low = self.low
        for _ in range(FLUSH_BYTES):
            self.out.append(low >> 56)
            low = (low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.count = 0
        self._crc = 0
        if len(data) < FLUSH_BYTES:
            raise CorruptStreamError("range stream shorter than its flush", 0)
        self.code = int.from_bytes(data[:FLUSH_BYTES], "big")
        self.pos = FLUSH_BYTES

    def _get(self, cdf: Sequence[int]) -> int:
        r = self.range >> PRECISION
        value = (self.code - self.low) // r
        if value >= TOTAL or value < 0:
            raise CorruptStreamError("range stream out of sync", self.count)
        i = bisect_right(cdf, value) - 1
        low = self.low + cdf[i] * r
        rng = r * (cdf[i + 1] - cdf[i])
        code = self.code
        data = self.data
        pos = self.pos
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            if pos >= len(data):
                raise CorruptStreamError("range stream truncated", self.count)
            code = ((code << 8) | data[pos]) & _MASK
            pos += 1
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code, self.pos = low, rng, code, pos
        return i

    _UNIFORM = tuple(range(TOTAL + 1))

    def _bypass32(self) -> int:
        hi = self._get(self._UNIFORM)
        lo = self._get(self._UNIFORM)
        u = (hi << 16) | lo
        return u - (1 << 32) if u >= 1 << 31 else u

    def decode(self, table: PmfTable) -> int:
        i = self._get(table.cdf)
        if i == len(table.cdf) - 2:
            value = self._bypass32()
        else:
            value = table.lo + i
        self._crc = zlib.crc32((value & 0xFFFFFFFF).to_bytes(4, "little"), self._crc)
        self.count += 1
        return value

    def finish(self) -> None:
        crc = self._bypass32() & 0xFFFFFFFF
        if crc != self._crc:
            raise CorruptStreamError("checksum mismatch", self.count)
        if self.pos != len(self.data):
            raise CorruptStreamError("trailing bytes after range stream", self.count)


def range_encode(symbols: Sequence[int], tables: Sequence[PmfTable]) -> bytes:
    if len(symbols) != len(tables):
        raise ValueError("one table per symbol required")
    enc = RangeEncoder()
    for v, t in zip(symbols, tables):
        enc.encode(int(v), t)
    return enc.finish()


def range_decode(data: bytes, tables: Sequence[PmfTable]) -> list[int]:
    dec = RangeDecoder(data)
    out = [dec.decode(t) for t in tables]
    dec.finish()
    return out
