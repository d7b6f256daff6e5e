"""Byte-oriented range coder with 16-bit probability precision.

The coder keeps a 32-bit ``range`` and a ``low`` register that may carry
into bit 32 (held in a 64-bit slot), in the style of the LZMA coder. Symbols
are integers in [-64, 64]; anything outside is sent as an escape symbol
followed by an Exp-Golomb style payload coded with flat probabilities.

Probability tables are per symbol: a row of 131 cumulative counts (130
symbols incl. escape) summing to ``2**16``.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

from .errors import IntegrityError

PRECISION = 16
TOTAL = 1 << PRECISION
ALPHABET_MIN = -64
ALPHABET_MAX = 64
NUM_VALUES = ALPHABET_MAX - ALPHABET_MIN + 1  # 129
ESCAPE = NUM_VALUES  # index of the escape symbol
NUM_SYMBOLS = NUM_VALUES + 1

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


def pmf_to_freqs(pmf: np.ndarray) -> np.ndarray:
    """Quantise probabilities over [-64, 64] to integer frequencies summing to 2**16.

    ``pmf`` has shape ``(..., 129)``; the mass missing from each row becomes
    the escape frequency. Every symbol, escape included, gets at least 1.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape[-1] != NUM_VALUES:
        raise ValueError(f"pmf must have {NUM_VALUES} entries on the last axis")
    pmf = np.clip(pmf, 0.0, 1.0)
    tail = np.clip(1.0 - pmf.sum(axis=-1, keepdims=True), 0.0, 1.0)
    p = np.concatenate([pmf, tail], axis=-1)
    p = p / p.sum(axis=-1, keepdims=True)
    freqs = np.floor(p * (TOTAL - NUM_SYMBOLS)).astype(np.int64) + 1
    deficit = TOTAL - freqs.sum(axis=-1)
    idx = np.argmax(freqs, axis=-1)
    np.put_along_axis(freqs, idx[..., None], np.take_along_axis(freqs, idx[..., None], -1) + deficit[..., None], -1)
    return freqs


def freqs_to_cdf(freqs: np.ndarray) -> np.ndarray:
    cdf = np.zeros(freqs.shape[:-1] + (freqs.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(freqs, axis=-1, out=cdf[..., 1:])
    return cdf


def symbol_bits(symbols: np.ndarray, cdf: np.ndarray) -> float:
    """Ideal code length (bits) of ``symbols`` under the quantised tables, escapes included."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    idx = np.clip(symbols - ALPHABET_MIN, 0, ESCAPE)
    idx = np.where(np.abs(symbols) > ALPHABET_MAX, ESCAPE, idx)
    rows = np.arange(symbols.size)
    f = cdf[rows, idx + 1] - cdf[rows, idx]
    bits = float(np.sum(PRECISION - np.log2(f)))
    esc = np.abs(symbols[np.abs(symbols) > ALPHABET_MAX]) - (ALPHABET_MAX + 1)
    for m in esc.tolist():
        bits += 6 + int(m).bit_length() + 1
    return bits


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int, total_bits: int = PRECISION) -> None:
        r = self.range >> total_bits
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int) -> None:
        while nbits > 0:
            n = min(nbits, 16)
            nbits -= n
            self.encode((value >> nbits) & ((1 << n) - 1), 1, n)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # the first byte is always the initial empty cache
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        if pos > len(self.data) + 8:
            raise IntegrityError("decoder ran past the end of the stream")
        return 0

    def _normalize(self) -> None:
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8

    def target(self, total_bits: int = PRECISION) -> tuple[int, int]:
        r = self.range >> total_bits
        v = self.code // r
        if v >= (1 << total_bits):
            raise IntegrityError("decoder state diverged from encoder")
        return v, r

    def consume(self, r: int, start: int, size: int) -> None:
        self.code -= r * start
        self.range = r * size
        self._normalize()

    def decode_bits(self, nbits: int) -> int:
        value = 0
        while nbits > 0:
            n = min(nbits, 16)
            nbits -= n
            v, r = self.target(n)
            self.consume(r, v, 1)
            value = (value << n) | v
        return value


def encode_symbols(symbols: Sequence[int] | np.ndarray, cdf: np.ndarray) -> bytes:
    """Range-code ``symbols`` (flat ints) with one cdf row per symbol."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    cdf = np.asarray(cdf, dtype=np.int64).reshape(-1, NUM_SYMBOLS + 1)
    if cdf.shape[0] != symbols.size:
        raise ValueError(f"{symbols.size} symbols but {cdf.shape[0]} cdf rows")
    enc = RangeEncoder()
    rows = cdf.tolist()
    for s, row in zip(symbols.tolist(), rows):
        if ALPHABET_MIN <= s <= ALPHABET_MAX:
            i = s - ALPHABET_MIN
            enc.encode(row[i], row[i + 1] - row[i])
        else:
            enc.encode(row[ESCAPE], row[ESCAPE + 1] - row[ESCAPE])
            m = abs(s) - (ALPHABET_MAX + 1)
            nb = m.bit_length()
            enc.encode_bits(nb, 6)
            enc.encode_bits(m, nb)
            enc.encode_bits(1 if s < 0 else 0, 1)
    return enc.finish()


def decode_symbols(data: bytes, cdf: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_symbols`; ``cdf`` must equal the encoder's tables."""
    cdf = np.asarray(cdf, dtype=np.int64).reshape(-1, NUM_SYMBOLS + 1)
    dec = RangeDecoder(data)
    out = []
    for row in cdf.tolist():
        v, r = dec.target()
        i = bisect_right(row, v) - 1
        if not 0 <= i < NUM_SYMBOLS or row[i + 1] == row[i]:
            raise IntegrityError("decoded an impossible symbol")
        dec.consume(r, row[i], row[i + 1] - row[i])
        if i == ESCAPE:
            nb = dec.decode_bits(6)
            m = dec.decode_bits(nb)
            neg = dec.decode_bits(1)
            mag = m + ALPHABET_MAX + 1
            out.append(-mag if neg else mag)
        else:
            out.append(i + ALPHABET_MIN)
    return np.asarray(out, dtype=np.int64)
