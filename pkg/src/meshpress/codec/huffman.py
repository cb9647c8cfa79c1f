"""Canonical Huffman coding over small integer alphabets.

Codes are packed MSB-first and the stream is framed by symbol count, so
the zero padding in the last byte is never interpreted.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np


class HuffmanError(ValueError):
    pass


class TruncatedPayloadError(HuffmanError):
    """The payload ended before the requested number of symbols."""


class InvalidCodeError(HuffmanError):
    """A bit pattern that no codeword starts with."""


@dataclass(frozen=True)
class HuffmanTable:
    """Canonical code described entirely by per-symbol code lengths (0 = unused)."""

    lengths: tuple

    @property
    def n_symbols(self) -> int:
        return len(self.lengths)

    @property
    def max_length(self) -> int:
        return max(self.lengths) if self.lengths else 0

    def kraft_sum(self) -> float:
        return float(sum(2.0 ** -n for n in self.lengths if n))

    def codes(self) -> Dict[int, tuple]:
        """symbol -> (code value, length), assigned in (length, symbol) order."""
        order = sorted((n, s) for s, n in enumerate(self.lengths) if n)
        out = {}
        code = 0
        prev = 0
        for n, sym in order:
            code <<= n - prev
            out[sym] = (code, n)
            code += 1
            prev = n
        return out


def huffman_build(histogram: Sequence[int]) -> HuffmanTable:
    """Optimal code lengths by repeated merging of the two lightest nodes.

    Ties are broken by (count, symbol id); merged nodes rank after every
    leaf with the same count, in creation order. A lone symbol gets a
    1-bit code.
    """
    counts = [int(c) for c in histogram]
    if any(c < 0 for c in counts):
        raise HuffmanError("negative symbol count")
    used = [s for s, c in enumerate(counts) if c > 0]
    if not used:
        raise HuffmanError("cannot build a code from an empty histogram")
    lengths = [0] * len(counts)
    if len(used) == 1:
        lengths[used[0]] = 1
        return HuffmanTable(tuple(lengths))

    n = len(counts)
    heap = [(counts[s], s, (s,)) for s in used]
    heapq.heapify(heap)
    next_id = n
    while len(heap) > 1:
        ca, _, la = heapq.heappop(heap)
        cb, _, lb = heapq.heappop(heap)
        for s in la + lb:
            lengths[s] += 1
        heapq.heappush(heap, (ca + cb, next_id, la + lb))
        next_id += 1
    return HuffmanTable(tuple(lengths))


def histogram(symbols: np.ndarray, n_symbols: int) -> np.ndarray:
    return np.bincount(np.asarray(symbols, dtype=np.int64).ravel(), minlength=n_symbols)


def _code_arrays(table: HuffmanTable):
    codes = table.codes()
    values = np.zeros(table.n_symbols, dtype=np.uint64)
    lens = np.zeros(table.n_symbols, dtype=np.int64)
    for sym, (code, n) in codes.items():
        values[sym] = code
        lens[sym] = n
    return values, lens


def huffman_encode(symbols, table: HuffmanTable) -> bytes:
    syms = np.asarray(symbols, dtype=np.int64).ravel()
    if syms.size == 0:
        return b""
    if syms.min() < 0 or syms.max() >= table.n_symbols:
        raise HuffmanError("symbol outside the table alphabet")
    values, lens = _code_arrays(table)
    if np.any(lens[syms] == 0):
        raise HuffmanError("symbol has no codeword in this table")
    if table.max_length > 64:
        return _encode_slow(syms, table)
    n = lens[syms]
    # left-align each code in 64 bits, then keep its first n bits
    aligned = values[syms] << (64 - n).astype(np.uint64)
    bits = np.unpackbits(aligned.astype(">u8").view(np.uint8).reshape(-1, 8), axis=1)
    keep = np.arange(64)[None, :] < n[:, None]
    return np.packbits(bits[keep]).tobytes()


def _encode_slow(syms: np.ndarray, table: HuffmanTable) -> bytes:
    codes = table.codes()
    acc = 0
    nbits = 0
    for s in syms:
        code, n = codes[int(s)]
        acc = (acc << n) | code
        nbits += n
    pad = (-nbits) % 8
    return (acc << pad).to_bytes((nbits + pad) // 8, "big")


def huffman_decode(payload: bytes, table: HuffmanTable, count: int) -> np.ndarray:
    """Decode exactly ``count`` symbols from ``payload``."""
    if count < 0:
        raise HuffmanError("negative symbol count")
    out = np.empty(count, dtype=np.int64)
    if count == 0:
        return out
    max_len = table.max_length
    if max_len == 0:
        raise HuffmanError("table has no codewords")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    nbits = len(bits)
    if max_len > 20:
        return _decode_slow(bits, table, count)

    # lookup over every max_len-bit window: symbol and code length
    lut_sym = np.full(1 << max_len, -1, dtype=np.int64)
    lut_len = np.zeros(1 << max_len, dtype=np.int64)
    for sym, (code, n) in table.codes().items():
        lo = code << (max_len - n)
        hi = (code + 1) << (max_len - n)
        lut_sym[lo:hi] = sym
        lut_len[lo:hi] = n
    padded = np.concatenate([bits, np.zeros(max_len, dtype=np.uint8)]).astype(np.int64)
    windows = np.zeros(nbits + 1, dtype=np.int64)
    for j in range(max_len):
        windows = (windows << 1) | padded[j : j + nbits + 1]
    win = windows.tolist()
    lsym = lut_sym.tolist()
    llen = lut_len.tolist()

    pos = 0
    for i in range(count):
        if pos >= nbits:
            raise TruncatedPayloadError(f"payload exhausted after {i} of {count} symbols")
        w = win[pos]
        sym = lsym[w]
        if sym < 0:
            raise InvalidCodeError(f"invalid code at bit {pos}")
        pos += llen[w]
        if pos > nbits:
            raise TruncatedPayloadError(f"payload exhausted after {i} of {count} symbols")
        out[i] = sym
    return out


def _decode_slow(bits: np.ndarray, table: HuffmanTable, count: int) -> np.ndarray:
    lookup = {(n, code): sym for sym, (code, n) in table.codes().items()}
    max_len = table.max_length
    out = np.empty(count, dtype=np.int64)
    pos = 0
    nbits = len(bits)
    for i in range(count):
        code = 0
        n = 0
        while True:
            if pos >= nbits:
                raise TruncatedPayloadError(f"payload exhausted after {i} of {count} symbols")
            code = (code << 1) | int(bits[pos])
            pos += 1
            n += 1
            if (n, code) in lookup:
                out[i] = lookup[(n, code)]
                break
            if n >= max_len:
                raise InvalidCodeError(f"invalid code ending at bit {pos}")
    return out
