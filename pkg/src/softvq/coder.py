"""Static range coder over a 16-bit frequency table.

The coder is pure fixed-width integer arithmetic (32-bit state, byte-wise
renormalization, Subbotin-style carry avoidance), so identical inputs yield
byte-identical payloads on every platform. The table is built once per
message from the learned code distribution and travels with the payload.
"""

from __future__ import annotations

import math

import numpy as np

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS          # frequency denominator, 65536
TOP = 1 << 24
BOTTOM = 1 << 16
MASK32 = 0xFFFFFFFF
FLUSH_BYTES = 4


class CoderError(ValueError):
    """Corrupt or inconsistent coder input."""


class FrequencyTable:
    """Integer symbol frequencies summing to exactly 2**16, all >= 1."""

    def __init__(self, freq):
        freq = np.asarray(freq, dtype=np.int64)
        if freq.ndim != 1 or len(freq) < 1:
            raise ValueError("frequency table must be a non-empty vector")
        if np.any(freq < 1):
            raise ValueError("every frequency must be >= 1")
        if int(freq.sum()) != TOTAL:
            raise ValueError(f"frequencies must sum to {TOTAL}, got {int(freq.sum())}")
        self.freq = freq
        self.cum = np.concatenate([[0], np.cumsum(freq)])

    def __len__(self):
        return len(self.freq)

    def __eq__(self, other):
        return isinstance(other, FrequencyTable) and np.array_equal(self.freq, other.freq)


def quantize_model(probs):
    """Deterministically map a probability vector onto a FrequencyTable.

    Each symbol gets floor(p * (TOTAL - k)) + 1 so nothing is ever assigned
    zero mass; the leftover units go to symbols in descending-probability
    order, ties broken by lower index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    k = len(probs)
    if k > TOTAL:
        raise ValueError(f"alphabet size {k} exceeds table capacity {TOTAL}")
    if np.any(probs <= 0.0):
        raise ValueError("quantize_model requires strictly positive probabilities")
    freq = np.floor(probs * (TOTAL - k)).astype(np.int64) + 1
    residual = TOTAL - int(freq.sum())
    if residual > 0:
        order = np.lexsort((np.arange(k), -probs))
        for i in range(residual):
            freq[order[i % k]] += 1
    return FrequencyTable(freq)


class _Encoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def encode(self, cum_low, f):
        # invariant: low + range <= 2**32 (intervals nest, so no carries)
        r = self.range >> TOTAL_BITS
        self.low += cum_low * r
        self.range = f * r
        self._normalize()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass  # top byte settled
            elif self.range < BOTTOM:
                # interval straddles a boundary but is tiny: clip it to the
                # boundary so the top byte settles (bounded efficiency loss)
                self.range = (-self.low) & (BOTTOM - 1)
            else:
                break
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK32
            self.range = (self.range << 8) & MASK32

    def finish(self):
        for _ in range(FLUSH_BYTES):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK32
        return bytes(self.out)


class _Decoder:
    def __init__(self, payload):
        self.payload = payload
        self.pos = 0
        self.low = 0
        self.range = MASK32
        self.code = 0
        for _ in range(FLUSH_BYTES):
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def _byte(self):
        # reads past the end return zero; the encoder's flush guarantees the
        # remaining symbols resolve regardless
        if self.pos < len(self.payload):
            b = self.payload[self.pos]
            self.pos += 1
            return b
        return 0

    def decode_target(self):
        r = self.range >> TOTAL_BITS
        target = ((self.code - self.low) & MASK32) // r
        if target >= TOTAL:
            raise CoderError("corrupt payload: cumulative target out of range")
        return target

    def consume(self, cum_low, f):
        r = self.range >> TOTAL_BITS
        self.low += cum_low * r
        self.range = f * r
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOTTOM:
                self.range = (-self.low) & (BOTTOM - 1)
            else:
                break
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.low = (self.low << 8) & MASK32
            self.range = (self.range << 8) & MASK32


def encode(symbols, table):
    """Encode integer symbols under the table; returns the payload bytes."""
    symbols = np.asarray(symbols, dtype=np.int64)
    k = len(table)
    if symbols.size and (symbols.min() < 0 or symbols.max() >= k):
        raise CoderError(f"symbol out of range for {k}-symbol table")
    enc = _Encoder()
    cum = table.cum
    freq = table.freq
    for s in symbols:
        enc.encode(int(cum[s]), int(freq[s]))
    return enc.finish()


def decode(payload, table, n):
    """Exact inverse of encode for the same table and symbol count."""
    dec = _Decoder(payload)
    cum = table.cum
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        target = dec.decode_target()
        # cum[s] <= target < cum[s+1]
        s = int(np.searchsorted(cum, target, side="right")) - 1
        out[i] = s
        dec.consume(int(cum[s]), int(table.freq[s]))
    return out


def codelength_bound(symbols, table):
    """Ideal code length in bits: sum of -log2(freq/TOTAL) over the message."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return 0.0
    return float(np.sum(-np.log2(table.freq[symbols] / TOTAL)))


def payload_bits(payload):
    return 8 * len(payload)


def bits_per_symbol(probs):
    """Entropy of a probability vector in bits (reporting helper)."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz))) if nz.size else 0.0


def nats_to_bits(x):
    return x / math.log(2.0)
