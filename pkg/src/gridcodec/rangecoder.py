"""Binary range coder with byte-wise renormalization and carry propagation.

Probabilities are quantized to 16-bit fixed point before coding so that the
encoder and decoder agree bit-exactly even though the context models run in
floating point.  The coder keeps its range at or above 2^24; termination
flushes four bytes, so total overhead stays well under 64 bits.
"""
from __future__ import annotations

import numpy as np

PROB_BITS = 16
PROB_SCALE = 1 << PROB_BITS  # 65536
_TOP = 1 << 24
_MASK32 = (1 << 32) - 1


class CoderError(RuntimeError):
    """Internal coder invariant violated (corrupted stream or logic bug)."""


def quantize_prob(p) -> np.ndarray:
    """Probability of +1 -> 16-bit fixed point in [1, 65535]."""
    p16 = np.rint(np.asarray(p, dtype=np.float64) * PROB_SCALE)
    return np.clip(p16, 1, PROB_SCALE - 1).astype(np.uint16)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = 1 << 32
        self.out = bytearray()
        self._finished = False

    def encode(self, plus: bool, p16: int) -> None:
        """Code one sign; p16 is the quantized probability of +1."""
        if self._finished:
            raise CoderError("encoder already finished")
        r_plus = (self.range * int(p16)) >> PROB_BITS
        if plus:
            self.range = r_plus
        else:
            self.low += r_plus
            self.range -= r_plus
        if self.low > _MASK32:
            self._carry()
            self.low &= _MASK32
        while self.range < _TOP:
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK32
            self.range <<= 8

    def encode_signs(self, signs: np.ndarray, p16: np.ndarray) -> None:
        """Code a sequence of +-1 signs against per-symbol probabilities."""
        signs = np.asarray(signs).ravel()
        probs = np.asarray(p16, dtype=np.uint16).ravel()
        if signs.shape != probs.shape:
            raise ValueError("signs and probabilities must align")
        for s, q in zip(signs.tolist(), probs.tolist()):
            self.encode(s > 0, q)

    def _carry(self) -> None:
        i = len(self.out) - 1
        while i >= 0 and self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        if i < 0:
            raise CoderError("carry propagated past stream start")
        self.out[i] += 1

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(4):
                self.out.append((self.low >> 24) & 0xFF)
                self.low = (self.low << 8) & _MASK32
            self._finished = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 4
        self.range = 1 << 32
        self.code = int.from_bytes(data[:4].ljust(4, b"\x00"), "big")

    def _next_byte(self) -> int:
        # reads past the flushed tail decode as zero bits
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode(self, p16: int) -> int:
        """Returns +1 or -1."""
        r_plus = (self.range * int(p16)) >> PROB_BITS
        if self.code < r_plus:
            sign = 1
            self.range = r_plus
        else:
            sign = -1
            self.code -= r_plus
            self.range -= r_plus
        while self.range < _TOP:
            # code < range, so the shifted code stays below the new range
            self.code = (self.code << 8) | self._next_byte()
            self.range <<= 8
        return sign

    def decode_signs(self, p16: np.ndarray) -> np.ndarray:
        probs = np.asarray(p16, dtype=np.uint16).ravel()
        return np.fromiter(
            (self.decode(q) for q in probs.tolist()), dtype=np.int8,
            count=len(probs),
        )


def code_length_bits(data: bytes) -> int:
    return 8 * len(data)
