"""8-bit tensor representation and rounding machinery.

A quantized tensor is a pair ``(data, exponent)`` with int8 data and a
single power-of-two scale: the represented value is ``data * 2**exponent``.
Products and sums are accumulated in int32 and then *requantized* back to
8 bits: the minimum bitwidth ``b`` needed for the accumulator is found,
values are right-shifted by ``b - 7`` with pseudo-stochastic rounding and
the exponent absorbs the shift.

Everything in this module is integer arithmetic.  The magnitude range is
[-127, 127]; -128 is never produced, which keeps negation closed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INT8_MAX = 127


@dataclass
class QuantTensor:
    """int8 data plus one power-of-two scale exponent."""

    data: np.ndarray  # int8
    exponent: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        self.exponent = int(self.exponent)

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        """Reconstruct float64 values (for oracles and reporting only)."""
        from . import floatops

        floatops.note(self.data.size)
        return self.data.astype(np.float64) * 2.0**self.exponent


@dataclass
class Accum32:
    """int32 accumulator with the same value convention as QuantTensor."""

    data: np.ndarray  # int32
    exponent: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int32)
        self.exponent = int(self.exponent)


def clamp_int8(v: np.ndarray) -> np.ndarray:
    """Clamp to [-127, 127] (note the floor is -127, not -128)."""
    return np.clip(v, -INT8_MAX, INT8_MAX)


def pseudo_stochastic_round(v: np.ndarray, shift: int) -> np.ndarray:
    """Divide by 2**shift with deterministic stochastic-style rounding.

    Operates on the magnitude; the discarded ``shift`` low bits are split
    into an upper half ``u`` (ceil(shift/2) bits) and a lower half ``w``
    (floor(shift/2) bits, compared as a zero-extended integer), and the
    truncated magnitude is incremented iff ``u > w``.  The value's own low
    bits thus act as the randomness source, so the map is reproducible,
    symmetric (round(-v) == -round(v)) and maps zero to zero.
    """
    if shift < 0:
        raise ValueError("shift must be non-negative")
    v = np.asarray(v)
    if shift == 0:
        return v.copy()
    sign = np.sign(v)
    mag = np.abs(v.astype(np.int64))
    trunc = mag >> shift
    rem = mag & ((1 << shift) - 1)
    lower_bits = shift // 2
    u = rem >> lower_bits
    w = rem & ((1 << lower_bits) - 1)
    rounded = trunc + (u > w)
    return (sign * rounded).astype(v.dtype)


def _bitwidth(max_abs: int) -> int:
    """Minimum bitwidth to represent a magnitude (0 for the zero tensor)."""
    return int(max_abs).bit_length()


def requantize(acc: Accum32) -> QuantTensor:
    """Reduce an int32 accumulator to 8 bits, adjusting the exponent.

    If the accumulator already fits in 7 bits the data is copied verbatim;
    otherwise it is shifted down by ``b - 7`` with pseudo-stochastic
    rounding.  Rounding can push a value to 128, hence the final clamp.
    """
    max_abs = int(np.max(np.abs(acc.data))) if acc.data.size else 0
    b = _bitwidth(max_abs)
    if b <= 7:
        return QuantTensor(acc.data.astype(np.int8), acc.exponent)
    shift = b - 7
    rounded = pseudo_stochastic_round(acc.data, shift)
    return QuantTensor(clamp_int8(rounded).astype(np.int8), acc.exponent + shift)


def round_to_bits(acc: np.ndarray, bits: int) -> np.ndarray:
    """Round an integer array so its magnitude fits in ``bits`` bits.

    The shift is shared across the whole array (bitwidth of the max
    magnitude minus ``bits``); the result is clamped to 2**bits - 1 since
    round-up at the top of the range can overflow by one.  Used for the
    bitwidth-as-learning-rate parameter updates.
    """
    if not 1 <= bits <= 7:
        raise ValueError(f"bits must be in [1, 7], got {bits}")
    acc = np.asarray(acc)
    max_abs = int(np.max(np.abs(acc))) if acc.size else 0
    shift = max(_bitwidth(max_abs) - bits, 0)
    rounded = pseudo_stochastic_round(acc, shift)
    limit = (1 << bits) - 1
    return np.clip(rounded, -limit, limit)
