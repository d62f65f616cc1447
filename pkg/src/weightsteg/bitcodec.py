"""Bit-exact scalar <-> bit-string conversion and LSB-field surgery.

Bit strings are MSB-first: position 1 is the most significant bit, position
``width`` the least significant. All conversions are pattern-preserving,
including NaNs and signed zeros; nothing here does float arithmetic.

Scalar conversions return numpy scalars so that the storage pattern survives
a round trip through Python untouched. Vector helpers at the bottom are the
engine-side counterparts operating on unsigned-integer pattern arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import BadWidth, SegmentTooWide, ValueNotRepresentable, WidthMismatch


class ScalarType(enum.Enum):
    """Storage types a single carrier element can have."""

    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"
    INT8 = "INT8"    # Q8_0 codes, two's complement
    UINT4 = "UINT4"  # Q4_0 codes, unsigned nibble

    @property
    def width(self) -> int:
        return _WIDTHS[self]


_WIDTHS = {
    ScalarType.F32: 32,
    ScalarType.F16: 16,
    ScalarType.BF16: 16,
    ScalarType.INT8: 8,
    ScalarType.UINT4: 4,
}


@dataclass(frozen=True)
class BitString:
    """An ordered bit sequence, MSB first."""

    bits: str

    def __post_init__(self):
        if self.bits.strip("01") != "":
            raise ValueError(f"bit string may contain only 0/1: {self.bits!r}")

    @property
    def width(self) -> int:
        return len(self.bits)

    @property
    def value(self) -> int:
        return int(self.bits, 2) if self.bits else 0

    @classmethod
    def from_int(cls, value: int, width: int) -> "BitString":
        if width < 0 or value < 0 or value >= (1 << width):
            raise ValueError(f"value {value} does not fit in {width} bits")
        return cls(format(value, f"0{width}b") if width else "")

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "BitString":
        return cls("".join("1" if b else "0" for b in bits))

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        return self.bits


def to_bits(value, dtype: ScalarType) -> BitString:
    """Exact storage bit pattern of ``value``, MSB first.

    Total for floats (NaN payloads, signed zeros and subnormals included);
    integer code types raise ValueNotRepresentable outside their range.
    """
    if dtype is ScalarType.F32:
        pat = int(np.float32(value).view(np.uint32))
    elif dtype is ScalarType.F16:
        pat = int(np.float16(value).view(np.uint16))
    elif dtype is ScalarType.BF16:
        u32 = int(np.float32(value).view(np.uint32))
        pat = _f32_pattern_to_bf16(u32)
    elif dtype is ScalarType.INT8:
        iv = int(value)
        if not -128 <= iv <= 127:
            raise ValueNotRepresentable(f"{iv} outside int8 range")
        pat = iv & 0xFF
    elif dtype is ScalarType.UINT4:
        iv = int(value)
        if not 0 <= iv <= 15:
            raise ValueNotRepresentable(f"{iv} outside 4-bit code range")
        pat = iv
    else:  # pragma: no cover - enum is closed
        raise ValueNotRepresentable(f"unknown dtype {dtype}")
    return BitString.from_int(pat, dtype.width)


def from_bits(bits: BitString, dtype: ScalarType):
    """Exact inverse of to_bits for every bit pattern of matching width."""
    if bits.width != dtype.width:
        raise WidthMismatch(
            f"pattern width {bits.width} does not match {dtype.value} width {dtype.width}")
    pat = bits.value
    if dtype is ScalarType.F32:
        return np.uint32(pat).view(np.float32)
    if dtype is ScalarType.F16:
        return np.uint16(pat).view(np.float16)
    if dtype is ScalarType.BF16:
        # BF16 values are handled as float32 with the low 16 pattern bits zero.
        return np.uint32(pat << 16).view(np.float32)
    if dtype is ScalarType.INT8:
        return pat - 256 if pat >= 128 else pat
    return pat  # UINT4


def replace_lsb(bits: BitString, segment: BitString) -> BitString:
    """Replace the bottom ``|segment|`` bits of ``bits`` with ``segment``."""
    return replace_field(bits, segment, 0)


def extract_lsb(bits: BitString, n: int) -> BitString:
    """Return the bottom ``n`` bits, in order."""
    return extract_field(bits, n, 0)


def replace_field(bits: BitString, segment: BitString, offset: int) -> BitString:
    """Replace the ``|segment|`` bits that sit ``offset`` planes above the LSB.

    offset 0 is plain LSB replacement; offset k shifts the replaced field k
    bit planes up, which is how payloads get hidden above a sanitized band.
    """
    if offset < 0:
        raise BadWidth(f"offset must be non-negative, got {offset}")
    if segment.width + offset > bits.width:
        raise SegmentTooWide(
            f"segment of {segment.width} bits at offset {offset} does not fit "
            f"in width {bits.width}")
    if segment.width == 0:
        return bits
    hi = bits.bits[: bits.width - offset - segment.width]
    lo = bits.bits[bits.width - offset:] if offset else ""
    return BitString(hi + segment.bits + lo)


def extract_field(bits: BitString, n: int, offset: int) -> BitString:
    if n <= 0 or offset < 0 or n + offset > bits.width:
        raise BadWidth(
            f"cannot read {n} bits at offset {offset} from width {bits.width}")
    end = bits.width - offset
    return BitString(bits.bits[end - n: end])


# --- vectorized pattern helpers -------------------------------------------

def replace_low_bits(patterns: np.ndarray, values: np.ndarray, n: int,
                     offset: int = 0) -> np.ndarray:
    """Vector replace of the n-bit field at ``offset`` planes above the LSB."""
    if n <= 0:
        raise BadWidth(f"field width must be positive, got {n}")
    width = patterns.dtype.itemsize * 8
    if n + offset > width:
        raise SegmentTooWide(f"{n} bits at offset {offset} exceed width {width}")
    mask = patterns.dtype.type(((1 << n) - 1) << offset)
    vals = values.astype(patterns.dtype) << patterns.dtype.type(offset)
    return (patterns & ~mask) | (vals & mask)


def extract_low_bits(patterns: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    if n <= 0:
        raise BadWidth(f"field width must be positive, got {n}")
    width = patterns.dtype.itemsize * 8
    if n + offset > width:
        raise BadWidth(f"{n} bits at offset {offset} exceed width {width}")
    mask = (1 << n) - 1
    shifted = patterns.astype(np.uint64) >> np.uint64(offset)
    return (shifted & np.uint64(mask)).astype(np.uint32)


def bf16_bits_to_f32(patterns: np.ndarray) -> np.ndarray:
    """Value-exact widening of BF16 bit patterns to float32."""
    return (patterns.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round float32 values to BF16 patterns (round-to-nearest-even, NaN-safe)."""
    u = values.astype(np.float32).view(np.uint32)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    nan = (u & 0x7F800000) == 0x7F800000
    nan &= (u & 0x007FFFFF) != 0
    trunc = u >> 16
    trunc = np.where((trunc & 0x7F) == 0, trunc | 1, trunc)  # keep NaNs NaN
    return np.where(nan, trunc, rounded).astype(np.uint16)


def _f32_pattern_to_bf16(u32: int) -> int:
    if (u32 & 0x7F800000) == 0x7F800000 and (u32 & 0x007FFFFF) != 0:
        r = u32 >> 16
        return r | 1 if (r & 0x7F) == 0 else r
    return ((u32 + 0x7FFF + ((u32 >> 16) & 1)) >> 16) & 0xFFFF
