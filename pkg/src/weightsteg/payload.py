"""Payload framing: bytes to bit segments and back, plus the sidecar manifest.

The payload bit string is the MSB-first expansion of the raw bytes, padded
with seeded pseudorandom bits up to a multiple of the segment width n, then
cut into n-bit segments. Extraction reverses this and verifies a CRC-32 so
that a destroyed payload is a loud failure instead of garbage bytes.

The manifest is a sidecar JSON document. It deliberately lives outside the
model file and records everything extraction needs; nothing self-describing
is ever placed in-band.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .bitcodec import BitString
from .errors import BadWidth, ChecksumMismatch, LengthMismatch, WidthMismatch

TOOLKIT_VERSION = "0.1.0"

MODES = ("general", "robust")
SCHEMES = ("none", "q8_0", "q4_0", "affine")


@dataclass
class PayloadFrame:
    """A payload prepared for embedding at segment width ``n``."""

    raw: bytes
    n: int
    seed: int
    pad_len: int
    bits: np.ndarray = field(repr=False)  # payload bits followed by pad bits

    @property
    def payload_bits(self) -> int:
        return len(self.raw) * 8

    @property
    def num_segments(self) -> int:
        return len(self.bits) // self.n

    @property
    def segment_values(self) -> np.ndarray:
        """Segments as integers, MSB-first within each segment."""
        weights = (1 << np.arange(self.n - 1, -1, -1)).astype(np.uint32)
        return (self.bits.reshape(-1, self.n).astype(np.uint32) * weights).sum(
            axis=1, dtype=np.uint32)

    @property
    def s(self) -> BitString:
        """The payload bit string (pad excluded). Intended for small payloads."""
        return BitString("".join(map(str, self.bits[: self.payload_bits])))

    @property
    def segments(self) -> list[BitString]:
        """Materialized segment list. Intended for small payloads and tests."""
        return [BitString.from_int(int(v), self.n) for v in self.segment_values]

    @property
    def crc32(self) -> int:
        return zlib.crc32(self.raw) & 0xFFFFFFFF


def prepare_payload(raw: bytes, n: int, seed: int) -> PayloadFrame:
    """Expand raw bytes MSB-first, pad to a multiple of n with seeded bits."""
    if n < 1:
        raise BadWidth(f"segment width must be at least 1, got {n}")
    bits = np.unpackbits(np.frombuffer(bytes(raw), dtype=np.uint8))
    pad_len = (-len(bits)) % n
    if pad_len:
        rng = np.random.default_rng(seed)
        bits = np.concatenate([bits, rng.integers(0, 2, pad_len, dtype=np.uint8)])
    return PayloadFrame(bytes(raw), n, seed, pad_len, bits)


def recover_payload(segments: Sequence[BitString], manifest: "EmbedManifest") -> bytes:
    """Reassemble segments, strip pad, re-pack and verify the CRC-32."""
    values = np.empty(len(segments), dtype=np.uint32)
    for i, seg in enumerate(segments):
        if seg.width != manifest.n:
            raise WidthMismatch(
                f"segment {i} has width {seg.width}, manifest says {manifest.n}")
        values[i] = seg.value
    return recover_from_values(values, manifest)


def recover_from_values(values: np.ndarray, manifest: "EmbedManifest") -> bytes:
    """Vector form of recover_payload over packed segment values."""
    n = manifest.n
    total = len(values) * n
    if total < manifest.payload_bits:
        raise LengthMismatch(
            f"{total} extracted bits cannot hold a {manifest.payload_bits}-bit payload")
    shifts = np.arange(n - 1, -1, -1, dtype=np.uint32)
    bits = ((values[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    bits = bits[: manifest.payload_bits]
    raw = np.packbits(bits).tobytes()
    actual = zlib.crc32(raw) & 0xFFFFFFFF
    if actual != manifest.crc32:
        raise ChecksumMismatch(
            "recovered payload fails the CRC-32 check (payload destroyed "
            "or wrong manifest)",
            expected_crc=manifest.crc32, actual_crc=actual, recovered=raw)
    return raw


def bit_error_rate(recovered: bytes, reference: bytes) -> float:
    """Fraction of differing bits between two equal-purpose byte strings."""
    a = np.frombuffer(recovered, dtype=np.uint8)
    b = np.frombuffer(reference, dtype=np.uint8)
    nbits = 8 * max(len(a), len(b))
    if nbits == 0:
        return 0.0
    length = min(len(a), len(b))
    diff = int(np.unpackbits(a[:length] ^ b[:length]).sum())
    diff += 8 * (max(len(a), len(b)) - length)  # missing bytes count as wrong
    return diff / nbits


@dataclass
class EmbedManifest:
    """Sidecar record of an embedding: everything extraction needs."""

    mode: str
    scheme: str
    grouping_strategy: str
    group_id: str
    n: int
    payload_bits: int
    pad_len: int
    crc32: int
    seed: int
    version: str = TOOLKIT_VERSION
    offset: int = 0
    layer_pattern: str | None = None
    affine_scale: float | None = None
    affine_zero_point: int | None = None
    affine_min_code: int | None = None
    affine_max_code: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.n < 1:
            raise ValueError(f"n must be at least 1, got {self.n}")
        if self.payload_bits < 0 or self.pad_len < 0 or self.pad_len >= self.n:
            raise ValueError("invalid payload_bits/pad_len")

    @property
    def num_segments(self) -> int:
        return (self.payload_bits + self.pad_len) // self.n

    def to_json(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EmbedManifest":
        doc = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path):
        path = os.fspath(path)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                                   prefix=os.path.basename(path) + ".")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(self.to_json())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "EmbedManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())
