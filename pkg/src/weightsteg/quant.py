"""Reference quantization: generic affine and GGUF-style Q8_0 / Q4_0 blocks.

The block schemes follow the GGUF layouts (32 elements per block, half-
precision scale). Codes are computed against the *stored* half-precision
scale, and dequantized products are computed in single precision: a half
scale times an 8-bit code is exactly representable in float32, which is what
makes requantization of dequantized blocks bit-exact as long as the block's
anchor code is preserved. Ties round half-to-even.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CodeOutOfRange,
    IncompatibleShape,
    NonFiniteInput,
    ScaleOverflow,
    UnsupportedDtype,
)
from . import tensorfile
from .tensorfile import Dtype, ModelFile, TensorRecord

BLOCK = 32
Q8_ANCHOR = 127          # max-|x| element quantizes to +-127
Q4_OFFSET = 8            # stored nibble minus 8 is the signed level
QUANT_META_KEY = "quantized_tensors"
SCHEME_META_KEY = "quantization_scheme"

THREADS_ENV = "WEIGHTSTEG_THREADS"


@dataclass(frozen=True)
class AffineQuantParams:
    """Scale / zero-point pair of the generic affine scheme."""

    scale: float
    zero_point: int
    min_code: int = -128
    max_code: int = 127

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not self.min_code <= self.zero_point <= self.max_code:
            raise ValueError(
                f"zero point {self.zero_point} outside code range "
                f"[{self.min_code}, {self.max_code}]")


@dataclass
class QuantBlock:
    """One 32-element block: half-precision scale plus integer codes."""

    scheme: str                       # "q8_0" | "q4_0"
    scale: np.float16
    codes: np.ndarray = field(repr=False)  # int8 for q8_0, uint8 nibbles for q4_0

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.shape != (BLOCK,):
            raise IncompatibleShape(f"block must hold {BLOCK} codes")
        if self.scheme == "q8_0":
            if self.codes.min() < -127 or self.codes.max() > 127:
                raise CodeOutOfRange("q8_0 codes must lie in [-127, 127]")
        elif self.scheme == "q4_0":
            if self.codes.min() < 0 or self.codes.max() > 15:
                raise CodeOutOfRange("q4_0 codes must lie in [0, 15]")
        else:
            raise ValueError(f"unknown block scheme {self.scheme!r}")


def affine_quantize(x: float, p: AffineQuantParams) -> int:
    """clamp(round_half_even(x / scale) + zero_point) onto the code range."""
    q = round(x / p.scale) + p.zero_point
    return max(p.min_code, min(p.max_code, q))


def affine_dequantize(q: int, p: AffineQuantParams) -> float:
    if not p.min_code <= q <= p.max_code:
        raise CodeOutOfRange(f"code {q} outside [{p.min_code}, {p.max_code}]")
    return p.scale * (q - p.zero_point)


def affine_quantize_array(values: np.ndarray, p: AffineQuantParams) -> np.ndarray:
    q = np.round(values.astype(np.float64) / p.scale).astype(np.int64) + p.zero_point
    return np.clip(q, p.min_code, p.max_code)


def affine_dequantize_array(codes: np.ndarray, p: AffineQuantParams) -> np.ndarray:
    return ((codes.astype(np.float64) - p.zero_point) * p.scale).astype(np.float32)


# --- block schemes ----------------------------------------------------------

def block_quantize(values, scheme: str) -> QuantBlock:
    """Quantize exactly 32 finite reals into one block."""
    v = np.asarray(values, dtype=np.float32)
    if v.shape != (BLOCK,):
        raise IncompatibleShape(f"expected {BLOCK} values, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NonFiniteInput("block contains non-finite values")
    scales, codes = _quantize_rows(v.reshape(1, BLOCK), scheme)
    return QuantBlock(scheme, scales[0], codes[0])


def block_dequantize(block: QuantBlock) -> np.ndarray:
    return _dequantize_rows(np.array([block.scale], dtype=np.float16),
                            block.codes.reshape(1, BLOCK), block.scheme)[0]


def _quantize_rows(rows: np.ndarray, scheme: str):
    """Vector core: rows shaped (n_blocks, 32) -> (f16 scales, code rows)."""
    if scheme == "q8_0":
        d32 = np.abs(rows).max(axis=1) / np.float32(Q8_ANCHOR)
    elif scheme == "q4_0":
        imax = np.abs(rows).argmax(axis=1)
        anchor = rows[np.arange(rows.shape[0]), imax]
        d32 = anchor / np.float32(-8.0)
    else:
        raise ValueError(f"unknown block scheme {scheme!r}")
    d16 = d32.astype(np.float16)
    if not np.isfinite(d16).all():
        raise ScaleOverflow("block magnitude exceeds the half-precision scale range")
    d = d16.astype(np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = rows / d[:, None]
    if scheme == "q8_0":
        codes = np.where(d[:, None] == 0, 0.0, np.round(ratio))
        codes = np.clip(codes, -Q8_ANCHOR, Q8_ANCHOR).astype(np.int8)
    else:
        codes = np.where(d[:, None] == 0, 0.0, np.round(ratio)) + Q4_OFFSET
        codes = np.clip(codes, 0, 15).astype(np.uint8)
    return d16, codes


def _dequantize_rows(scales: np.ndarray, codes: np.ndarray, scheme: str) -> np.ndarray:
    d = scales.astype(np.float32)[:, None]
    if scheme == "q8_0":
        return d * codes.astype(np.float32)
    return d * (codes.astype(np.float32) - np.float32(Q4_OFFSET))


# --- block byte layout -------------------------------------------------------

def pack_blocks(scales: np.ndarray, codes: np.ndarray, scheme: str) -> bytes:
    """Serialize block rows into the on-disk GGUF layout."""
    nb = scales.shape[0]
    dbytes = scales.astype("<f2").view(np.uint8).reshape(nb, 2)
    if scheme == "q8_0":
        out = np.empty((nb, 34), dtype=np.uint8)
        out[:, :2] = dbytes
        out[:, 2:] = codes.view(np.uint8)
    else:
        out = np.empty((nb, 18), dtype=np.uint8)
        out[:, :2] = dbytes
        out[:, 2:] = codes[:, :16] | (codes[:, 16:] << np.uint8(4))
    return out.tobytes()


def unpack_blocks(data, scheme: str):
    """Parse raw block bytes into (f16 scales, code rows)."""
    raw = np.frombuffer(data, dtype=np.uint8)
    size = 34 if scheme == "q8_0" else 18
    if raw.size % size:
        raise IncompatibleShape(
            f"{scheme} data length {raw.size} is not a multiple of {size}")
    raw = raw.reshape(-1, size)
    scales = raw[:, :2].copy().view("<f2").reshape(-1)
    if scheme == "q8_0":
        codes = raw[:, 2:].copy().view(np.int8)
    else:
        packed = raw[:, 2:]
        codes = np.empty((raw.shape[0], BLOCK), dtype=np.uint8)
        codes[:, :16] = packed & 0x0F
        codes[:, 16:] = packed >> 4
    return scales, codes


def scheme_dtype(scheme: str) -> Dtype:
    return Dtype.Q8_0 if scheme == "q8_0" else Dtype.Q4_0


# --- model-level simulation ---------------------------------------------------

def quantize_model(model: ModelFile, scheme: str, *, pad: bool = True,
                   threads: int | None = None) -> ModelFile:
    """Replace every float tensor with its block-quantized form.

    Simulates user-side quantized deployment. Tensors whose element count is
    not a multiple of 32 are zero-padded into the final block (the padding is
    recorded in metadata and stripped again by dequantize_model); with
    ``pad=False`` such tensors raise IncompatibleShape.
    """
    if scheme not in ("q8_0", "q4_0"):
        raise ValueError(f"unknown block scheme {scheme!r}")
    for rec in model.tensors:
        if not rec.dtype.is_float:
            raise UnsupportedDtype(
                f"tensor {rec.name!r} has dtype {rec.dtype.value}; "
                "only float models can be quantized")

    padded: dict[str, list] = {}

    def _one(rec: TensorRecord):
        values = model.float_values(rec)
        n = values.size
        rem = n % BLOCK
        if rem:
            if not pad:
                raise IncompatibleShape(
                    f"tensor {rec.name!r} has {n} elements, not a multiple of {BLOCK}")
            values = np.concatenate([values, np.zeros(BLOCK - rem, np.float32)])
        scales, codes = _quantize_rows(values.reshape(-1, BLOCK), scheme)
        data = pack_blocks(scales, codes, scheme)
        shape = rec.shape if rem == 0 else (values.size,)
        if rem:
            padded[rec.name] = list(rec.shape)
        return rec.name, scheme_dtype(scheme), shape, data

    results = _map_tensors(_one, model.tensors, threads)

    metadata = dict(model.metadata)
    metadata[SCHEME_META_KEY] = scheme
    if padded:
        meta = json.loads(metadata.get(QUANT_META_KEY, "{}"))
        meta.update({k: {"orig_shape": v} for k, v in padded.items()})
        metadata[QUANT_META_KEY] = json.dumps(meta, sort_keys=True)
    return tensorfile.build_model(results, metadata=metadata, format=model.format)


def dequantize_model(model: ModelFile, *, threads: int | None = None) -> ModelFile:
    """Materialize a quantized model back to float32 (simulated deployment)."""
    pad_meta = json.loads(model.metadata.get(QUANT_META_KEY, "{}"))

    def _one(rec: TensorRecord):
        if rec.dtype.is_float:
            return rec.name, rec.dtype, rec.shape, bytes(model.tensor_bytes(rec))
        scheme = "q8_0" if rec.dtype is Dtype.Q8_0 else "q4_0"
        scales, codes = unpack_blocks(model.tensor_bytes(rec), scheme)
        values = _dequantize_rows(scales, codes, scheme).reshape(-1)
        shape = rec.shape
        if rec.name in pad_meta:
            shape = tuple(pad_meta[rec.name]["orig_shape"])
            values = values[: int(np.prod(shape))]
        return rec.name, Dtype.F32, shape, values.astype("<f4").tobytes()

    results = _map_tensors(_one, model.tensors, threads)
    metadata = {k: v for k, v in model.metadata.items()
                if k not in (QUANT_META_KEY, SCHEME_META_KEY)}
    return tensorfile.build_model(results, metadata=metadata,
                                  format=tensorfile.ModelFormat.SAFETENSORS)


def thread_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def _map_tensors(fn, records, threads):
    # Output placement follows the record order, so results are identical
    # regardless of how many workers run.
    workers = thread_count(threads)
    if workers == 1 or len(records) < 2:
        return [fn(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, records))
