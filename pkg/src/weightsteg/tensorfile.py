"""Weight-file parsing, element addressing, and re-serialization.

Supports safetensors read/write and a read-only GGUF v3 subset (F32, F16,
Q8_0, Q4_0). Parsing is zero-copy: tensor records reference byte ranges of
the underlying buffer, which may be an mmap for large files. Element order
is canonical everywhere: tensors in file declaration order, elements flat
row-major over the stored bytes.

Quantized tensors persist to safetensors through a toolkit-private
convention (raw U8 data plus a ``quantized_layout`` metadata key) because
GGUF writing is out of scope.
"""

from __future__ import annotations

import enum
import hashlib
import json
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import bitcodec
from .errors import (
    IndexOutOfGroup,
    MalformedHeader,
    OverlappingTensors,
    UnsupportedDtype,
    UnsupportedModelFormat,
    UnsupportedWriteFormat,
    WeightStegError,
    WriteToQuantizedDtype,
)

LAYOUT_META_KEY = "quantized_layout"
_HEADER_LIMIT = 256 * 1024 * 1024


class ModelFormat(enum.Enum):
    SAFETENSORS = "safetensors"
    GGUF = "gguf"


class Dtype(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"
    Q8_0 = "Q8_0"
    Q4_0 = "Q4_0"

    @property
    def is_float(self) -> bool:
        return self in (Dtype.F32, Dtype.F16, Dtype.BF16)

    @property
    def is_quantized(self) -> bool:
        return not self.is_float

    @property
    def element_bits(self) -> int:
        """Storage width of one element (the code width for block schemes)."""
        return {"F32": 32, "F16": 16, "BF16": 16, "Q8_0": 8, "Q4_0": 4}[self.value]

    @property
    def block_layout(self) -> tuple[int, int]:
        """(elements per block, bytes per block) for quantized dtypes."""
        if self is Dtype.Q8_0:
            return 32, 34
        if self is Dtype.Q4_0:
            return 32, 18
        raise UnsupportedDtype(f"{self.value} is not a block dtype")

    def nbytes(self, element_count: int) -> int:
        if self.is_float:
            return element_count * (self.element_bits // 8)
        per_block, block_bytes = self.block_layout
        if element_count % per_block:
            raise MalformedHeader(
                f"{self.value} element count {element_count} not a multiple "
                f"of {per_block}")
        return element_count // per_block * block_bytes


_SCALAR_TYPES = {
    Dtype.F32: bitcodec.ScalarType.F32,
    Dtype.F16: bitcodec.ScalarType.F16,
    Dtype.BF16: bitcodec.ScalarType.BF16,
    Dtype.Q8_0: bitcodec.ScalarType.INT8,
    Dtype.Q4_0: bitcodec.ScalarType.UINT4,
}


def scalar_type(dtype: Dtype) -> bitcodec.ScalarType:
    return _SCALAR_TYPES[dtype]


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data_offset: int
    data_length: int

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


class GroupRange(NamedTuple):
    tensor: str
    start: int
    stop: int


class GroupStrategy(str, enum.Enum):
    MODEL = "model"
    NAME = "name"
    LAYER = "layer"
    MATRIX = "matrix"


@dataclass(frozen=True)
class ParameterGroup:
    """An ordered run of elements: tensors in file order, row-major within."""

    id: str
    strategy: GroupStrategy
    members: tuple[GroupRange, ...]

    @property
    def size(self) -> int:
        return sum(r.stop - r.start for r in self.members)


class ModelFile:
    """A parsed weight file: ordered tensor records over a shared buffer."""

    def __init__(self, format: ModelFormat, tensors: Sequence[TensorRecord],
                 metadata: dict[str, str], buffer):
        self.format = format
        self.tensors = list(tensors)
        self.metadata = dict(metadata)
        self._buf = buffer
        self._view = memoryview(buffer)
        self._by_name = {t.name: t for t in self.tensors}
        if len(self._by_name) != len(self.tensors):
            raise MalformedHeader("duplicate tensor names")

    # -- lookup ----------------------------------------------------------

    def tensor(self, name: str) -> TensorRecord:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no tensor named {name!r}") from None

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    @property
    def total_param_count(self) -> int:
        return sum(t.element_count for t in self.tensors)

    @property
    def writable(self) -> bool:
        return not self._view.readonly

    def tensor_bytes(self, rec: TensorRecord) -> memoryview:
        return self._view[rec.data_offset: rec.data_offset + rec.data_length]

    def pattern_view(self, rec: TensorRecord) -> np.ndarray:
        """Unsigned-integer storage patterns of a float tensor (u32/u16)."""
        if not rec.dtype.is_float:
            raise UnsupportedDtype(
                f"{rec.name!r} is {rec.dtype.value}; pattern views are for floats")
        kind = "<u4" if rec.dtype is Dtype.F32 else "<u2"
        return np.frombuffer(self._buf, dtype=kind, count=rec.element_count,
                             offset=rec.data_offset)

    def float_values(self, rec: TensorRecord) -> np.ndarray:
        """Tensor values as a flat float32 copy (value-exact for all widths)."""
        if rec.dtype is Dtype.F32:
            return np.frombuffer(self._buf, dtype="<f4", count=rec.element_count,
                                 offset=rec.data_offset).copy()
        if rec.dtype is Dtype.F16:
            return np.frombuffer(self._buf, dtype="<f2", count=rec.element_count,
                                 offset=rec.data_offset).astype(np.float32)
        if rec.dtype is Dtype.BF16:
            return bitcodec.bf16_bits_to_f32(self.pattern_view(rec).copy())
        raise UnsupportedDtype(
            f"{rec.name!r} is {rec.dtype.value}; dequantize the model first")

    # -- mutation --------------------------------------------------------

    def mutable_copy(self) -> "ModelFile":
        return ModelFile(self.format, self.tensors, self.metadata,
                         bytearray(self._view))

    def whole_group(self) -> ParameterGroup:
        return ParameterGroup(
            "model:all", GroupStrategy.MODEL,
            tuple(GroupRange(t.name, 0, t.element_count) for t in self.tensors))


def build_model(entries: Iterable[tuple], metadata: dict[str, str] | None = None,
                format: ModelFormat = ModelFormat.SAFETENSORS) -> ModelFile:
    """Assemble an in-memory ModelFile from (name, dtype, shape, bytes) rows."""
    records = []
    chunks = []
    offset = 0
    for name, dtype, shape, data in entries:
        rec = TensorRecord(name, dtype, tuple(int(s) for s in shape),
                           offset, len(data))
        expected = dtype.nbytes(rec.element_count)
        if expected != len(data):
            raise MalformedHeader(
                f"tensor {name!r}: {len(data)} bytes, expected {expected}")
        records.append(rec)
        chunks.append(bytes(data))
        offset += len(data)
    return ModelFile(format, records, metadata or {}, bytearray(b"".join(chunks)))


# --- parsing -----------------------------------------------------------------

def parse_model(data, format_hint: ModelFormat | str | None = None) -> ModelFile:
    """Parse weight-file bytes; the format is detected from the magic/header."""
    view = memoryview(data)
    if len(view) == 0:
        raise MalformedHeader("empty input")
    if isinstance(format_hint, str):
        format_hint = ModelFormat(format_hint.lower())
    if format_hint is ModelFormat.GGUF or (
            format_hint is None and bytes(view[:4]) == b"GGUF"):
        return _parse_gguf(data, view)
    if format_hint in (None, ModelFormat.SAFETENSORS):
        return _parse_safetensors(data, view)
    raise UnsupportedModelFormat(f"unknown format {format_hint}")


def load_model(path: str | os.PathLike, *, writable: bool = False) -> ModelFile:
    """Parse a file through a region mapping instead of a whole-file read."""
    with open(path, "rb") as fh:
        try:
            buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        except ValueError:  # zero-length file
            raise MalformedHeader(f"{path}: empty file") from None
    model = parse_model(buf)
    return model.mutable_copy() if writable else model


def _parse_safetensors(data, view: memoryview) -> ModelFile:
    if len(view) < 8:
        raise MalformedHeader("file shorter than the 8-byte header length")
    (hlen,) = struct.unpack_from("<Q", view, 0)
    if hlen > _HEADER_LIMIT or 8 + hlen > len(view):
        raise MalformedHeader(f"declared header length {hlen} exceeds file size")
    try:
        text = bytes(view[8: 8 + hlen]).decode("utf-8")
        header = json.loads(text, object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata: dict[str, str] = {}
    layout: dict = {}
    data_start = 8 + hlen
    data_len = len(view) - data_start
    records: list[TensorRecord] = []
    for name, info in header.items():
        if name == "__metadata__":
            if not isinstance(info, dict):
                raise MalformedHeader("__metadata__ must be an object")
            metadata = {str(k): str(v) for k, v in info.items()}
            if LAYOUT_META_KEY in metadata:
                try:
                    layout = json.loads(metadata.pop(LAYOUT_META_KEY))
                except json.JSONDecodeError:
                    raise MalformedHeader(f"bad {LAYOUT_META_KEY} metadata") from None
            continue
        if not isinstance(info, dict):
            raise MalformedHeader(f"tensor {name!r}: entry must be an object")
        try:
            dtype_name = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeader(f"tensor {name!r}: {exc}") from None
        if any(s < 0 for s in shape):
            raise MalformedHeader(f"tensor {name!r}: negative dimension")
        if not (0 <= begin <= end <= data_len):
            raise MalformedHeader(
                f"tensor {name!r}: offsets [{begin}, {end}) outside data section")
        records.append(_safetensors_record(
            name, dtype_name, shape, data_start + begin, end - begin, layout))
    _check_overlap(records)
    return ModelFile(ModelFormat.SAFETENSORS, records, metadata, data)


def _safetensors_record(name, dtype_name, shape, offset, length, layout):
    if name in layout:
        entry = layout[name]
        dtype = Dtype.Q8_0 if entry["scheme"] == "q8_0" else Dtype.Q4_0
        shape = tuple(int(s) for s in entry["shape"])
        if dtype_name != "U8":
            raise MalformedHeader(
                f"tensor {name!r}: quantized layout requires U8 storage")
    else:
        try:
            dtype = Dtype(dtype_name)
        except ValueError:
            raise UnsupportedDtype(
                f"tensor {name!r}: dtype {dtype_name!r} not supported") from None
    rec = TensorRecord(name, dtype, shape, offset, length)
    if dtype.nbytes(rec.element_count) != length:
        raise MalformedHeader(
            f"tensor {name!r}: {length} data bytes inconsistent with "
            f"{rec.element_count} {dtype.value} elements")
    return rec


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise MalformedHeader(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def _check_overlap(records: Sequence[TensorRecord]):
    spans = sorted((r.data_offset, r.data_offset + r.data_length, r.name)
                   for r in records if r.data_length)
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OverlappingTensors(f"tensors {n0!r} and {n1!r} overlap")


# --- GGUF (read-only) ---------------------------------------------------------

_GGUF_VERSION = 3
_GGML_DTYPES = {0: Dtype.F32, 1: Dtype.F16, 2: Dtype.Q4_0, 8: Dtype.Q8_0}


class _Reader:
    def __init__(self, view: memoryview):
        self.view = view
        self.pos = 0

    def take(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.view, self.pos)
        except struct.error:
            raise MalformedHeader("truncated GGUF header") from None
        self.pos += struct.calcsize(fmt)
        return vals if len(vals) > 1 else vals[0]

    def string(self) -> str:
        ln = self.take("<Q")
        if self.pos + ln > len(self.view):
            raise MalformedHeader("truncated GGUF string")
        s = bytes(self.view[self.pos: self.pos + ln]).decode("utf-8", "replace")
        self.pos += ln
        return s


_GGUF_SCALARS = {
    0: "<B", 1: "<b", 2: "<H", 3: "<h", 4: "<I", 5: "<i",
    6: "<f", 7: "<?", 10: "<Q", 11: "<q", 12: "<d",
}


def _gguf_value(r: _Reader, vtype: int):
    if vtype in _GGUF_SCALARS:
        return r.take(_GGUF_SCALARS[vtype])
    if vtype == 8:
        return r.string()
    if vtype == 9:
        etype = r.take("<I")
        count = r.take("<Q")
        if count > len(r.view):
            raise MalformedHeader("array length exceeds file size")
        items = [_gguf_value(r, etype) for _ in range(count)]
        return items
    raise MalformedHeader(f"unknown GGUF value type {vtype}")


def _stringify(value) -> str:
    if isinstance(value, list):
        if len(value) > 16:
            return f"<array of {len(value)} items>"
        return json.dumps(value)
    return str(value)


def _parse_gguf(data, view: memoryview) -> ModelFile:
    r = _Reader(view)
    if bytes(view[:4]) != b"GGUF":
        raise MalformedHeader("bad magic, expected GGUF")
    r.pos = 4
    version = r.take("<I")
    if version != _GGUF_VERSION:
        raise MalformedHeader(f"unsupported GGUF version {version}")
    n_tensors = r.take("<Q")
    n_kv = r.take("<Q")
    if n_tensors > len(view) or n_kv > len(view):
        raise MalformedHeader("implausible tensor/metadata counts")

    metadata: dict[str, str] = {}
    alignment = 32
    for _ in range(n_kv):
        key = r.string()
        vtype = r.take("<I")
        value = _gguf_value(r, vtype)
        metadata[key] = _stringify(value)
        if key == "general.alignment":
            alignment = int(value)

    infos = []
    for _ in range(n_tensors):
        name = r.string()
        n_dims = r.take("<I")
        if n_dims > 8:
            raise MalformedHeader(f"tensor {name!r}: implausible rank {n_dims}")
        dims = [r.take("<Q") for _ in range(n_dims)]
        ggml_type = r.take("<I")
        offset = r.take("<Q")
        if ggml_type not in _GGML_DTYPES:
            raise UnsupportedDtype(
                f"tensor {name!r}: ggml type {ggml_type} not supported")
        infos.append((name, tuple(reversed(dims)), _GGML_DTYPES[ggml_type], offset))

    data_start = (r.pos + alignment - 1) // alignment * alignment
    records = []
    for name, shape, dtype, offset in infos:
        if offset % alignment:
            raise MalformedHeader(f"tensor {name!r}: offset not aligned")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        length = dtype.nbytes(count)
        absolute = data_start + offset
        if absolute + length > len(view):
            raise MalformedHeader(f"tensor {name!r}: data outside file bounds")
        records.append(TensorRecord(name, dtype, shape, absolute, length))
    _check_overlap(records)
    return ModelFile(ModelFormat.GGUF, records, metadata, data)


# --- writing -----------------------------------------------------------------

def write_model(model: ModelFile) -> bytes:
    """Serialize to safetensors bytes; byte-stable for identical input."""
    header, chunks = _serialize(model)
    return header + b"".join(bytes(c) for c in chunks)


def save_model(model: ModelFile, path: str | os.PathLike):
    """Stream the serialized model to ``path`` atomically."""
    header, chunks = _serialize(model)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _serialize(model: ModelFile):
    if model.format is not ModelFormat.SAFETENSORS:
        raise UnsupportedWriteFormat(
            f"writing {model.format.value} files is not supported")
    entries = []
    metadata = dict(model.metadata)
    layout = {}
    offset = 0
    for rec in model.tensors:
        if rec.dtype.is_float:
            dtype_name, shape = rec.dtype.value, list(rec.shape)
        else:
            dtype_name, shape = "U8", [rec.data_length]
            layout[rec.name] = {
                "scheme": "q8_0" if rec.dtype is Dtype.Q8_0 else "q4_0",
                "shape": list(rec.shape),
            }
        entries.append((rec.name, {
            "dtype": dtype_name,
            "shape": shape,
            "data_offsets": [offset, offset + rec.data_length],
        }))
        offset += rec.data_length
    if layout:
        metadata[LAYOUT_META_KEY] = json.dumps(layout, sort_keys=True)
    header_obj = dict(entries)
    if metadata:
        header_obj = {"__metadata__": metadata, **header_obj}
    text = json.dumps(header_obj, separators=(",", ":"), ensure_ascii=False)
    blob = text.encode("utf-8")
    blob += b" " * (-(8 + len(blob)) % 8)
    header = struct.pack("<Q", len(blob)) + blob
    return header, [model.tensor_bytes(rec) for rec in model.tensors]


def model_digest(model: ModelFile) -> str:
    """SHA-256 of the serialized bytes (of the raw file for GGUF input)."""
    h = hashlib.sha256()
    if model.format is ModelFormat.GGUF:
        h.update(model._view)
    else:
        header, chunks = _serialize(model)
        h.update(header)
        for chunk in chunks:
            h.update(chunk)
    return h.hexdigest()


# --- element addressing --------------------------------------------------------

def _locate(model: ModelFile, group: ParameterGroup, index: int):
    if index < 0:
        raise IndexOutOfGroup(f"index {index} is negative")
    remaining = index
    for rng in group.members:
        length = rng.stop - rng.start
        if remaining < length:
            return model.tensor(rng.tensor), rng.start + remaining
        remaining -= length
    raise IndexOutOfGroup(f"index {index} outside group of size {group.size}")


def element_at(model: ModelFile, group: ParameterGroup, index: int, *,
               as_codes: bool = False):
    """Read the index-th element in group order.

    Float tensors return the float value; quantized tensors return the
    dequantized value, or the raw integer code with ``as_codes=True``.
    """
    rec, idx = _locate(model, group, index)
    if rec.dtype.is_float:
        pattern = int(model.pattern_view(rec)[idx])
        return float(bitcodec.from_bits(
            bitcodec.BitString.from_int(pattern, rec.dtype.element_bits),
            scalar_type(rec.dtype)))
    code, scale = _read_code(model, rec, idx)
    if as_codes:
        return code
    if rec.dtype is Dtype.Q8_0:
        return float(np.float32(scale) * np.float32(code))
    return float(np.float32(scale) * np.float32(code - 8))


def set_element(model: ModelFile, group: ParameterGroup, index: int, value, *,
                as_codes: bool = False):
    """Write the index-th element in group order, preserving dtype width."""
    if not model.writable:
        raise WeightStegError("model buffer is read-only; use mutable_copy()")
    rec, idx = _locate(model, group, index)
    if rec.dtype.is_float:
        if rec.dtype is Dtype.F32:
            pattern = int(np.float32(value).view(np.uint32))
        elif rec.dtype is Dtype.F16:
            pattern = int(np.float16(value).view(np.uint16))
        else:
            pattern = int(bitcodec.f32_to_bf16_bits(np.float32(value).reshape(1))[0])
        model.pattern_view(rec)[idx] = pattern
        return
    if not as_codes:
        raise WriteToQuantizedDtype(
            f"{rec.name!r} stores {rec.dtype.value} codes; pass as_codes=True "
            "to address them as raw integers")
    _write_code(model, rec, idx, int(value))


def _block_span(rec: TensorRecord, idx: int):
    per_block, block_bytes = rec.dtype.block_layout
    return rec.data_offset + (idx // per_block) * block_bytes, idx % per_block


def _read_code(model: ModelFile, rec: TensorRecord, idx: int):
    base, pos = _block_span(rec, idx)
    scale = np.frombuffer(model._buf, dtype="<f2", count=1, offset=base)[0]
    if rec.dtype is Dtype.Q8_0:
        code = int(np.frombuffer(model._buf, "<i1", 32, base + 2)[pos])
    else:
        byte = model._view[base + 2 + (pos % 16)]
        code = (byte & 0x0F) if pos < 16 else (byte >> 4)
    return code, scale


def _write_code(model: ModelFile, rec: TensorRecord, idx: int, code: int):
    from .errors import CodeOutOfRange

    base, pos = _block_span(rec, idx)
    if rec.dtype is Dtype.Q8_0:
        if not -128 <= code <= 127:
            raise CodeOutOfRange(f"{code} outside int8 range")
        struct.pack_into("<b", model._buf, base + 2 + pos, code)
    else:
        if not 0 <= code <= 15:
            raise CodeOutOfRange(f"{code} outside nibble range")
        at = base + 2 + (pos % 16)
        old = model._buf[at]
        model._buf[at] = (old & 0xF0) | code if pos < 16 else (old & 0x0F) | (code << 4)
