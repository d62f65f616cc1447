"""Payload embedding and extraction engines.

General mode replaces the bottom n bits of float storage patterns directly.
Robust mode embeds into quantized integer codes and writes the dequantized
floats back, so that a later quantization pass reproduces the codes and the
payload survives.

Robust mode only touches *eligible* codes. Eligibility reads nothing but the
code bits above the replaced field, so embedder and extractor derive the
same element walk independently, and it keeps every reachable code strictly
inside the scheme's anchor band, so the block scale never recomputes
differently. Blocks that carry no usable anchor (zero scale, or a clamped
block whose anchor code is missing) are skipped entirely; both sides can see
that from the quantized codes alone.

Embedded tensors are written at float32 even when the source is half
precision: a half-precision scale times a small integer code is exactly
representable in float32 but not generally in float16, and exactness there
is what the whole robust round trip rests on. A mandatory verification pass
re-extracts the payload before the result is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quant, tensorfile
from ._grouping import DEFAULT_LAYER_PATTERN, effective_element_count, resolve_group
from .bitcodec import extract_low_bits, replace_low_bits
from .errors import (
    BadWidth,
    CapacityExceeded,
    ChecksumMismatch,
    GroupResolutionError,
    LengthMismatch,
    StabilityVerificationFailed,
    UnsupportedDtype,
)
from .payload import EmbedManifest, PayloadFrame, recover_from_values
from .quant import BLOCK, AffineQuantParams
from .tensorfile import Dtype, ModelFile, ParameterGroup


@dataclass(frozen=True)
class EligibilityRule:
    """Fill-invariant predicate over the bits of a quantized code above the
    replaced n-bit field.

    A code is eligible when every value reachable by rewriting its bottom n
    bits stays inside the scheme's safe band: [-126, 126] for Q8_0 (so the
    +-127 anchors are untouched and nothing can become a new anchor or hit
    -128), [1, 15] for Q4_0 (code 0 is the anchor), and one step inside the
    code range for the affine scheme (so clamping can never bite).
    """

    scheme: str
    n: int
    affine: AffineQuantParams | None = None

    def __post_init__(self):
        if self.scheme not in ("q8_0", "q4_0", "affine"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.n < 1:
            raise BadWidth(f"n must be at least 1, got {self.n}")
        width = {"q8_0": 8, "q4_0": 4}.get(self.scheme)
        if width is not None and self.n > width:
            raise BadWidth(f"n={self.n} exceeds the {self.scheme} code width")
        if self.scheme == "affine" and self.affine is None:
            raise ValueError("affine scheme requires AffineQuantParams")

    @property
    def band(self) -> tuple[int, int]:
        if self.scheme == "q8_0":
            return -126, 126
        if self.scheme == "q4_0":
            return 1, 15
        return self.affine.min_code + 1, self.affine.max_code - 1


def eligible(code: int, rule: EligibilityRule) -> bool:
    """True when all 2^n LSB fills of ``code`` stay inside the safe band."""
    lo = (int(code) >> rule.n) << rule.n
    hi = lo + (1 << rule.n) - 1
    band_lo, band_hi = rule.band
    return lo >= band_lo and hi <= band_hi


def _eligible_mask(codes: np.ndarray, rule: EligibilityRule) -> np.ndarray:
    wide = codes.astype(np.int64)
    lo = (wide >> rule.n) << rule.n
    hi = lo + (1 << rule.n) - 1
    band_lo, band_hi = rule.band
    return (lo >= band_lo) & (hi <= band_hi)


def _block_gate(scales: np.ndarray, codes: np.ndarray, scheme: str) -> np.ndarray:
    """Per-block stability gate: the scale must be reconstructible from the
    dequantized values alone."""
    nonzero = scales.astype(np.float32) != 0.0
    if scheme == "q8_0":
        return nonzero & (np.abs(codes.astype(np.int16)).max(axis=1) == quant.Q8_ANCHOR)
    return nonzero & (codes == 0).any(axis=1)


# --- general mode -------------------------------------------------------------

def _check_general_group(model: ModelFile, group: ParameterGroup, n: int,
                         offset: int):
    for rng in group.members:
        rec = model.tensor(rng.tensor)
        if not rec.dtype.is_float:
            raise UnsupportedDtype(
                f"group member {rec.name!r} has dtype {rec.dtype.value}; "
                "general-mode embedding needs float storage")
        if n + offset > rec.dtype.element_bits:
            raise BadWidth(
                f"{n} bits at offset {offset} exceed the {rec.dtype.value} "
                f"width of {rec.name!r}")


def _apply_general(model: ModelFile, group: ParameterGroup,
                   seg_values: np.ndarray, n: int, offset: int) -> ModelFile:
    out = model.mutable_copy()
    pos = 0
    for rng in group.members:
        if pos >= len(seg_values):
            break
        rec = out.tensor(rng.tensor)
        take = min(rng.stop - rng.start, len(seg_values) - pos)
        view = out.pattern_view(rec)
        sl = slice(rng.start, rng.start + take)
        view[sl] = replace_low_bits(view[sl], seg_values[pos: pos + take], n, offset)
        pos += take
    return out


def embed_general(model: ModelFile, group: ParameterGroup, frame: PayloadFrame,
                  *, offset: int = 0,
                  layer_pattern: str | None = None) -> tuple[ModelFile, EmbedManifest]:
    """Replace the bottom n bits of the group's first ``num_segments``
    elements with the payload segments; every other bit is untouched."""
    _check_general_group(model, group, frame.n, offset)
    if frame.num_segments > group.size:
        raise CapacityExceeded(
            f"payload needs {frame.num_segments} carrier elements, group "
            f"{group.id!r} holds {group.size}")
    out = _apply_general(model, group, frame.segment_values, frame.n, offset)
    manifest = EmbedManifest(
        mode="general", scheme="none", grouping_strategy=group.strategy.value,
        group_id=group.id, n=frame.n, payload_bits=frame.payload_bits,
        pad_len=frame.pad_len, crc32=frame.crc32, seed=frame.seed,
        offset=offset, layer_pattern=layer_pattern)
    return out, manifest


# --- robust mode ---------------------------------------------------------------

def _range_is_whole_tensor(model: ModelFile, rng) -> bool:
    return rng.start == 0 and rng.stop == effective_element_count(
        model, model.tensor(rng.tensor))


def _block_stream(model: ModelFile, rec, scheme: str):
    """Quantized view of one tensor: (scales, code rows, real element count)."""
    if rec.dtype.is_float:
        values = model.float_values(rec)
        real = values.size
        rem = real % BLOCK
        if rem:
            values = np.concatenate([values, np.zeros(BLOCK - rem, np.float32)])
        scales, codes = quant._quantize_rows(values.reshape(-1, BLOCK), scheme)
        return scales, codes, real
    want = Dtype.Q8_0 if scheme == "q8_0" else Dtype.Q4_0
    if rec.dtype is not want:
        raise UnsupportedDtype(
            f"{rec.name!r} stores {rec.dtype.value} but the manifest scheme "
            f"is {scheme}")
    scales, codes = quant.unpack_blocks(model.tensor_bytes(rec), scheme)
    return scales, codes, effective_element_count(model, rec)


def _eligible_flat(scales, codes, real: int, rule: EligibilityRule) -> np.ndarray:
    mask = _block_gate(scales, codes, rule.scheme)[:, None] & _eligible_mask(
        codes, rule)
    flat = mask.reshape(-1)
    flat[real:] = False  # padding is never a carrier
    return flat


def _affine_codes(model: ModelFile, rec, rule: EligibilityRule):
    if not rec.dtype.is_float:
        raise UnsupportedDtype(
            f"{rec.name!r} is {rec.dtype.value}; the affine scheme reads float "
            "tensors (quantized deployment is simulated in memory)")
    values = model.float_values(rec)
    codes = quant.affine_quantize_array(values, rule.affine)
    return values, codes


def robust_capacity_slots(model: ModelFile, group: ParameterGroup,
                          rule: EligibilityRule) -> int:
    """Number of codes in the group a robust payload may occupy."""
    total = 0
    for rng in group.members:
        rec = model.tensor(rng.tensor)
        if rule.scheme == "affine":
            _, codes = _affine_codes(model, rec, rule)
            total += int(_eligible_mask(codes, rule)[rng.start: rng.stop].sum())
            continue
        if not _range_is_whole_tensor(model, rng):
            raise GroupResolutionError(
                "robust mode requires whole-tensor group ranges (blocks are "
                "tensor-aligned)")
        scales, codes, real = _block_stream(model, rec, rule.scheme)
        total += int(_eligible_flat(scales, codes, real, rule).sum())
    return total


def embed_robust(model: ModelFile, group: ParameterGroup, frame: PayloadFrame,
                 scheme: str, *, affine: AffineQuantParams | None = None,
                 layer_pattern: str | None = None) -> tuple[ModelFile, EmbedManifest]:
    """Embed into quantized codes and write dequantized float32 back.

    Only blocks that received payload bits are rewritten; everything else is
    byte-identical. The result is verified by re-quantizing and re-extracting
    before it is returned.
    """
    rule = EligibilityRule(scheme, frame.n, affine)
    seg_values = frame.segment_values
    replacements: dict[str, tuple] = {}
    pos = 0

    for rng in group.members:
        rec = model.tensor(rng.tensor)
        if not rec.dtype.is_float:
            raise UnsupportedDtype(
                f"group member {rec.name!r} has dtype {rec.dtype.value}; "
                "robust embedding starts from a float model")
        if pos >= len(seg_values):
            break
        if scheme == "affine":
            values, codes = _affine_codes(model, rec, rule)
            elig = np.flatnonzero(_eligible_mask(codes, rule)[rng.start: rng.stop])
            take = min(len(elig), len(seg_values) - pos)
            if take == 0:
                continue
            slots = elig[:take] + rng.start
            new_codes = codes[slots]
            new_codes = (new_codes >> rule.n << rule.n) | seg_values[
                pos: pos + take].astype(np.int64)
            new_values = values.copy()
            new_values[slots] = quant.affine_dequantize_array(new_codes, affine)
            replacements[rec.name] = (Dtype.F32, rec.shape,
                                      new_values.astype("<f4").tobytes())
            pos += take
            continue

        if not _range_is_whole_tensor(model, rng):
            raise GroupResolutionError(
                "robust mode requires whole-tensor group ranges (blocks are "
                "tensor-aligned)")
        scales, codes, real = _block_stream(model, rec, scheme)
        elig = np.flatnonzero(_eligible_flat(scales, codes, real, rule))
        take = min(len(elig), len(seg_values) - pos)
        if take == 0:
            continue
        slots = elig[:take]
        flat = codes.reshape(-1)
        segs = seg_values[pos: pos + take].astype(flat.dtype)
        width_mask = flat.dtype.type(((1 << rule.n) - 1))
        flat[slots] = (flat[slots] & ~width_mask) | segs
        pos += take

        touched = np.unique(slots // BLOCK)
        deq = quant._dequantize_rows(scales[touched], codes[touched], scheme)
        new_values = model.float_values(rec)
        for row, b in enumerate(touched):
            span = min(BLOCK, real - b * BLOCK)
            new_values[b * BLOCK: b * BLOCK + span] = deq[row, :span]
        replacements[rec.name] = (Dtype.F32, rec.shape,
                                  new_values.astype("<f4").tobytes())

    if pos < len(seg_values):
        raise CapacityExceeded(
            f"payload needs {len(seg_values)} eligible codes, group "
            f"{group.id!r} offers only {pos}")

    entries = []
    for rec in model.tensors:
        if rec.name in replacements:
            dtype, shape, data = replacements[rec.name]
            entries.append((rec.name, dtype, shape, data))
        else:
            entries.append((rec.name, rec.dtype, rec.shape,
                            bytes(model.tensor_bytes(rec))))
    out = tensorfile.build_model(entries, metadata=dict(model.metadata),
                                 format=model.format)

    manifest = EmbedManifest(
        mode="robust", scheme=scheme, grouping_strategy=group.strategy.value,
        group_id=group.id, n=frame.n, payload_bits=frame.payload_bits,
        pad_len=frame.pad_len, crc32=frame.crc32, seed=frame.seed,
        layer_pattern=layer_pattern,
        affine_scale=None if affine is None else affine.scale,
        affine_zero_point=None if affine is None else affine.zero_point,
        affine_min_code=None if affine is None else affine.min_code,
        affine_max_code=None if affine is None else affine.max_code)

    try:
        recovered = extract(out, manifest)
    except (ChecksumMismatch, LengthMismatch) as exc:
        raise StabilityVerificationFailed(
            f"verification pass could not recover the payload: {exc}") from exc
    if recovered != frame.raw:
        raise StabilityVerificationFailed(
            "verification pass recovered different payload bytes")
    return out, manifest


# --- extraction -----------------------------------------------------------------

def _manifest_rule(manifest: EmbedManifest) -> EligibilityRule:
    affine = None
    if manifest.scheme == "affine":
        affine = AffineQuantParams(
            manifest.affine_scale, manifest.affine_zero_point,
            manifest.affine_min_code, manifest.affine_max_code)
    return EligibilityRule(manifest.scheme, manifest.n, affine)


def extract(model: ModelFile, manifest: EmbedManifest, *,
            layer_pattern: str | None = None) -> bytes:
    """Recover payload bytes from an embedded (possibly re-quantized) model."""
    pattern = layer_pattern or manifest.layer_pattern or DEFAULT_LAYER_PATTERN
    num = manifest.num_segments

    if manifest.mode == "general":
        if any(t.dtype.is_quantized for t in model.tensors):
            # Deployed quantized model: extraction sees the dequantized floats.
            model = quant.dequantize_model(model)
        group = resolve_group(model, manifest.group_id, pattern)
        if num > group.size:
            raise LengthMismatch(
                f"manifest needs {num} carrier elements, group {group.id!r} "
                f"holds {group.size}")
        values = np.empty(num, dtype=np.uint32)
        pos = 0
        for rng in group.members:
            if pos >= num:
                break
            rec = model.tensor(rng.tensor)
            take = min(rng.stop - rng.start, num - pos)
            patterns = model.pattern_view(rec)[rng.start: rng.start + take]
            values[pos: pos + take] = extract_low_bits(
                patterns, manifest.n, manifest.offset)
            pos += take
        return recover_from_values(values, manifest)

    rule = _manifest_rule(manifest)
    group = resolve_group(model, manifest.group_id, pattern)
    chunks: list[np.ndarray] = []
    got = 0
    for rng in group.members:
        if got >= num:
            break
        rec = model.tensor(rng.tensor)
        if rule.scheme == "affine":
            _, codes = _affine_codes(model, rec, rule)
            elig = np.flatnonzero(_eligible_mask(codes, rule)[rng.start: rng.stop])
            take = min(len(elig), num - got)
            picked = codes[elig[:take] + rng.start]
        else:
            if not _range_is_whole_tensor(model, rng):
                raise GroupResolutionError(
                    "robust mode requires whole-tensor group ranges")
            scales, codes, real = _block_stream(model, rec, rule.scheme)
            elig = np.flatnonzero(_eligible_flat(scales, codes, real, rule))
            take = min(len(elig), num - got)
            picked = codes.reshape(-1)[elig[:take]]
        chunks.append(extract_low_bits(picked, rule.n))
        got += take
    if got < num:
        raise LengthMismatch(
            f"group {manifest.group_id!r} yields {got} eligible codes, "
            f"manifest needs {num}")
    values = np.concatenate(chunks) if chunks else np.empty(0, np.uint32)
    return recover_from_values(values, manifest)
