"""Countermeasures: random-bit sanitization and LSB bit-plane statistics.

The statistics module is report-only by design. It computes honest per-plane
counts (ones fraction, chi-square against a fair coin) and low-plane entropy;
it deliberately draws no detection verdict, because plain bit-plane
steganalysis does not separate embedded payloads from ordinary mantissa
noise at realistic embedding rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitcodec import replace_low_bits
from .errors import BadWidth, EmptySelection, UnsupportedDtype
from .quant import unpack_blocks
from .tensorfile import Dtype, ModelFile, ParameterGroup

MAX_PLANES = 16


def sanitize(model: ModelFile, k: int, seed: int) -> ModelFile:
    """Replace the bottom k bit planes of every float parameter with seeded
    pseudorandom bits; all higher planes stay byte-identical."""
    if k < 1:
        raise BadWidth(f"k must be at least 1, got {k}")
    for rec in model.tensors:
        if not rec.dtype.is_float:
            raise UnsupportedDtype(
                f"tensor {rec.name!r} has dtype {rec.dtype.value}; "
                "sanitization rewrites float parameters")
        if k >= rec.dtype.element_bits:
            raise BadWidth(
                f"k={k} must be below the {rec.dtype.value} width of "
                f"{rec.name!r}")
    rng = np.random.default_rng(seed)
    out = model.mutable_copy()
    for rec in out.tensors:
        view = out.pattern_view(rec)
        rnd = rng.integers(0, 1 << k, size=view.size, dtype=np.uint32)
        view[:] = replace_low_bits(view, rnd, k)
    return out


@dataclass
class PlaneStat:
    """Counts for one bit plane (plane 1 is the least significant)."""

    plane: int
    count: int
    ones: int

    @property
    def ones_fraction(self) -> float:
        return self.ones / self.count if self.count else 0.0

    @property
    def chi_square(self) -> float:
        # Pearson statistic against the fair-coin null, 1 degree of freedom.
        if not self.count:
            return 0.0
        zeros = self.count - self.ones
        return (self.ones - zeros) ** 2 / self.count


@dataclass
class StatsReport:
    """Bit-plane statistics over a group (or the whole model)."""

    selection: str
    element_count: int
    entropy_bits: int
    planes: list[PlaneStat]
    per_tensor_entropy: dict[str, float] = field(default_factory=dict)
    aggregate_entropy: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "selection": self.selection,
            "element_count": self.element_count,
            "entropy_bits": self.entropy_bits,
            "planes": [{
                "plane": p.plane, "count": p.count, "ones": p.ones,
                "ones_fraction": p.ones_fraction, "chi_square": p.chi_square,
            } for p in self.planes],
            "per_tensor_entropy": self.per_tensor_entropy,
            "aggregate_entropy": self.aggregate_entropy,
        }


def _patterns_of(model: ModelFile, rec) -> tuple[np.ndarray, int]:
    """Storage patterns and their width: float patterns or quantized codes."""
    if rec.dtype.is_float:
        return model.pattern_view(rec), rec.dtype.element_bits
    scheme = "q8_0" if rec.dtype is Dtype.Q8_0 else "q4_0"
    _, codes = unpack_blocks(model.tensor_bytes(rec), scheme)
    return codes.reshape(-1).view(np.uint8), rec.dtype.element_bits


def lsb_stats(model: ModelFile, group: ParameterGroup | None = None, *,
              entropy_bits: int = 8) -> StatsReport:
    """Per-plane ones fractions and chi-square plus bottom-k entropy."""
    if group is not None:
        selection = group.id
        parts = [(model.tensor(r.tensor), r.start, r.stop) for r in group.members]
    else:
        selection = "model:all"
        parts = [(rec, 0, rec.element_count) for rec in model.tensors]
    if not parts or all(stop == start for _, start, stop in parts):
        raise EmptySelection("no elements selected")

    plane_ones = np.zeros(MAX_PLANES, dtype=np.int64)
    plane_count = np.zeros(MAX_PLANES, dtype=np.int64)
    per_tensor_entropy: dict[str, float] = {}
    hists: list[np.ndarray] = []
    total = 0

    for rec, start, stop in parts:
        patterns, width = _patterns_of(model, rec)
        patterns = patterns[start:stop]
        if patterns.size == 0:
            continue
        total += patterns.size
        nplanes = min(MAX_PLANES, width)
        for p in range(nplanes):
            plane_ones[p] += int(((patterns >> p) & 1).sum())
            plane_count[p] += patterns.size
        k = min(entropy_bits, width)
        field_vals = (patterns.astype(np.int64)) & ((1 << k) - 1)
        hist = np.bincount(field_vals, minlength=1 << k)
        per_tensor_entropy[rec.name] = _entropy(hist)
        hists.append(hist)

    # Pool across tensors on the common bottom-k planes so mixed storage
    # widths stay comparable.
    agg_k = min(int(h.size).bit_length() - 1 for h in hists)
    pooled = np.zeros(1 << agg_k, dtype=np.int64)
    for h in hists:
        pooled += h.reshape(-1, 1 << agg_k).sum(axis=0)

    planes = [PlaneStat(p + 1, int(plane_count[p]), int(plane_ones[p]))
              for p in range(MAX_PLANES) if plane_count[p]]
    return StatsReport(
        selection=selection, element_count=total, entropy_bits=agg_k,
        planes=planes, per_tensor_entropy=per_tensor_entropy,
        aggregate_entropy=_entropy(pooled))


def _entropy(hist: np.ndarray) -> float:
    n = hist.sum()
    if n == 0:
        return 0.0
    p = hist[hist > 0] / n
    return float(-(p * np.log2(p)).sum())
