"""Target selection: grouping, performance-aware importance, probing,
argmin selection and capacity accounting.

Perplexity and accuracy scores are ingested from JSON files rather than
computed here; scoring requires LLM inference and lives in the separate
evaluator harness. The importance of a (group, n) cell is
``d_pai = max(D_ppl, D_acc)`` where both D's are relative degradations
against the clean baseline, and the stealth rate is ``1 - d_pai``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._grouping import (  # re-exported: grouping is part of this module's API
    DEFAULT_LAYER_PATTERN,
    layer_index,
    make_groups,
    resolve_group,
)
from .bitcodec import replace_low_bits
from .embed import EligibilityRule, _check_general_group, robust_capacity_slots
from .errors import BadWidth, DegenerateBaseline, EmptyReports
from .quant import AffineQuantParams
from .tensorfile import GroupStrategy, ModelFile, ParameterGroup

__all__ = [
    "DEFAULT_LAYER_PATTERN", "EvalScores", "PaiRun", "PaiReport",
    "GroupStrategy", "ParameterGroup", "make_groups", "resolve_group",
    "layer_index", "pai", "probe", "select_target", "capacity",
    "load_scores", "report_table",
]


@dataclass(frozen=True)
class EvalScores:
    """One scoring run of one model on one dataset split."""

    perplexity: float
    accuracy: float
    dataset: str = ""
    seed: int = 0
    split: str = ""
    model_digest: str = ""

    def __post_init__(self):
        if math.isnan(self.perplexity) or self.perplexity <= 0:
            raise ValueError(f"perplexity must be positive, got {self.perplexity}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")


def load_scores(path) -> EvalScores:
    """Read a score file; the string sentinel "inf" marks a destroyed model."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    ppl = doc["perplexity"]
    if isinstance(ppl, str):
        ppl = float(ppl)  # accepts "inf"
    return EvalScores(
        perplexity=ppl, accuracy=float(doc["accuracy"]),
        dataset=str(doc.get("dataset", "")), seed=int(doc.get("seed", 0)),
        split=str(doc.get("split", "")),
        model_digest=str(doc.get("model_digest", "")))


@dataclass(frozen=True)
class PaiRun:
    """Per-seed importance entry derived from one clean/embedded score pair."""

    clean: EvalScores
    embedded: EvalScores
    d_ppl: float
    d_acc: float
    d_pai: float
    sr: float


def pai(clean: EvalScores, embedded: EvalScores) -> PaiRun:
    """Relative perplexity/accuracy degradation and their max (one run)."""
    if clean.accuracy == 0.0 or not math.isfinite(clean.perplexity):
        raise DegenerateBaseline(
            "clean scores must have nonzero accuracy and finite perplexity")
    # |1/p - 1/p'| / (1/p) reduces to |1 - p/p'|; an infinite embedded
    # perplexity (destroyed model) contributes the limit value 1.
    if math.isinf(embedded.perplexity):
        d_ppl = 1.0
    else:
        d_ppl = abs(1.0 - clean.perplexity / embedded.perplexity)
    d_acc = abs(clean.accuracy - embedded.accuracy) / clean.accuracy
    d_pai = max(d_ppl, d_acc)
    return PaiRun(clean, embedded, d_ppl, d_acc, d_pai, 1.0 - d_pai)


@dataclass
class PaiReport:
    """Aggregated importance of one (group, n) cell over seeded runs."""

    group_id: str
    n: int
    group_size: int = 0
    runs: list[PaiRun] = field(default_factory=list)

    @property
    def d_ppl(self) -> float:
        return float(np.mean([r.d_ppl for r in self.runs]))

    @property
    def d_acc(self) -> float:
        return float(np.mean([r.d_acc for r in self.runs]))

    @property
    def d_pai(self) -> float:
        return max(self.d_ppl, self.d_acc)

    @property
    def sr(self) -> float:
        return 1.0 - self.d_pai

    @property
    def capacity_bits(self) -> int:
        return self.group_size * self.n

    def to_json_dict(self) -> dict:
        return {
            "group_id": self.group_id, "n": self.n,
            "group_size": self.group_size,
            "D_ppl": self.d_ppl,
            "D_acc": self.d_acc, "d_pai": self.d_pai, "sr": self.sr,
            "runs": [{
                "seed": r.embedded.seed,
                "clean": {"perplexity": _json_float(r.clean.perplexity),
                          "accuracy": r.clean.accuracy},
                "embedded": {"perplexity": _json_float(r.embedded.perplexity),
                             "accuracy": r.embedded.accuracy},
                "D_ppl": r.d_ppl, "D_acc": r.d_acc, "d_pai": r.d_pai, "sr": r.sr,
            } for r in self.runs],
        }


def _json_float(x: float):
    return "inf" if math.isinf(x) else x


def probe(model: ModelFile, group: ParameterGroup, n: int, seed: int) -> ModelFile:
    """Fill the bottom n bits of every group element with seeded random bits.

    The worst-case measurement probe: equivalent to general-mode embedding of
    a random payload covering the whole group.
    """
    if n < 1:
        raise BadWidth(f"probe width must be at least 1, got {n}")
    _check_general_group(model, group, n, 0)
    rng = np.random.default_rng(seed)
    out = model.mutable_copy()
    for member in group.members:
        rec = out.tensor(member.tensor)
        count = member.stop - member.start
        rnd = rng.integers(0, 1 << n, size=count, dtype=np.uint32)
        view = out.pattern_view(rec)
        sl = slice(member.start, member.stop)
        view[sl] = replace_low_bits(view[sl], rnd, n)
    return out


def select_target(reports: list[PaiReport]) -> tuple[str, int]:
    """argmin of mean d_pai; ties prefer larger capacity, then lower layer
    index, then smaller n."""
    if not reports:
        raise EmptyReports("no PAI reports to select from")
    best = min(reports, key=_selection_key)
    return best.group_id, best.n


def _selection_key(report: PaiReport):
    idx = _layer_of(report.group_id)
    return (report.d_pai, -report.capacity_bits,
            math.inf if idx is None else idx, report.n, report.group_id)


def _layer_of(group_id: str) -> int | None:
    if group_id.startswith("layer:"):
        return int(group_id.split(":", 1)[1])
    return None


def capacity(group: ParameterGroup, n: int, mode: str = "general",
             scheme: str | None = None, model: ModelFile | None = None,
             affine: AffineQuantParams | None = None) -> int:
    """Payload capacity in whole bytes for a (group, n) choice."""
    if n < 1:
        raise BadWidth(f"n must be at least 1, got {n}")
    if mode == "general":
        return group.size * n // 8
    if model is None:
        raise ValueError("robust capacity needs the model to count eligible codes")
    rule = EligibilityRule(scheme or "q8_0", n, affine)
    return robust_capacity_slots(model, group, rule) * n // 8


def report_table(reports: list[PaiReport]) -> str:
    """Plain-text d_pai table, groups down the side and n across the top."""
    groups = sorted({r.group_id for r in reports})
    ns = sorted({r.n for r in reports})
    cells = {(r.group_id, r.n): r.d_pai for r in reports}
    width = max([len(g) for g in groups] + [8])
    lines = [" " * width + "".join(f"  n={n:<8d}" for n in ns)]
    for g in groups:
        row = g.ljust(width)
        for n in ns:
            v = cells.get((g, n))
            row += "  " + (f"{v:<10.4f}" if v is not None else "-".ljust(10))
        lines.append(row.rstrip())
    return "\n".join(lines)
