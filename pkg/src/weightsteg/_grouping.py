"""Parameter grouping strategies and group-id resolution.

Group ids are self-describing: ``model:all``, ``layer:<index>``,
``name:<stem>``, ``matrix:<tensor name>``. Layer and name grouping need a
layer-index pattern because checkpoint naming schemes vary; the pattern is
configuration, with a default that covers the common ``layers.N`` /
``h.N`` / ``blk.N`` conventions.
"""

from __future__ import annotations

import json
import re

from .errors import GroupResolutionError, UngroupableModel
from .tensorfile import (
    GroupRange,
    GroupStrategy,
    ModelFile,
    ParameterGroup,
    TensorRecord,
)

DEFAULT_LAYER_PATTERN = r"(?:^|\.)(?:layers|layer|h|blocks|blk)\.(\d+)(?=\.|$)"

_QUANT_META_KEY = "quantized_tensors"  # mirror of quant.QUANT_META_KEY


def effective_element_count(model: ModelFile, rec: TensorRecord) -> int:
    """Element count before any quantization padding."""
    meta = model.metadata.get(_QUANT_META_KEY)
    if meta:
        entry = json.loads(meta).get(rec.name)
        if entry:
            count = 1
            for s in entry["orig_shape"]:
                count *= int(s)
            return count
    return rec.element_count


def _full_range(model: ModelFile, rec: TensorRecord) -> GroupRange:
    return GroupRange(rec.name, 0, effective_element_count(model, rec))


def make_groups(model: ModelFile, strategy: GroupStrategy | str,
                layer_pattern: str = DEFAULT_LAYER_PATTERN) -> list[ParameterGroup]:
    """Partition (or subset) the model into disjoint candidate groups."""
    strategy = GroupStrategy(strategy)
    if strategy is GroupStrategy.MODEL:
        return [ParameterGroup(
            "model:all", strategy,
            tuple(_full_range(model, t) for t in model.tensors))]
    if strategy is GroupStrategy.MATRIX:
        return [ParameterGroup(f"matrix:{t.name}", strategy,
                               (_full_range(model, t),))
                for t in model.tensors]

    rx = re.compile(layer_pattern)
    if strategy is GroupStrategy.LAYER:
        by_layer: dict[int, list[GroupRange]] = {}
        for t in model.tensors:
            m = rx.search(t.name)
            if m:
                by_layer.setdefault(int(m.group(1)), []).append(
                    _full_range(model, t))
        if not by_layer:
            raise UngroupableModel(
                f"no tensor name matches layer pattern {layer_pattern!r}")
        return [ParameterGroup(f"layer:{idx}", strategy, tuple(ranges))
                for idx, ranges in sorted(by_layer.items())]

    # NAME: one group per name stem, the layer index replaced by a wildcard
    by_stem: dict[str, list[GroupRange]] = {}
    for t in model.tensors:
        m = rx.search(t.name)
        if m:
            stem = t.name[: m.start(1)] + "*" + t.name[m.end(1):]
            by_stem.setdefault(stem, []).append(_full_range(model, t))
    if not by_stem:
        raise UngroupableModel(
            f"no tensor name matches layer pattern {layer_pattern!r}")
    return [ParameterGroup(f"name:{stem}", GroupStrategy.NAME, tuple(ranges))
            for stem, ranges in sorted(by_stem.items())]


def resolve_group(model: ModelFile, group_id: str,
                  layer_pattern: str = DEFAULT_LAYER_PATTERN) -> ParameterGroup:
    """Find the group a ``strategy:key`` id denotes on this model."""
    prefix = group_id.split(":", 1)[0]
    try:
        strategy = GroupStrategy(prefix)
    except ValueError:
        raise GroupResolutionError(
            f"group id {group_id!r} does not start with a known strategy") from None
    try:
        groups = make_groups(model, strategy, layer_pattern)
    except UngroupableModel as exc:
        raise GroupResolutionError(str(exc)) from None
    for group in groups:
        if group.id == group_id:
            return group
    raise GroupResolutionError(
        f"group {group_id!r} does not resolve on this model "
        f"(available: {[g.id for g in groups][:8]}...)")


def layer_index(group: ParameterGroup) -> int | None:
    if group.strategy is GroupStrategy.LAYER:
        return int(group.id.split(":", 1)[1])
    return None
