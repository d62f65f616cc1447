"""Built-in evaluation items and the deterministic calibration split.

The built-in set mixes generated arithmetic questions with a block of
hand-written general-knowledge items, all four-option multiple choice.
The calibration/evaluation split is a pure function of
(dataset id, fraction, seed): default fraction 0.1, i.e. one part
calibration to nine parts evaluation.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass

import numpy as np


class DatasetMissing(Exception):
    pass


@dataclass(frozen=True)
class Item:
    question: str
    options: tuple[str, ...]
    answer: int  # index into options


_KNOWLEDGE = [
    ("What is the largest planet in the solar system?",
     ("Mars", "Jupiter", "Venus", "Mercury"), 1),
    ("What is the chemical symbol for gold?",
     ("Au", "Ag", "Fe", "Pb"), 0),
    ("How many sides does a hexagon have?",
     ("four", "five", "six", "eight"), 2),
    ("Water freezes at how many degrees Celsius?",
     ("0", "32", "100", "-10"), 0),
    ("Which gas do plants absorb from the air?",
     ("oxygen", "nitrogen", "carbon dioxide", "helium"), 2),
    ("What is the opposite of 'up'?",
     ("down", "left", "over", "near"), 0),
    ("How many days are in a week?",
     ("five", "six", "seven", "eight"), 2),
    ("Which animal is known for its long neck?",
     ("giraffe", "lion", "horse", "whale"), 0),
    ("What color is a clear daytime sky?",
     ("green", "blue", "red", "black"), 1),
    ("Which season comes after winter?",
     ("summer", "autumn", "spring", "monsoon"), 2),
    ("How many legs does a spider have?",
     ("six", "eight", "ten", "four"), 1),
    ("What do bees make?",
     ("milk", "silk", "honey", "bread"), 2),
    ("Which ocean is the largest?",
     ("Atlantic", "Indian", "Arctic", "Pacific"), 3),
    ("What instrument has black and white keys?",
     ("violin", "piano", "drum", "flute"), 1),
    ("Which planet do we live on?",
     ("Mars", "Earth", "Saturn", "Pluto"), 1),
    ("What is frozen water called?",
     ("steam", "ice", "fog", "rain"), 1),
    ("How many minutes are in an hour?",
     ("thirty", "fifty", "sixty", "ninety"), 2),
    ("Which direction does the sun rise from?",
     ("north", "south", "east", "west"), 2),
    ("What is the capital of France?",
     ("Berlin", "Madrid", "Paris", "Rome"), 2),
    ("Which of these is a primary color?",
     ("orange", "purple", "red", "pink"), 2),
    ("What do caterpillars turn into?",
     ("beetles", "butterflies", "spiders", "worms"), 1),
    ("Which meal is eaten in the morning?",
     ("dinner", "lunch", "breakfast", "supper"), 2),
    ("How many continents are there?",
     ("five", "six", "seven", "eight"), 2),
    ("What is the fastest land animal?",
     ("cheetah", "horse", "lion", "elephant"), 0),
]


def _arithmetic_items(count: int) -> list[Item]:
    rng = np.random.default_rng(314159)
    items: list[Item] = []
    seen: set[str] = set()
    attempts = 0
    while len(items) < count:
        attempts += 1
        if attempts > count * 100:
            raise RuntimeError("question space exhausted; lower the item count")
        op = len(items) % 3
        a, b = int(rng.integers(2, 60)), int(rng.integers(2, 40))
        if op == 0:
            q, ans = f"What is {a} plus {b}?", a + b
        elif op == 1:
            q, ans = f"What is {a + b} minus {b}?", a
        else:
            a, b = int(rng.integers(2, 30)), int(rng.integers(2, 30))
            q, ans = f"What is {a} times {b}?", a * b
        if q in seen:
            continue
        seen.add(q)
        offsets = rng.permutation([-3, -1, 1, 2, 4])[:3]
        options = [ans] + [ans + int(o) for o in offsets]
        order = rng.permutation(4)
        shuffled = tuple(str(options[i]) for i in order)
        items.append(Item(q, shuffled, int(np.flatnonzero(order == 0)[0])))
    return items


def load_dataset(dataset: str) -> list[Item]:
    """builtin:mixed / builtin:qa / builtin:arith, or a JSON file path."""
    if dataset == "builtin:qa":
        return [Item(q, opts, a) for q, opts, a in _KNOWLEDGE]
    if dataset == "builtin:arith":
        return _arithmetic_items(400)
    if dataset == "builtin:mixed":
        return load_dataset("builtin:qa") + load_dataset("builtin:arith")
    if dataset.startswith("builtin:"):
        raise DatasetMissing(f"unknown built-in dataset {dataset!r}")
    if not os.path.exists(dataset):
        raise DatasetMissing(f"dataset file {dataset!r} does not exist")
    with open(dataset, encoding="utf-8") as fh:
        rows = json.load(fh)
    return [Item(r["question"], tuple(r["options"]), int(r["answer"]))
            for r in rows]


def calibration_split(dataset: str, fraction: float, seed: int,
                      which: str = "calibration") -> list[Item]:
    """Deterministic permutation split; calibration is the first
    ceil(fraction * N) items of the permuted order."""
    items = load_dataset(dataset)
    mix = zlib.crc32(dataset.encode("utf-8")) ^ (seed & 0xFFFFFFFF)
    order = np.random.default_rng(mix).permutation(len(items))
    cut = math.ceil(len(items) * fraction)
    if which == "calibration":
        picked = order[:cut]
    elif which == "evaluation":
        picked = order[cut:]
    else:
        raise ValueError(f"unknown split {which!r}")
    return [items[i] for i in picked]
