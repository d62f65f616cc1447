"""Byte-level tokenizer: one id per byte value, plus a BOS marker.

Self-contained so the harness needs no downloaded tokenizer files; any model
scored here must use VOCAB_SIZE for its embedding table.
"""

from __future__ import annotations

BOS_ID = 256
VOCAB_SIZE = 258  # 256 byte values + BOS + one reserved id


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_bytes(ids: list[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", "replace")
