"""Deterministic tiny causal-LM fixture.

The sandboxed environment has no model-hub access, so the harness ships a
builder for a small GPT-2-architecture model (random initialization, float16
storage, byte-level vocabulary). Random weights still give finite, stable
perplexity, which is all the probing trend needs; point the harness at any
local HF-format causal LM directory to score a real model instead.

Float16 storage matters: probing replaces the bottom n of 16 storage bits,
so the full n sweep (1..16) spans "invisible" through "model-destroying",
which is the behavior the target stage measures.
"""

from __future__ import annotations

import os

import torch

from .tokenizer import BOS_ID, VOCAB_SIZE


def build_tiny_model(out_dir: str, *, seed: int = 0, layers: int = 4,
                     dim: int = 128, heads: int = 4, context: int = 128) -> str:
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=VOCAB_SIZE, n_positions=context, n_embd=dim,
        n_layer=layers, n_head=heads,
        bos_token_id=BOS_ID, eos_token_id=BOS_ID,
        attn_pdrop=0.0, embd_pdrop=0.0, resid_pdrop=0.0,
    )
    model = GPT2LMHeadModel(config)
    os.makedirs(out_dir, exist_ok=True)
    model.half().save_pretrained(out_dir, safe_serialization=True)
    return os.path.join(out_dir, "model.safetensors")
