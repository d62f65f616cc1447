"""Model scoring: perplexity and multiple-choice accuracy score files.

Loads a causal LM (HF directory layout; weights optionally overridden by a
standalone safetensors file, which is how probed models come back from the
steganography CLI), scores the calibration split, and writes the score-file
schema the target stage consumes:

    {"model_digest", "dataset", "split", "seed", "perplexity", "accuracy"}

plus the protocol fields. A destroyed model (non-finite loss) is reported,
not masked: perplexity becomes the string sentinel "inf" and the score file
carries a note. Runs are deterministic: fixed seeds, eval mode, greedy
scoring, single-threaded torch.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import calibration_split
from .tokenizer import BOS_ID, decode_bytes, encode_text  # noqa: F401

PROTOCOL = "max-option-loglik"


class ModelLoadError(Exception):
    pass


@dataclass
class EvalJob:
    model_dir: str
    weights: str | None = None      # standalone safetensors override
    dataset: str = "builtin:mixed"
    fraction: float = 0.1           # 1:9 calibration to evaluation
    seed: int = 0
    split: str = "calibration"
    max_items: int | None = None
    max_context: int = 128
    threads: int = 1


def evaluate(job: EvalJob, out_path: str) -> dict:
    """Score one model and write the score file atomically."""
    torch.manual_seed(job.seed)
    torch.set_num_threads(max(1, job.threads))
    model, weights_path = _load_model(job)
    items = calibration_split(job.dataset, job.fraction, job.seed, job.split)
    if job.max_items:
        items = items[: job.max_items]

    ppl, tokens, finite = _perplexity(model, items, job.max_context)
    correct, scored = _accuracy(model, items, job.max_context)
    doc = {
        "model_digest": _digest(weights_path),
        "dataset": job.dataset,
        "split": job.split,
        "seed": job.seed,
        "perplexity": "inf" if not finite else ppl,
        "accuracy": correct / scored if scored else 0.0,
        "protocol": PROTOCOL,
        "items": scored,
        "tokens": tokens,
    }
    if not finite:
        doc["note"] = "non_finite_loss"
    _write_json(out_path, doc)
    return doc


def _load_model(job: EvalJob):
    from safetensors.torch import load_file
    from transformers import AutoConfig, AutoModelForCausalLM

    config_path = os.path.join(job.model_dir, "config.json")
    if not os.path.exists(config_path):
        raise ModelLoadError(f"no config.json under {job.model_dir!r}")
    weights_path = job.weights or os.path.join(job.model_dir, "model.safetensors")
    if not os.path.exists(weights_path):
        raise ModelLoadError(f"weights file {weights_path!r} does not exist")
    try:
        config = AutoConfig.from_pretrained(job.model_dir)
        model = AutoModelForCausalLM.from_config(config)
        state = load_file(weights_path)
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected:
            raise ModelLoadError(f"unexpected tensors in weights: {unexpected[:4]}")
        tied = set(getattr(model, "_tied_weights_keys", None) or ["lm_head.weight"])
        leftover = [k for k in missing if k not in tied]
        if leftover:
            raise ModelLoadError(f"weights are missing tensors: {leftover[:4]}")
        model.tie_weights()
    except ModelLoadError:
        raise
    except Exception as exc:
        raise ModelLoadError(f"cannot load model: {exc}") from exc
    # compute in float32 regardless of storage dtype; the conversion is
    # value-exact so probed bit patterns keep their effect
    model = model.float().eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, weights_path


def _perplexity(model, items, max_context):
    """exp(mean token negative log-likelihood) over the split's texts."""
    total_nll = 0.0
    total_tokens = 0
    finite = True
    for item in items:
        text = f"Question: {item.question}\nAnswer: {item.options[item.answer]}"
        ids = [BOS_ID] + encode_text(text)
        ids = ids[:max_context]
        inputs = torch.tensor([ids], dtype=torch.long)
        with torch.no_grad():
            out = model(inputs, labels=inputs)
        loss = float(out.loss)
        if not math.isfinite(loss):
            finite = False
            continue
        total_nll += loss * (len(ids) - 1)
        total_tokens += len(ids) - 1
    if not finite or total_tokens == 0:
        return math.inf, total_tokens, False
    return math.exp(total_nll / total_tokens), total_tokens, True


def _accuracy(model, items, max_context):
    """Answer = option with the maximum summed log-likelihood; items whose
    option scores are non-finite count as incorrect."""
    correct = 0
    for item in items:
        prompt = [BOS_ID] + encode_text(f"Question: {item.question}\nAnswer:")
        scores = []
        for option in item.options:
            option_ids = encode_text(" " + option)
            ids = (prompt + option_ids)[:max_context]
            span = len(ids) - len(prompt)
            if span <= 0:
                scores.append(math.nan)
                continue
            inputs = torch.tensor([ids], dtype=torch.long)
            with torch.no_grad():
                logits = model(inputs).logits[0]
            logprobs = F.log_softmax(logits.float(), dim=-1)
            picked = logprobs[torch.arange(len(prompt) - 1, len(ids) - 1),
                              torch.tensor(ids[len(prompt):])]
            scores.append(float(picked.sum()))
        if all(math.isfinite(s) for s in scores):
            if int(np.argmax(scores)) == item.answer:
                correct += 1
    return correct, len(items)


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: str, doc: dict):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
