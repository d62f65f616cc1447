"""Weight-file steganography and steganalysis toolkit.

Embeds opaque payload bytes into LLM parameter files (safetensors, plus a
read-only GGUF subset) via LSB substitution, or via a quantization-surviving
integer-code scheme; selects low-impact target groups with a
performance-aware importance metric; and ships the matching defenses.

Payloads are opaque bytes and extraction is an explicit command: nothing
here constructs triggers, touches serialization hooks, or executes anything.
"""

__version__ = "0.1.0"

from .bitcodec import (
    BitString,
    ScalarType,
    extract_field,
    extract_lsb,
    from_bits,
    replace_field,
    replace_lsb,
    to_bits,
)
from .defense import StatsReport, lsb_stats, sanitize
from .embed import EligibilityRule, eligible, embed_general, embed_robust, extract
from .payload import (
    EmbedManifest,
    PayloadFrame,
    bit_error_rate,
    prepare_payload,
    recover_payload,
)
from .quant import (
    AffineQuantParams,
    QuantBlock,
    affine_dequantize,
    affine_quantize,
    block_dequantize,
    block_quantize,
    dequantize_model,
    quantize_model,
)
from .target import (
    DEFAULT_LAYER_PATTERN,
    EvalScores,
    PaiReport,
    PaiRun,
    capacity,
    load_scores,
    make_groups,
    pai,
    probe,
    resolve_group,
    select_target,
)
from .tensorfile import (
    Dtype,
    GroupStrategy,
    ModelFile,
    ModelFormat,
    ParameterGroup,
    TensorRecord,
    element_at,
    load_model,
    model_digest,
    parse_model,
    save_model,
    set_element,
    write_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
