import numpy as np
import pytest

from weightsteg import tensorfile
from weightsteg.tensorfile import Dtype


def build_synthetic(num_layers=2, names=("attn.q", "attn.k"), elems=256,
                    dtype=Dtype.F32, seed=0, sigma=0.02, extra=()):
    """Gaussian-weight model with transformer-style tensor names."""
    rng = np.random.default_rng(seed)
    entries = []
    for layer in range(num_layers):
        for stem in names:
            vals = rng.normal(0.0, sigma, elems)
            entries.append((f"model.layers.{layer}.{stem}.weight",
                            dtype, (elems,), _encode(vals, dtype)))
    for name, count in extra:
        vals = rng.normal(0.0, sigma, count)
        entries.append((name, dtype, (count,), _encode(vals, dtype)))
    return tensorfile.build_model(entries)


def _encode(vals: np.ndarray, dtype: Dtype) -> bytes:
    if dtype is Dtype.F32:
        return vals.astype("<f4").tobytes()
    if dtype is Dtype.F16:
        return vals.astype("<f2").tobytes()
    from weightsteg.bitcodec import f32_to_bf16_bits
    return f32_to_bf16_bits(vals.astype(np.float32)).astype("<u2").tobytes()


@pytest.fixture
def make_model():
    return build_synthetic


@pytest.fixture
def small_model():
    return build_synthetic()
