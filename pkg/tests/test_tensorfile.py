import json
import struct

import numpy as np
import pytest

import gguf_ref
from weightsteg import quant, tensorfile
from weightsteg.errors import (
    IndexOutOfGroup,
    MalformedHeader,
    OverlappingTensors,
    UnsupportedDtype,
    UnsupportedWriteFormat,
    WriteToQuantizedDtype,
)
from weightsteg.tensorfile import (
    Dtype,
    GroupRange,
    GroupStrategy,
    ModelFormat,
    ParameterGroup,
    element_at,
    load_model,
    parse_model,
    save_model,
    set_element,
    write_model,
)

from conftest import build_synthetic

MINIMAL_HEADER = b'{"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}'


def minimal_safetensors(values=(1.0, 2.0)) -> bytes:
    data = np.array(values, "<f4").tobytes()
    return struct.pack("<Q", len(MINIMAL_HEADER)) + MINIMAL_HEADER + data


def group_over(model, *names):
    ranges = tuple(GroupRange(n, 0, model.tensor(n).element_count) for n in names)
    return ParameterGroup("matrix:" + names[0], GroupStrategy.MATRIX, ranges)


class TestSafetensorsParse:
    def test_minimal_file(self):
        m = parse_model(minimal_safetensors())
        assert m.format is ModelFormat.SAFETENSORS
        assert len(m.tensors) == 1
        rec = m.tensors[0]
        assert rec.name == "t" and rec.dtype is Dtype.F32
        assert rec.element_count == 2
        assert m.float_values(rec).tolist() == [1.0, 2.0]

    def test_magic_mismatch(self):
        with pytest.raises(MalformedHeader):
            parse_model(b"XXXX")
        with pytest.raises(MalformedHeader):
            parse_model(b"XXXXXXXXXXXXXXXX")

    def test_truncated_header(self):
        blob = minimal_safetensors()
        with pytest.raises(MalformedHeader):
            parse_model(blob[:20])

    def test_empty_input(self):
        with pytest.raises(MalformedHeader):
            parse_model(b"")

    def test_duplicate_names(self):
        header = b'{"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},' \
                 b'"t":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}'
        blob = struct.pack("<Q", len(header)) + header + b"\x00" * 8
        with pytest.raises(MalformedHeader):
            parse_model(blob)

    def test_overlapping_tensors(self):
        header = b'{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},' \
                 b'"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}'
        blob = struct.pack("<Q", len(header)) + header + b"\x00" * 12
        with pytest.raises(OverlappingTensors):
            parse_model(blob)

    def test_unsupported_dtype(self):
        header = b'{"t":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}'
        blob = struct.pack("<Q", len(header)) + header + b"\x00" * 8
        with pytest.raises(UnsupportedDtype):
            parse_model(blob)

    def test_length_shape_mismatch(self):
        header = b'{"t":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}'
        blob = struct.pack("<Q", len(header)) + header + b"\x00" * 8
        with pytest.raises(MalformedHeader):
            parse_model(blob)

    def test_out_of_bounds_offsets(self):
        header = b'{"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}'
        blob = struct.pack("<Q", len(header)) + header + b"\x00" * 4
        with pytest.raises(MalformedHeader):
            parse_model(blob)

    def test_declaration_order_preserved(self):
        data = np.arange(4, dtype="<f4").tobytes()
        header = (b'{"zz":{"dtype":"F32","shape":[2],"data_offsets":[8,16]},'
                  b'"aa":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}')
        blob = struct.pack("<Q", len(header)) + header + data
        m = parse_model(blob)
        assert m.names == ["zz", "aa"]  # header order, not offset order

    def test_two_parses_identical_streams(self):
        blob = write_model(build_synthetic(seed=5))
        a, b = parse_model(blob), parse_model(blob)
        for ra, rb in zip(a.tensors, b.tensors):
            assert ra == rb
            assert bytes(a.tensor_bytes(ra)) == bytes(b.tensor_bytes(rb))


class TestSafetensorsWrite:
    def test_round_trip_minimal(self):
        m = parse_model(minimal_safetensors())
        m2 = parse_model(write_model(m))
        assert m2.names == m.names
        assert bytes(m2.tensor_bytes(m2.tensors[0])) == \
            bytes(m.tensor_bytes(m.tensors[0]))

    def test_three_tensor_offsets_contiguous(self):
        entries = [(f"t{i}", Dtype.F32, (4,), np.arange(4, dtype="<f4").tobytes())
                   for i in range(3)]
        blob = write_model(tensorfile.build_model(entries))
        hlen = struct.unpack_from("<Q", blob)[0]
        header = json.loads(blob[8: 8 + hlen])
        offsets = [header[f"t{i}"]["data_offsets"] for i in range(3)]
        assert offsets == [[0, 16], [16, 32], [32, 48]]

    def test_byte_stable(self):
        m = build_synthetic(seed=9)
        assert write_model(m) == write_model(m)

    def test_gguf_write_rejected(self):
        blob = gguf_ref.write_gguf([gguf_ref.f32_tensor("w", np.ones((2, 2)))])
        m = parse_model(blob)
        with pytest.raises(UnsupportedWriteFormat):
            write_model(m)

    def test_parse_write_identity_fuzzed(self):
        rng = np.random.default_rng(21)
        for trial in range(20):
            entries = []
            for i in range(rng.integers(1, 6)):
                dtype = [Dtype.F32, Dtype.F16, Dtype.BF16][rng.integers(0, 3)]
                n = int(rng.integers(1, 40))
                width = dtype.element_bits // 8
                data = rng.integers(0, 256, n * width, dtype=np.uint8).tobytes()
                entries.append((f"t{i}", dtype, (n,), data))
            m = tensorfile.build_model(entries, metadata={"trial": str(trial)})
            m2 = parse_model(write_model(m))
            assert m2.names == m.names
            assert m2.metadata == m.metadata
            for ra, rb in zip(m.tensors, m2.tensors):
                assert (ra.name, ra.dtype, ra.shape) == (rb.name, rb.dtype, rb.shape)
                assert bytes(m.tensor_bytes(ra)) == bytes(m2.tensor_bytes(rb))

    def test_quantized_round_trip(self, small_model):
        q = quant.quantize_model(small_model, "q8_0")
        q2 = parse_model(write_model(q))
        assert [t.dtype for t in q2.tensors] == [Dtype.Q8_0] * len(q.tensors)
        for ra, rb in zip(q.tensors, q2.tensors):
            assert ra.shape == rb.shape
            assert bytes(q.tensor_bytes(ra)) == bytes(q2.tensor_bytes(rb))

    def test_save_and_mmap_load(self, tmp_path, small_model):
        path = tmp_path / "m.safetensors"
        save_model(small_model, path)
        m = load_model(path)
        assert not m.writable
        assert write_model(m) == write_model(small_model)
        w = load_model(path, writable=True)
        assert w.writable


class TestGguf:
    def test_reference_float_file(self):
        w = np.arange(12, dtype=np.float32).reshape(3, 4)
        blob = gguf_ref.write_gguf(
            [gguf_ref.f32_tensor("blk.0.w", w),
             gguf_ref.f16_tensor("blk.1.w", w / 2)],
            metadata={"general.name": "fixture"})
        m = parse_model(blob)
        assert m.format is ModelFormat.GGUF
        assert m.names == ["blk.0.w", "blk.1.w"]
        assert m.tensors[0].shape == (3, 4)
        assert m.metadata["general.name"] == "fixture"
        assert np.array_equal(m.float_values(m.tensors[0]), w.reshape(-1))
        assert np.allclose(m.float_values(m.tensors[1]), (w / 2).reshape(-1))

    def test_quantized_blocks(self):
        codes = list(range(-16, 16))
        q8 = gguf_ref.q8_0_bytes(0.5, codes)
        nibbles = [i % 16 for i in range(32)]
        q4 = gguf_ref.q4_0_bytes(-0.25, nibbles)
        blob = gguf_ref.write_gguf([
            ("blk.0.a", (32,), gguf_ref.GGML_Q8_0, q8),
            ("blk.0.b", (32,), gguf_ref.GGML_Q4_0, q4),
        ])
        m = parse_model(blob)
        assert m.tensors[0].dtype is Dtype.Q8_0
        assert m.tensors[1].dtype is Dtype.Q4_0
        s8, c8 = quant.unpack_blocks(m.tensor_bytes(m.tensors[0]), "q8_0")
        assert s8[0] == np.float16(0.5) and list(c8[0]) == codes
        s4, c4 = quant.unpack_blocks(m.tensor_bytes(m.tensors[1]), "q4_0")
        assert s4[0] == np.float16(-0.25) and list(c4[0]) == nibbles

    def test_version_check(self):
        blob = bytearray(gguf_ref.write_gguf([gguf_ref.f32_tensor("w", np.ones(2))]))
        blob[4:8] = struct.pack("<I", 2)
        with pytest.raises(MalformedHeader):
            parse_model(bytes(blob))

    def test_unsupported_ggml_type(self):
        blob = gguf_ref.write_gguf([("w", (256,), 12, b"\x00" * 144)])  # Q4_K
        with pytest.raises(UnsupportedDtype):
            parse_model(blob)

    def test_truncated_data(self):
        blob = gguf_ref.write_gguf([gguf_ref.f32_tensor("w", np.ones(8))])
        with pytest.raises(MalformedHeader):
            parse_model(blob[:-4])


class TestElementAddressing:
    def test_read_examples(self):
        m = parse_model(minimal_safetensors((1.0, 2.0)))
        g = group_over(m, "t")
        assert element_at(m, g, 0) == 1.0
        assert element_at(m, g, 1) == 2.0

    def test_read_after_write(self):
        m = parse_model(minimal_safetensors((1.0, 2.0))).mutable_copy()
        g = group_over(m, "t")
        set_element(m, g, 0, 0.0)
        assert element_at(m, g, 0) == 0.0
        assert element_at(m, g, 1) == 2.0

    def test_index_out_of_group(self):
        m = parse_model(minimal_safetensors())
        g = group_over(m, "t")
        with pytest.raises(IndexOutOfGroup):
            element_at(m, g, g.size)
        with pytest.raises(IndexOutOfGroup):
            element_at(m, g, -1)

    def test_write_preserves_width(self):
        m = build_synthetic(dtype=Dtype.F16, seed=2).mutable_copy()
        g = group_over(m, m.names[0])
        set_element(m, g, 3, 0.25)
        assert m.tensors[0].dtype is Dtype.F16
        assert element_at(m, g, 3) == 0.25

    def test_quantized_codes(self, small_model):
        q = quant.quantize_model(small_model, "q8_0").mutable_copy()
        g = group_over(q, q.names[0])
        code = element_at(q, g, 5, as_codes=True)
        assert isinstance(code, int)
        with pytest.raises(WriteToQuantizedDtype):
            set_element(q, g, 5, 1.0)
        set_element(q, g, 5, -3, as_codes=True)
        assert element_at(q, g, 5, as_codes=True) == -3

    def test_quantized_nibble_codes(self, small_model):
        q = quant.quantize_model(small_model, "q4_0").mutable_copy()
        g = group_over(q, q.names[0])
        set_element(q, g, 33, 11, as_codes=True)
        set_element(q, g, 49, 4, as_codes=True)  # high-nibble position
        assert element_at(q, g, 33, as_codes=True) == 11
        assert element_at(q, g, 49, as_codes=True) == 4

    def test_bf16_round_trip(self):
        m = build_synthetic(dtype=Dtype.BF16, seed=4).mutable_copy()
        g = group_over(m, m.names[0])
        set_element(m, g, 7, 1.5)
        assert element_at(m, g, 7) == 1.5
