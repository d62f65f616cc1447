import json

import numpy as np
import pytest

import gguf_ref
from weightsteg import quant, tensorfile
from weightsteg.cli import main
from weightsteg.tensorfile import load_model, save_model

from conftest import build_synthetic


@pytest.fixture
def model_path(tmp_path):
    path = tmp_path / "m.safetensors"
    save_model(build_synthetic(num_layers=6, elems=512, seed=4), path)
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestEmbedExtract:
    def test_general_round_trip(self, tmp_path, model_path, capsys):
        payload = tmp_path / "p.bin"
        payload.write_bytes(b"opaque payload bytes")
        assert run("embed", "--model", model_path, "--payload", payload,
                   "--mode", "general", "--group", "layer:2", "--n", "10",
                   "--seed", "7", "--out", tmp_path / "m2.safetensors",
                   "--manifest", tmp_path / "man.json") == 0
        assert (tmp_path / "m2.safetensors").exists()
        assert (tmp_path / "man.json").exists()
        assert run("extract", "--model", tmp_path / "m2.safetensors",
                   "--manifest", tmp_path / "man.json",
                   "--out", tmp_path / "rec.bin") == 0
        assert (tmp_path / "rec.bin").read_bytes() == b"opaque payload bytes"

    def test_robust_full_flag_set(self, tmp_path, model_path):
        payload = tmp_path / "p.bin"
        payload.write_bytes(b"survives quantization")
        assert run("embed", "--model", model_path, "--payload", payload,
                   "--mode", "robust", "--scheme", "q8_0", "--group", "layer:5",
                   "--n", "3", "--seed", "7",
                   "--out", tmp_path / "m2.safetensors",
                   "--manifest", tmp_path / "man.json") == 0
        # user-side deployment: quantize, then extract from the deployed file
        assert run("quantize", "--model", tmp_path / "m2.safetensors",
                   "--scheme", "q8_0", "--out", tmp_path / "m2q.safetensors") == 0
        assert run("extract", "--model", tmp_path / "m2q.safetensors",
                   "--manifest", tmp_path / "man.json",
                   "--out", tmp_path / "rec.bin") == 0
        assert (tmp_path / "rec.bin").read_bytes() == b"survives quantization"

    def test_extract_from_gguf(self, tmp_path, model_path):
        payload = tmp_path / "p.bin"
        payload.write_bytes(b"gguf path")
        run("embed", "--model", model_path, "--payload", payload,
            "--mode", "robust", "--scheme", "q8_0", "--group", "layer:1",
            "--n", "3", "--seed", "1", "--out", tmp_path / "m2.safetensors",
            "--manifest", tmp_path / "man.json")
        # a third party quantizes the shared file into GGUF
        embedded = load_model(tmp_path / "m2.safetensors")
        quantized = quant.quantize_model(embedded, "q8_0")
        tensors = []
        for rec in quantized.tensors:
            tensors.append((rec.name, rec.shape, gguf_ref.GGML_Q8_0,
                            bytes(quantized.tensor_bytes(rec))))
        (tmp_path / "m2q.gguf").write_bytes(gguf_ref.write_gguf(tensors))
        assert run("extract", "--model", tmp_path / "m2q.gguf",
                   "--manifest", tmp_path / "man.json",
                   "--out", tmp_path / "rec.bin") == 0
        assert (tmp_path / "rec.bin").read_bytes() == b"gguf path"

    def test_checksum_failure_reports_ber(self, tmp_path, model_path, capsys):
        payload = tmp_path / "p.bin"
        rng = np.random.default_rng(0)
        payload.write_bytes(rng.bytes(1024))
        run("embed", "--model", model_path, "--payload", payload,
            "--mode", "general", "--group", "layer:0", "--n", "8",
            "--seed", "3", "--out", tmp_path / "m2.safetensors",
            "--manifest", tmp_path / "man.json")
        run("quantize", "--model", tmp_path / "m2.safetensors",
            "--scheme", "q8_0", "--out", tmp_path / "m2q.safetensors")
        code = run("extract", "--model", tmp_path / "m2q.safetensors",
                   "--manifest", tmp_path / "man.json",
                   "--out", tmp_path / "rec.bin", "--expected", payload)
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ChecksumMismatch"
        assert 0.3 <= err["bit_error_rate"] <= 0.7

    def test_domain_error_exit_code(self, tmp_path, model_path, capsys):
        payload = tmp_path / "big.bin"
        payload.write_bytes(b"\x00" * 4096)  # larger than layer capacity at n=1
        code = run("embed", "--model", model_path, "--payload", payload,
                   "--mode", "general", "--group", "layer:0", "--n", "1",
                   "--seed", "0", "--out", tmp_path / "x.safetensors",
                   "--manifest", tmp_path / "x.json")
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "CapacityExceeded"
        assert not (tmp_path / "x.safetensors").exists()

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            run("embed", "--model", "x")
        assert exc.value.code == 2

    def test_deterministic_outputs(self, tmp_path, model_path):
        payload = tmp_path / "p.bin"
        payload.write_bytes(b"identical twice")
        for tag in ("a", "b"):
            run("embed", "--model", model_path, "--payload", payload,
                "--mode", "general", "--group", "layer:3", "--n", "4",
                "--seed", "11", "--out", tmp_path / f"{tag}.safetensors",
                "--manifest", tmp_path / f"{tag}.json")
        assert (tmp_path / "a.safetensors").read_bytes() == \
            (tmp_path / "b.safetensors").read_bytes()
        assert (tmp_path / "a.json").read_text() == \
            (tmp_path / "b.json").read_text()


class TestMeasurement:
    def test_inspect(self, model_path, capsys):
        assert run("inspect", model_path, "--json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["format"] == "safetensors"
        assert doc["tensor_count"] == 12

    def test_group_listing(self, model_path, capsys):
        assert run("group", "--model", model_path, "--strategy", "layer",
                   "--json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert [g["id"] for g in doc["groups"]][:2] == ["layer:0", "layer:1"]

    def test_capacity_matches_formula(self, model_path, capsys):
        assert run("capacity", "--model", model_path, "--group", "layer:0",
                   "--n", "3") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["capacity_bytes"] == 1024 * 3 // 8

    def test_probe_and_detect(self, tmp_path, model_path, capsys):
        assert run("probe", "--model", model_path, "--group", "layer:0",
                   "--n", "2", "--seed", "5",
                   "--out", tmp_path / "probed.safetensors") == 0
        assert run("detect", "--model", tmp_path / "probed.safetensors",
                   "--group", "layer:0",
                   "--json", tmp_path / "stats.json") == 0
        doc = json.loads((tmp_path / "stats.json").read_text())
        assert doc["selection"] == "layer:0"
        fractions = {p["plane"]: p["ones_fraction"] for p in doc["planes"]}
        assert abs(fractions[1] - 0.5) < 0.1  # randomized plane

    def test_pai_output(self, tmp_path, capsys):
        clean = tmp_path / "clean.scores.json"
        probed = tmp_path / "probe.scores.json"
        clean.write_text(json.dumps({
            "model_digest": "a", "dataset": "qa", "split": "calibration",
            "seed": 0, "perplexity": 5.0, "accuracy": 0.6}))
        probed.write_text(json.dumps({
            "model_digest": "b", "dataset": "qa", "split": "calibration",
            "seed": 0, "perplexity": 10.0, "accuracy": 0.45}))
        assert run("pai", "--clean", clean, "--embedded", probed) == 0
        out = capsys.readouterr().out
        assert "D_ppl=0.500000" in out and "D_acc=0.250000" in out
        assert "d_pai=0.500000" in out and "SR=0.500000" in out

    def test_target_sweep(self, tmp_path, capsys):
        def scores(path, ppl, acc, seed=0):
            path.write_text(json.dumps({
                "model_digest": "x", "dataset": "qa", "split": "calibration",
                "seed": seed, "perplexity": ppl, "accuracy": acc}))
            return str(path)

        clean = scores(tmp_path / "clean.json", 8.0, 0.5)
        cells = []
        for i, ppl in enumerate((8.4, 8.1, 12.0)):
            cell_scores = scores(tmp_path / f"cell{i}.json", ppl, 0.5)
            cells.append({"group_id": f"layer:{i}", "n": 2, "group_size": 512,
                          "clean": [clean], "embedded": [cell_scores]})
        sweep = tmp_path / "sweep.json"
        sweep.write_text(json.dumps(cells))
        assert run("target", "--sweep", sweep,
                   "--out", tmp_path / "report.json") == 0
        out = capsys.readouterr().out
        assert "selected: layer:1 n=2" in out
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["selected"] == {"group_id": "layer:1", "n": 2}

    def test_sanitize_cli(self, tmp_path, model_path):
        assert run("sanitize", "--model", model_path, "--seed", "9",
                   "--out", tmp_path / "clean.safetensors") == 0
        cleaned = load_model(tmp_path / "clean.safetensors")
        original = load_model(model_path)
        for a, b in zip(original.tensors, cleaned.tensors):
            pa = original.pattern_view(a)
            pb = cleaned.pattern_view(b)
            assert np.array_equal(pa >> 10, pb >> 10)  # default k=10
            assert not np.array_equal(pa, pb)

    def test_quantize_raw_emit(self, tmp_path, model_path):
        assert run("quantize", "--model", model_path, "--scheme", "q4_0",
                   "--emit", "raw", "--out", tmp_path / "q.safetensors") == 0
        q = load_model(tmp_path / "q.safetensors")
        assert all(t.dtype is tensorfile.Dtype.Q4_0 for t in q.tensors)
