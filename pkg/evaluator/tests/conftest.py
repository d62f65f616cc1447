import json
import shutil
import subprocess

import pytest

from wseval import EvalJob, build_tiny_model, evaluate

STEG_CLI = shutil.which("weightsteg")

needs_steg_cli = pytest.mark.skipif(
    STEG_CLI is None, reason="the weightsteg CLI must be installed")


def run_steg(*argv) -> str:
    proc = subprocess.run([STEG_CLI, *map(str, argv)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


@pytest.fixture(scope="session")
def tiny_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture") / "tiny"
    build_tiny_model(str(out), seed=0)
    return out


@pytest.fixture(scope="session")
def clean_scores(tiny_model, tmp_path_factory):
    """Full-split clean score file, shared across tests."""
    path = tmp_path_factory.mktemp("scores") / "clean.scores.json"
    doc = evaluate(EvalJob(model_dir=str(tiny_model)), str(path))
    return path, doc


@pytest.fixture(scope="session")
def probe_scores(tiny_model, clean_scores, tmp_path_factory):
    """Layer-0 probes at n=1 and n=16 with their score files."""
    if STEG_CLI is None:
        pytest.skip("the weightsteg CLI must be installed")
    workdir = tmp_path_factory.mktemp("probes")
    weights = tiny_model / "model.safetensors"
    out = {}
    for n in (1, 16):
        probed = workdir / f"probed.n{n}.safetensors"
        run_steg("probe", "--model", weights, "--group", "layer:0",
                 "--n", n, "--seed", 1, "--out", probed)
        scores = workdir / f"probe.n{n}.scores.json"
        doc = evaluate(EvalJob(model_dir=str(tiny_model), weights=str(probed)),
                       str(scores))
        out[n] = (scores, doc)
    return out


def read_pai(clean_path, embedded_path, tmp_path) -> dict:
    """d_pai of one cell, computed by the steganography CLI."""
    out = tmp_path / "pai.json"
    run_steg("pai", "--clean", clean_path, "--embedded", embedded_path,
             "--json", out)
    return json.loads(out.read_text())
