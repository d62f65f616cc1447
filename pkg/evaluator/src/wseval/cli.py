"""weightsteg-eval: score models and drive probing sweeps.

The sweep command talks to the steganography toolkit exclusively through its
command-line interface and file formats; nothing here imports it.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

from .data import DatasetMissing
from .fixture import build_tiny_model
from .harness import EvalJob, ModelLoadError, evaluate


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="weightsteg-eval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", help="build the tiny local causal LM")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.set_defaults(func=_cmd_fixture)

    p = sub.add_parser("evaluate", help="write a score file for one model")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--weights", default=None,
                   help="standalone safetensors overriding the directory's")
    p.add_argument("--dataset", default="builtin:mixed")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="calibration",
                   choices=["calibration", "evaluation"])
    p.add_argument("--max-items", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="probe a (layer x n) grid and score it")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--layers", required=True,
                   help="comma-separated layer indices, e.g. 0,1,2")
    p.add_argument("--n-grid", default="1,2,4,8,12,16")
    p.add_argument("--seeds", default="0", help="comma-separated probe seeds")
    p.add_argument("--dataset", default="builtin:mixed")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--max-items", type=int, default=None)
    p.add_argument("--steg-cli", default="weightsteg")
    p.add_argument("--out", required=True, help="sweep file for `weightsteg target`")
    p.set_defaults(func=_cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelLoadError, DatasetMissing) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


def _cmd_fixture(args) -> int:
    path = build_tiny_model(args.out, seed=args.seed, layers=args.layers,
                            dim=args.dim, heads=args.heads)
    print(path)
    return 0


def _cmd_evaluate(args) -> int:
    job = EvalJob(model_dir=args.model_dir, weights=args.weights,
                  dataset=args.dataset, fraction=args.fraction, seed=args.seed,
                  split=args.split, max_items=args.max_items,
                  threads=args.threads)
    doc = evaluate(job, args.out)
    print(f"perplexity={doc['perplexity']} accuracy={doc['accuracy']:.4f} "
          f"items={doc['items']}")
    return 0


def _cmd_sweep(args) -> int:
    os.makedirs(args.workdir, exist_ok=True)
    weights = os.path.join(args.model_dir, "model.safetensors")
    layers = [int(x) for x in args.layers.split(",")]
    grid = [int(x) for x in args.n_grid.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]

    clean_files = []
    for seed in seeds:
        clean = os.path.join(args.workdir, f"clean.s{seed}.scores.json")
        evaluate(EvalJob(model_dir=args.model_dir, dataset=args.dataset,
                         fraction=args.fraction, seed=seed,
                         max_items=args.max_items), clean)
        clean_files.append(clean)

    cells = []
    for layer in layers:
        for n in grid:
            embedded_files = []
            for seed in seeds:
                tag = f"layer{layer}.n{n}.s{seed}"
                probed = os.path.join(args.workdir, f"probed.{tag}.safetensors")
                _run([args.steg_cli, "probe", "--model", weights,
                      "--group", f"layer:{layer}", "--n", str(n),
                      "--seed", str(seed), "--out", probed])
                scores = os.path.join(args.workdir, f"{tag}.scores.json")
                evaluate(EvalJob(model_dir=args.model_dir, weights=probed,
                                 dataset=args.dataset, fraction=args.fraction,
                                 seed=seed, max_items=args.max_items), scores)
                embedded_files.append(scores)
            size = _group_size(args.steg_cli, weights, layer)
            cells.append({"group_id": f"layer:{layer}", "n": n,
                          "group_size": size, "clean": clean_files,
                          "embedded": embedded_files})
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(cells, fh, indent=2)
    print(f"wrote {len(cells)} cells to {args.out}")
    return 0


def _run(cmd: list[str]):
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"{cmd[0]} failed: {proc.stderr.strip()}")
    return proc.stdout


def _group_size(cli: str, weights: str, layer: int) -> int:
    out = _run([cli, "group", "--model", weights, "--strategy", "layer",
                "--json"])
    for group in json.loads(out)["groups"]:
        if group["id"] == f"layer:{layer}":
            return group["size"]
    raise RuntimeError(f"layer:{layer} not present in {weights}")


if __name__ == "__main__":
    sys.exit(main())
