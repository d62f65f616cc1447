"""Command-line entry point.

Subcommands separate measurement (group, probe, pai, target, capacity) from
action (embed, extract, quantize, sanitize, detect) so the expensive scoring
loop can run out-of-process and feed its results back in as score files.

Exit codes: 0 success, 1 domain error (a machine-readable JSON line goes to
stderr), 2 usage error. All file outputs are written atomically and every
JSON document echoes the invocation config for reproducibility.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from . import __version__, defense, embed, payload, quant, target, tensorfile
from .errors import ChecksumMismatch, WeightStegError
from .target import DEFAULT_LAYER_PATTERN


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ChecksumMismatch as exc:
        info = {"error": exc.code, "message": str(exc), **exc.details()}
        if getattr(args, "expected", None):
            with open(args.expected, "rb") as fh:
                reference = fh.read()
        else:
            reference = None
        if reference is not None:
            info["bit_error_rate"] = payload.bit_error_rate(exc.recovered, reference)
        print(json.dumps(info), file=sys.stderr)
        return 1
    except WeightStegError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc),
                          **exc.details()}), file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weightsteg",
        description="LSB steganography and steganalysis for LLM weight files")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="summarize a weight file")
    p.add_argument("model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("group", help="list candidate parameter groups")
    p.add_argument("--model", required=True)
    p.add_argument("--strategy", required=True,
                   choices=[s.value for s in tensorfile.GroupStrategy])
    _pattern_arg(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_group)

    p = sub.add_parser("capacity", help="payload capacity of a group")
    p.add_argument("--model", required=True)
    p.add_argument("--group", required=True, metavar="GROUP_ID")
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--mode", default="general", choices=["general", "robust"])
    p.add_argument("--scheme", default="q8_0",
                   choices=["q8_0", "q4_0", "affine"])
    _affine_args(p)
    _pattern_arg(p)
    p.set_defaults(func=_cmd_capacity)

    p = sub.add_parser("probe", help="fill a group's low bits with random bits")
    p.add_argument("--model", required=True)
    p.add_argument("--group", required=True, metavar="GROUP_ID")
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    _pattern_arg(p)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("pai", help="performance-aware importance of one cell")
    p.add_argument("--clean", required=True, nargs="+",
                   help="clean score file(s), one per seed")
    p.add_argument("--embedded", required=True, nargs="+",
                   help="embedded/probed score file(s), one per seed")
    p.add_argument("--group", default="", metavar="GROUP_ID")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--json", default=None, metavar="OUT")
    p.set_defaults(func=_cmd_pai)

    p = sub.add_parser("target", help="aggregate a PAI sweep and pick (G*, n*)")
    p.add_argument("--sweep", required=True,
                   help="JSON list of {group_id, n, group_size?, clean[], embedded[]}")
    p.add_argument("--out", default=None, metavar="REPORT_JSON")
    p.set_defaults(func=_cmd_target)

    p = sub.add_parser("embed", help="embed a payload file into a model")
    p.add_argument("--model", required=True)
    p.add_argument("--payload", required=True)
    p.add_argument("--mode", required=True, choices=["general", "robust"])
    p.add_argument("--scheme", default="q8_0", choices=["q8_0", "q4_0", "affine"])
    p.add_argument("--group", required=True, metavar="GROUP_ID")
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--offset", type=int, default=0,
                   help="bit planes to skip below the field (general mode)")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", required=True)
    _affine_args(p)
    _pattern_arg(p)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("extract", help="recover a payload using its manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expected", default=None,
                   help="reference payload; enables bit-error-rate reporting")
    _pattern_arg(p, default=None)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("quantize", help="simulate quantized deployment")
    p.add_argument("--model", required=True)
    p.add_argument("--scheme", required=True, choices=["q8_0", "q4_0"])
    p.add_argument("--out", required=True)
    p.add_argument("--emit", default="reconstructed",
                   choices=["reconstructed", "raw"],
                   help="reconstructed floats (default) or raw block codes")
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("sanitize", help="randomize low bit planes of all floats")
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sanitize)

    p = sub.add_parser("detect", help="LSB bit-plane statistics report")
    p.add_argument("--model", required=True)
    p.add_argument("--group", default=None, metavar="GROUP_ID")
    p.add_argument("--entropy-bits", type=int, default=8)
    p.add_argument("--json", default=None, metavar="OUT")
    _pattern_arg(p)
    p.set_defaults(func=_cmd_detect)

    return parser


def _pattern_arg(p, default=DEFAULT_LAYER_PATTERN):
    p.add_argument("--layer-pattern", default=default,
                   help="regex with the layer index as group 1")


def _affine_args(p):
    p.add_argument("--affine-scale", type=float, default=None)
    p.add_argument("--affine-zero-point", type=int, default=0)
    p.add_argument("--affine-min-code", type=int, default=-128)
    p.add_argument("--affine-max-code", type=int, default=127)


def _affine_of(args) -> quant.AffineQuantParams | None:
    if getattr(args, "affine_scale", None) is None:
        return None
    return quant.AffineQuantParams(
        args.affine_scale, args.affine_zero_point,
        args.affine_min_code, args.affine_max_code)


def _config_of(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items())
            if k not in skip and v is not None}


def _write_json(path: str | None, doc: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
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


def _write_bytes(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- subcommands ---------------------------------------------------------------

def _cmd_inspect(args) -> int:
    model = tensorfile.load_model(args.model)
    doc = {
        "config": _config_of(args),
        "format": model.format.value,
        "tensor_count": len(model.tensors),
        "total_param_count": model.total_param_count,
        "digest": tensorfile.model_digest(model),
        "metadata": model.metadata,
        "tensors": [{
            "name": t.name, "dtype": t.dtype.value, "shape": list(t.shape),
            "data_offset": t.data_offset, "data_length": t.data_length,
        } for t in model.tensors],
    }
    if args.json:
        _write_json(None, doc)
        return 0
    print(f"format: {doc['format']}  tensors: {doc['tensor_count']}  "
          f"parameters: {doc['total_param_count']}")
    print(f"digest: {doc['digest']}")
    for t in doc["tensors"]:
        print(f"  {t['name']:40s} {t['dtype']:5s} {t['shape']}")
    return 0


def _cmd_group(args) -> int:
    model = tensorfile.load_model(args.model)
    groups = target.make_groups(model, args.strategy, args.layer_pattern)
    doc = {"config": _config_of(args),
           "groups": [{"id": g.id, "size": g.size,
                       "tensors": [r.tensor for r in g.members]}
                      for g in groups]}
    if args.json:
        _write_json(None, doc)
        return 0
    for g in doc["groups"]:
        print(f"{g['id']:32s} size={g['size']:>12d}  tensors={len(g['tensors'])}")
    return 0


def _cmd_capacity(args) -> int:
    model = tensorfile.load_model(args.model)
    group = target.resolve_group(model, args.group, args.layer_pattern)
    nbytes = target.capacity(group, args.n, args.mode,
                             scheme=args.scheme, model=model,
                             affine=_affine_of(args))
    print(json.dumps({"config": _config_of(args), "group": group.id,
                      "n": args.n, "mode": args.mode, "capacity_bytes": nbytes}))
    return 0


def _cmd_probe(args) -> int:
    model = tensorfile.load_model(args.model)
    group = target.resolve_group(model, args.group, args.layer_pattern)
    probed = target.probe(model, group, args.n, args.seed)
    tensorfile.save_model(probed, args.out)
    return 0


def _scores_of(paths) -> list[target.EvalScores]:
    return [target.load_scores(p) for p in paths]


def _cmd_pai(args) -> int:
    clean = _scores_of(args.clean)
    embedded = _scores_of(args.embedded)
    if len(clean) not in (1, len(embedded)):
        raise WeightStegError(
            "give one clean score file, or one per embedded file")
    if len(clean) == 1:
        clean = clean * len(embedded)
    report = target.PaiReport(group_id=args.group, n=args.n)
    for c, e in zip(clean, embedded):
        report.runs.append(target.pai(c, e))
    doc = {"config": _config_of(args), **report.to_json_dict()}
    if report.sr < 0:
        print("warning: d_pai exceeds 1, stealth rate is negative",
              file=sys.stderr)
    if args.json is not None:
        _write_json(args.json, doc)
    print(f"D_ppl={report.d_ppl:.6f} D_acc={report.d_acc:.6f} "
          f"d_pai={report.d_pai:.6f} SR={report.sr:.6f}")
    return 0


def _cmd_target(args) -> int:
    with open(args.sweep, encoding="utf-8") as fh:
        cells = json.load(fh)
    reports = []
    for cell in cells:
        report = target.PaiReport(group_id=cell["group_id"], n=int(cell["n"]),
                                  group_size=int(cell.get("group_size", 0)))
        clean = _scores_of(cell["clean"])
        embedded = _scores_of(cell["embedded"])
        if len(clean) == 1:
            clean = clean * len(embedded)
        for c, e in zip(clean, embedded):
            report.runs.append(target.pai(c, e))
        reports.append(report)
    group_id, n = target.select_target(reports)
    doc = {
        "config": _config_of(args),
        "reports": [r.to_json_dict() for r in reports],
        "selected": {"group_id": group_id, "n": n},
    }
    if args.out:
        _write_json(args.out, doc)
    print(target.report_table(reports))
    print(f"selected: {group_id} n={n}")
    return 0


def _cmd_embed(args) -> int:
    model = tensorfile.load_model(args.model)
    group = target.resolve_group(model, args.group, args.layer_pattern)
    with open(args.payload, "rb") as fh:
        raw = fh.read()
    frame = payload.prepare_payload(raw, args.n, args.seed)
    pattern = None if args.layer_pattern == DEFAULT_LAYER_PATTERN \
        else args.layer_pattern
    if args.mode == "general":
        out, manifest = embed.embed_general(
            model, group, frame, offset=args.offset, layer_pattern=pattern)
    else:
        if args.offset:
            raise WeightStegError("--offset applies to general mode only")
        out, manifest = embed.embed_robust(
            model, group, frame, args.scheme, affine=_affine_of(args),
            layer_pattern=pattern)
    tensorfile.save_model(out, args.out)
    manifest.save(args.manifest)
    return 0


def _cmd_extract(args) -> int:
    model = tensorfile.load_model(args.model)
    manifest = payload.EmbedManifest.load(args.manifest)
    raw = embed.extract(model, manifest, layer_pattern=args.layer_pattern)
    _write_bytes(args.out, raw)
    if args.expected:
        with open(args.expected, "rb") as fh:
            reference = fh.read()
        ber = payload.bit_error_rate(raw, reference)
        print(f"bit_error_rate={ber:.6f}")
    return 0


def _cmd_quantize(args) -> int:
    model = tensorfile.load_model(args.model)
    quantized = quant.quantize_model(model, args.scheme)
    if args.emit == "reconstructed":
        quantized = quant.dequantize_model(quantized)
    tensorfile.save_model(quantized, args.out)
    return 0


def _cmd_sanitize(args) -> int:
    model = tensorfile.load_model(args.model)
    out = defense.sanitize(model, args.k, args.seed)
    tensorfile.save_model(out, args.out)
    return 0


def _cmd_detect(args) -> int:
    model = tensorfile.load_model(args.model)
    group = None
    if args.group:
        group = target.resolve_group(model, args.group, args.layer_pattern)
    report = defense.lsb_stats(model, group, entropy_bits=args.entropy_bits)
    doc = {"config": _config_of(args), **report.to_json_dict()}
    if args.json is not None:
        _write_json(args.json, doc)
    print(f"selection: {report.selection}  elements: {report.element_count}")
    print(f"aggregate entropy (bottom {report.entropy_bits} planes): "
          f"{report.aggregate_entropy:.4f} bits")
    print("plane  ones_fraction  chi_square")
    for p in report.planes:
        print(f"{p.plane:>5d}  {p.ones_fraction:>13.6f}  {p.chi_square:>10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
