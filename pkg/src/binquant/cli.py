"""``binquant`` command line: quantize, size-report, train, verify, bench."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import harness, kernels, modelpack
from . import quantcore as qc

DEFAULT_SEED = 42


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_scheme(name: str, block: Optional[int] = None, clip: Optional[float] = None) -> qc.QuantScheme:
    """Scheme alias plus optional overrides; ``block 0`` means per-channel."""
    try:
        scheme = modelpack.parse_scheme(name)
    except ValueError as exc:
        raise CliError(f"{exc}; valid: e1..e5, absmean1, absmax1, absmax2") from None
    if scheme is None:
        raise CliError("scheme must quantize (got a float alias)")
    changes = {}
    if block is not None:
        changes["block_size"] = block or None
        changes["granularity"] = qc.Granularity.SUB_CHANNEL if block else qc.Granularity.PER_CHANNEL
    if clip is not None:
        changes["clip"] = clip
    try:
        return dataclasses.replace(scheme, **changes)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _write_text(path: Optional[str], text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _parse_sizes(spec: str) -> list:
    sizes = []
    for item in spec.split(","):
        parts = item.lower().strip().split("x")
        if len(parts) != 3 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise CliError(f"bad size {item!r}, expected MxKxN")
        sizes.append(tuple(int(p) for p in parts))
    return sizes


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_quantize(args) -> int:
    try:
        raw = modelpack.read_raw(args.input)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {args.input}: {exc}") from None
    if not raw:
        raise CliError(f"{args.input} contains no tensors")
    scheme = resolve_scheme(args.scheme, args.block, args.clip)
    layers, tensors = [], {}
    print(f"{'tensor':<24} {'shape':<16} {'scheme':<28} {'mse':>12}")
    for name, w in raw.items():
        shape = tuple(w.shape)
        if w.ndim < 2:
            # biases and norms stay float
            layers.append(modelpack.LayerSpec(name, shape, None))
            tensors[name] = w
            print(f"{name:<24} {str(shape):<16} {'float32':<28} {0.0:>12.6g}")
            continue
        try:
            q = modelpack.compress_metadata(qc.quantize(w, scheme), args.meta)
        except ValueError as exc:
            raise CliError(f"tensor {name}: {exc}") from None
        mse = float(np.mean((qc.dequantize(q) - w.astype(np.float64)) ** 2))
        layers.append(modelpack.LayerSpec(name, shape, scheme))
        tensors[name] = q
        print(f"{name:<24} {str(shape):<16} {scheme.label():<28} {mse:>12.6g}")
    manifest = modelpack.ModelManifest(layers)
    nbytes = modelpack.write_model(args.out, manifest, tensors, args.meta)
    report = modelpack.size_report(manifest, args.meta)
    print(f"wrote {args.out}: {nbytes} bytes, {report.total_bits_quantized:,} bits "
          f"({args.meta} meta), {report.reduction_factor:.2f}x vs float32")
    return 0


def cmd_size_report(args) -> int:
    try:
        manifest = modelpack.paper_manifest() if args.manifest == "builtin" else modelpack.load_manifest(args.manifest)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot load manifest {args.manifest}: {exc}") from None
    if args.scheme and args.scheme.lower() in ("e0", "float", "f32"):
        manifest = manifest.with_scheme(None)
    elif args.scheme:
        manifest = manifest.with_scheme(resolve_scheme(args.scheme, args.block))
    report = modelpack.size_report(manifest, args.meta)
    text = report.csv() if args.format == "csv" else report.table(args.max_layers) + "\n"
    _write_text(args.out, text)
    return 0


def cmd_train(args) -> int:
    exps = harness.EXPERIMENTS if args.exp.lower() == "all" else [e.strip() for e in args.exp.split(",")]
    seeds = [int(s) for s in str(args.seed).split(",")]
    overrides = {}
    for key in ("steps", "base_steps", "lr", "batch", "n_train", "n_eval", "meta_dtype"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    try:
        configs = [harness.ExperimentConfig(exp_id=e, seed=s, **overrides) for s in seeds for e in exps]
    except ValueError as exc:
        raise CliError(str(exc)) from None
    reports = []
    for cfg in configs:
        r = harness.run_experiment(cfg)
        reports.append(r)
        print(f"{r.exp_id} seed={r.seed} steps={r.steps} acc={r.eval_acc:.4f} diverged={str(r.diverged).lower()} "
              f"({r.wall_time:.1f}s)", file=sys.stderr)
    table, csv_text = harness.report_table(reports)
    print(table)
    if args.out:
        _write_text(args.out, csv_text)
    if args.export:
        if len(configs) != 1:
            raise CliError("--export needs a single experiment and seed")
        manifest, tensors = harness.export_tensors(configs[0], reports[0].params)
        modelpack.write_model(args.export, manifest, tensors, configs[0].meta_dtype)
    return 0


def cmd_verify(args) -> int:
    ok, msg = modelpack.verify_model(args.file)
    print(f"{'OK' if ok else 'FAIL'}: {args.file}: {msg}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    rows = kernels.bench_matmul(_parse_sizes(args.sizes), reps=args.reps,
                                schemes=[s.strip() for s in args.schemes.split(",")], seed=args.seed)
    _write_text(args.out, kernels.bench_csv(rows))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binquant", description="Weight binarization and low-bit quantization tools.")
    p.add_argument("--config", help="JSON file of flag defaults for the chosen subcommand")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize an RTW0 tensor file into a BQW1 model")
    q.add_argument("--in", dest="input", required=True, help="RTW0 raw tensor file")
    q.add_argument("--scheme", required=True, help="e1..e5, absmean1, absmax1, absmax2")
    q.add_argument("--block", type=int, help="sub-channel block size (0 = per-channel)")
    q.add_argument("--clip", type=float, help="static clip factor for absmax schemes")
    q.add_argument("--meta", choices=modelpack.META_DTYPES, default="f32")
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=DEFAULT_SEED)
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("size-report", help="model size under a quantization scheme")
    s.add_argument("--manifest", default="builtin", help="manifest JSON, or 'builtin' for the 893M-param layout")
    s.add_argument("--meta", choices=modelpack.META_DTYPES, default="f32")
    s.add_argument("--scheme", help="apply this scheme to every quantizable layer (e0 = all float)")
    s.add_argument("--block", type=int)
    s.add_argument("--format", choices=("table", "csv"), default="table")
    s.add_argument("--max-layers", type=_positive_int)
    s.add_argument("--out", help="write here instead of stdout")
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.set_defaults(func=cmd_size_report)

    t = sub.add_parser("train", help="run desk-scale QAT experiments")
    t.add_argument("--exp", required=True, help="E0..E5, comma list, or 'all'")
    t.add_argument("--seed", default=str(DEFAULT_SEED), help="seed or comma list of seeds")
    t.add_argument("--out", help="results CSV")
    t.add_argument("--steps", type=_positive_int, help="exact step count (skips the per-experiment multiplier)")
    t.add_argument("--base-steps", type=_positive_int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=_positive_int)
    t.add_argument("--n-train", type=_positive_int)
    t.add_argument("--n-eval", type=_positive_int)
    t.add_argument("--meta", dest="meta_dtype", choices=modelpack.META_DTYPES)
    t.add_argument("--export", help="also write the trained model as BQW1")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="check a BQW1 file's structure and checksum")
    v.add_argument("--file", required=True)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="float vs packed matmul timings as CSV")
    b.add_argument("--sizes", required=True, help="comma list of MxKxN")
    b.add_argument("--reps", type=_positive_int, default=5)
    b.add_argument("--schemes", default="e5")
    b.add_argument("--out", help="CSV path (default stdout)")
    b.add_argument("--seed", type=int, default=DEFAULT_SEED)
    b.set_defaults(func=cmd_bench)
    return p


def _load_config(parser: argparse.ArgumentParser, path: str, argv: Sequence[str]) -> None:
    """Install a JSON config's values as defaults of the chosen subcommand."""
    try:
        conf = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    if not isinstance(conf, dict):
        raise CliError("config must be a JSON object")
    choices = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    command = next((a for a in argv if a in choices), None)
    if command is None:
        return
    subparser = choices[command]
    conf = {k.replace("-", "_"): v for k, v in conf.items()}
    known = {a.dest for a in subparser._actions}
    unknown = sorted(k for k in conf if k not in known)
    if unknown:
        raise CliError(f"unknown config keys for {command}: {', '.join(unknown)}")
    # explicit flags still win over the file
    subparser.set_defaults(**conf)
    for a in subparser._actions:
        if a.dest in conf:
            a.required = False


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = "binquant"
    try:
        if known.config:
            _load_config(parser, known.config, argv)
        args = parser.parse_args(argv)
        command = f"binquant {args.command}"
        return args.func(args)
    except CliError as exc:
        print(f"{command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"{command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
