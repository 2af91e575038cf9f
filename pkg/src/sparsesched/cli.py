"""Command-line entry point: ``sparsesched <command> [flags]``.

Commands
  gen       synthetic model + calibration inputs
  schedule  layer scores and a sparsity plan
  compress  prune (and optionally quantize) a model under a plan
  sweep     uniform-sparsity error curve
  compare   uniform vs layer-order vs score-based plans over many seeds
  verify    numerical self-checks
  eval      output error of a compressed model against its reference

Every file written embeds the full run configuration, including the seed.
Failures print one line, ``error: <Kind>: <message>``, to stderr and exit
nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import verify as verify_mod
from .errors import CompressionError, InfeasibleTargetError
from .hessian import DEFAULT_DAMPING
from .pipeline import (
    COMPARE_HEADER,
    SUMMARY_HEADER,
    Case,
    CompressConfig,
    CompressionReport,
    build_plan,
    compare_schedulers,
    compress_model,
    layer_mse,
    model_output_error,
    sparsity_sweep,
    synthetic_cases,
)
from .pruning import DEFAULT_BLOCK_SIZE
from .report import write_csv, write_json
from .scheduler import DEFAULT_S_MAX, DEFAULT_S_MIN, DEFAULT_TARGET, SCORE_HEADER, score_model, score_rows
from .tensor import (
    ACTIVATIONS,
    apply_activation,
    gen_synthetic_model,
    load_calibration,
    load_model,
    save_calibration,
    save_model,
)

SCHEDULER_CHOICES = ("score", "uniform", "layer-order")
DEFAULT_BITS = 4
DEFAULT_OUT = "out"


class UsageError(ValueError):
    """Bad or conflicting command-line flags."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    model: str | None
    calib: str | None
    out: str | None
    s_min: float
    s_max: float
    target: float
    k: int | None
    bits: int | None
    block_size: int
    damping_frac: float
    seed: int
    scheduler: str
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", help="model manifest (file or directory)")
    common.add_argument("--calib", help="calibration manifest (file or directory)")
    common.add_argument("--out", help=f"output directory (default {DEFAULT_OUT!r})")
    common.add_argument("--s-min", type=float, default=DEFAULT_S_MIN)
    common.add_argument("--s-max", type=float, default=DEFAULT_S_MAX)
    common.add_argument("--target", type=float, default=DEFAULT_TARGET)
    common.add_argument("--k", type=int, default=None, help="number of score clusters (default min(8, layers))")
    common.add_argument(
        "--bits", type=int, nargs="?", const=DEFAULT_BITS, default=None, help="quantize to this many bits"
    )
    common.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    common.add_argument("--damping", type=float, default=DEFAULT_DAMPING)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--scheduler", choices=SCHEDULER_CHOICES, default="score")
    common.add_argument(
        "--score-inputs",
        choices=("dense", "compressed"),
        default="dense",
        help="score layers on dense activations or on activations of a uniformly pruned prefix",
    )

    synth = _Parser(add_help=False)
    synth.add_argument("--layers", type=int, default=12)
    synth.add_argument("--width", type=int, default=None)
    synth.add_argument("--heterogeneity", type=float, default=1.0)
    synth.add_argument("--samples", type=int, default=256)

    parser = _Parser(prog="sparsesched", description="Hessian-based pruning with layer-wise sparsity schedules.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", parents=[common, synth], help="generate a synthetic model")
    p.add_argument("--dims", type=_ints, default=None, help="layer widths, layers + 1 entries")
    p.add_argument("--activation", choices=ACTIVATIONS, default="identity")

    sub.add_parser("schedule", parents=[common], help="score layers and write a plan")

    p = sub.add_parser("compress", parents=[common], help="compress a model")
    p.add_argument("--quant-mode", choices=("joint", "sequential"), default=None)
    p.add_argument("--timing", action="store_true", help="include per-layer wall time in reports")

    p = sub.add_parser("sweep", parents=[common], help="uniform sparsity sweep")
    p.add_argument("--sparsities", type=_floats, default=[0.5, 0.6, 0.7, 0.8, 0.9])

    p = sub.add_parser("compare", parents=[common, synth], help="compare schedulers")
    p.add_argument("--seeds", type=int, default=25, help="number of synthetic models (seed, seed + 1, ...)")

    sub.add_parser("verify", parents=[common], help="run numerical self-checks")

    p = sub.add_parser("eval", parents=[common], help="evaluate a compressed model")
    p.add_argument("--compressed", help="compressed model manifest")
    return parser


# --------------------------------------------------------------------------
# validation


def _given(argv: Sequence[str], flag: str) -> bool:
    return any(a == flag or a.startswith(flag + "=") for a in argv)


def _validate(args, argv: Sequence[str]) -> None:
    if not 0.0 <= args.s_min < args.s_max <= 1.0:
        raise UsageError(f"need 0 <= s_min < s_max <= 1, got s_min={args.s_min}, s_max={args.s_max}")
    if args.block_size < 1:
        raise UsageError("--block-size must be >= 1")
    if args.damping < 0:
        raise UsageError("--damping must be >= 0")
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be >= 1")
    if args.bits is not None and not 2 <= args.bits <= 8:
        raise UsageError("--bits must lie in [2, 8]")
    if args.command in ("schedule", "compress", "compare"):
        if args.target > args.s_max:
            raise InfeasibleTargetError(f"infeasible target: {args.target} > s_max = {args.s_max}")
    if args.command in ("schedule", "compress", "sweep", "eval") and not (args.model and args.calib):
        raise UsageError(f"{args.command} needs --model and --calib")
    if args.command == "eval" and not args.compressed:
        raise UsageError("eval needs --compressed")
    if args.command == "compare" and bool(args.model) != bool(args.calib):
        raise UsageError("compare needs both --model and --calib, or neither")
    if args.command == "compare" and args.model and any(
        _given(argv, f) for f in ("--layers", "--width", "--heterogeneity", "--samples", "--seeds")
    ):
        raise UsageError("synthetic-model flags conflict with --model")
    if args.command == "gen" and args.dims is not None and args.width is not None:
        raise UsageError("--dims and --width are mutually exclusive")
    if args.command == "compress" and args.quant_mode is not None and args.bits is None:
        raise UsageError("--quant-mode requires --bits")
    if args.command == "sweep" and any(not 0.0 <= s <= 1.0 for s in args.sparsities):
        raise UsageError("--sparsities must lie in [0, 1]")
    unused = {"gen": ("--scheduler", "--bits"), "verify": ("--scheduler", "--bits"), "eval": ("--scheduler", "--bits"),
              "sweep": ("--scheduler",)}
    for flag in unused.get(args.command, ()):
        if _given(argv, flag):
            raise UsageError(f"{flag} has no effect for {args.command}")


def _run_config(args) -> RunConfig:
    options = {}
    options["score_inputs"] = args.score_inputs
    for key in ("layers", "width", "dims", "heterogeneity", "samples", "activation", "quant_mode", "sparsities",
                "seeds", "compressed", "timing"):
        if hasattr(args, key):
            options[key] = getattr(args, key)
    if args.command == "compress":
        options["quant_mode"] = args.quant_mode or "joint"
    return RunConfig(
        command=args.command,
        model=args.model,
        calib=args.calib,
        out=args.out if args.out is not None or args.command == "verify" else DEFAULT_OUT,
        s_min=args.s_min,
        s_max=args.s_max,
        target=args.target,
        k=args.k,
        bits=args.bits,
        block_size=args.block_size,
        damping_frac=args.damping,
        seed=args.seed,
        scheduler=args.scheduler,
        options=options,
    )


# --------------------------------------------------------------------------
# file safety


def _manifest_file(path: str, default: str) -> Path:
    p = Path(path)
    return p if p.suffix == ".json" else p / default


def _input_files(path: str, default: str) -> set[Path]:
    """Manifest plus every blob it references."""
    manifest = _manifest_file(path, default)
    files = {manifest.resolve()}
    try:
        data = json.loads(manifest.read_text())
    except (OSError, ValueError):
        return files
    entries = data.get("layers", []) + data.get("tensors", [])
    for e in entries:
        blob = e.get("tensor", {}).get("file")
        if blob:
            files.add((manifest.parent / blob).resolve())
    return files


class _Outputs:
    """Collects output paths and refuses any that would overwrite an input."""

    def __init__(self, out: str, protected: set[Path]):
        self.dir = Path(out)
        self.protected = protected

    def path(self, name: str) -> Path:
        p = self.dir / name
        if p.resolve() in self.protected:
            raise UsageError(f"refusing to overwrite input file {p}")
        return p

    def model(self, name: str, n_layers: int) -> Path:
        p = self.path(name)
        for i in range(n_layers):
            self.path(f"{p.stem}.{i:03d}.bin")
        return p

    def calib(self, name: str) -> Path:
        p = self.path(name)
        self.path(f"{p.stem}.x0.bin")
        return p


def _protected(args) -> set[Path]:
    files: set[Path] = set()
    if args.model:
        files |= _input_files(args.model, "model.json")
    if args.calib:
        files |= _input_files(args.calib, "calib.json")
    if getattr(args, "compressed", None):
        files |= _input_files(args.compressed, "model.json")
    return files


# --------------------------------------------------------------------------
# commands


def _cmd_gen(args, rc: RunConfig, out: _Outputs) -> None:
    if args.dims is not None:
        dims = args.dims
        n_layers = len(dims) - 1
    else:
        n_layers = args.layers
        dims = [args.width or 40] * (n_layers + 1)
    model, calib = gen_synthetic_model(n_layers, dims, args.heterogeneity, args.seed, args.samples, args.activation)
    meta = dict(model.metadata)
    meta["run_config"] = rc.to_dict()
    model_path = out.model("model.json", n_layers)
    calib_path = out.calib("calib.json")
    save_model(model.with_weights([l.weight for l in model.layers], metadata=meta), model_path)
    save_calibration(calib, calib_path, {"run_config": rc.to_dict(), "seed": rc.seed})
    print(f"wrote {model_path} ({n_layers} layers) and {calib_path}")


def _load_inputs(args):
    return load_model(args.model), load_calibration(args.calib)


def _plan(args, model, calib):
    kind = {"score": "score_based", "layer-order": "layer_order"}.get(args.scheduler, args.scheduler)
    return build_plan(
        kind,
        model,
        calib,
        args.target,
        args.s_min,
        args.s_max,
        args.k,
        args.seed,
        args.damping,
        args.score_inputs,
        args.block_size,
    )


def _plan_doc(rc: RunConfig, plan) -> dict:
    return {"run_config": rc.to_dict(), "seed": rc.seed, "plan": plan.to_dict()}


def _cmd_schedule(args, rc: RunConfig, out: _Outputs) -> None:
    model, calib = _load_inputs(args)
    compressed = args.target if args.score_inputs == "compressed" else None
    report = score_model(model, calib, args.damping, compressed, args.block_size)
    plan = _plan(args, model, calib)
    write_csv(out.path("scores.csv"), SCORE_HEADER, score_rows(report, plan), rc.to_dict())
    doc = _plan_doc(rc, plan)
    doc["scores"] = report.to_dict()["entries"]
    write_json(out.path("plan.json"), doc)
    print(f"plan: weighted sparsity {plan.weighted_total:.4f} over {len(plan.per_layer)} layers")


def _cmd_compress(args, rc: RunConfig, out: _Outputs) -> None:
    model, calib = _load_inputs(args)
    plan = _plan(args, model, calib)
    cfg = CompressConfig(args.block_size, args.damping, args.bits, args.quant_mode or "joint")
    compressed, report = compress_model(model, calib, plan, cfg, seed=args.seed)
    meta = dict(compressed.metadata)
    meta["run_config"] = rc.to_dict()
    compressed = compressed.with_weights([l.weight for l in compressed.layers], metadata=meta)
    extra = {name: {"quant_grid": g.to_dict()} for name, g in report.grids.items()}
    save_model(compressed, out.model("model.json", len(compressed.layers)), extra)
    _write_report(out, rc, report, args.timing)
    write_json(out.path("plan.json"), _plan_doc(rc, plan))
    print(
        f"compressed {len(compressed.layers)} layers: weighted sparsity {report.weighted_sparsity:.4f}, "
        f"output_rel_error {report.output_rel_error:.6g}"
    )


def _write_report(out: _Outputs, rc: RunConfig, report: CompressionReport, timing: bool) -> None:
    doc = {"run_config": rc.to_dict(), **report.to_dict(timing)}
    write_json(out.path("report.json"), doc)
    header = report.HEADER + (["time_ms"] if timing else [])
    write_csv(out.path("report.csv"), header, report.rows(timing), rc.to_dict())


def _cmd_sweep(args, rc: RunConfig, out: _Outputs) -> None:
    model, calib = _load_inputs(args)
    cfg = CompressConfig(args.block_size, args.damping, args.bits)
    curve = sparsity_sweep(model, calib, args.sparsities, cfg)
    write_csv(out.path("curve.csv"), ["sparsity", "output_rel_error"], curve, rc.to_dict())
    for s, e in curve:
        print(f"S={s:.3f}  output_rel_error={e:.6g}")


def _cmd_compare(args, rc: RunConfig, out: _Outputs) -> None:
    if args.model:
        model, calib = _load_inputs(args)
        cases = [Case(args.seed, model, calib)]
    else:
        seeds = range(args.seed, args.seed + args.seeds)
        cases = synthetic_cases(seeds, args.layers, args.width or 40, args.heterogeneity, args.samples)
    cfg = CompressConfig(args.block_size, args.damping, args.bits)
    result = compare_schedulers(cases, args.target, args.s_min, args.s_max, args.k, cfg)
    write_csv(out.path("compare.csv"), COMPARE_HEADER, result.rows, rc.to_dict())
    write_csv(out.path("compare_summary.csv"), SUMMARY_HEADER, result.summary, rc.to_dict())
    for row in result.summary:
        print(f"{row[0]:<12} sparsity {row[1]:.4f}  error {row[2]:.6g}  wins {row[3]}/{row[4]}")


def _cmd_verify(args, rc: RunConfig, out: _Outputs | None) -> int:
    results = verify_mod.run_all(args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    if out is not None:
        write_json(
            out.path("verify.json"),
            {"run_config": rc.to_dict(), "seed": rc.seed, "checks": [r.to_dict() for r in results]},
        )
    return 0 if all(r.passed for r in results) else 1


def _cmd_eval(args, rc: RunConfig, out: _Outputs) -> None:
    model, calib = _load_inputs(args)
    compressed = load_model(args.compressed)
    if compressed.names != model.names or any(a.shape != b.shape for a, b in zip(model.layers, compressed.layers)):
        raise CompressionError("compressed model does not match the reference architecture")
    layers = []
    x = calib.x0
    total_zero = total = 0
    for ref, comp in zip(model.layers, compressed.layers):
        zeros = int(np.count_nonzero(comp.weight == 0))
        layers.append(
            {
                "name": ref.name,
                "params": ref.n_params,
                "sparsity": zeros / ref.n_params,
                "layer_mse": layer_mse(ref.weight, comp.weight, x),
            }
        )
        total_zero += zeros
        total += ref.n_params
        x = apply_activation(comp.weight @ x, comp.activation)
    err = model_output_error(model, compressed, calib.x0)
    doc = {
        "run_config": rc.to_dict(),
        "seed": rc.seed,
        "output_rel_error": err,
        "weighted_sparsity": total_zero / total,
        "layers": layers,
    }
    write_json(out.path("eval.json"), doc)
    print(f"output_rel_error {err:.6g}, weighted sparsity {total_zero / total:.4f}")


_HANDLERS = {
    "gen": _cmd_gen,
    "schedule": _cmd_schedule,
    "compress": _cmd_compress,
    "sweep": _cmd_sweep,
    "compare": _cmd_compare,
    "eval": _cmd_eval,
}


def _fail(exc: BaseException, code: int) -> int:
    kind = type(exc).__name__
    msg = " ".join(str(exc).split()) or kind
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        _validate(args, argv)
        rc = _run_config(args)
        protected = _protected(args)
        out = _Outputs(rc.out, protected) if rc.out is not None else None
        if args.command == "verify":
            return _cmd_verify(args, rc, out)
        _HANDLERS[args.command](args, rc, out)
        return 0
    except UsageError as exc:
        return _fail(exc, 2)
    except (CompressionError, ValueError, KeyError, OSError) as exc:
        return _fail(exc, 1)


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
