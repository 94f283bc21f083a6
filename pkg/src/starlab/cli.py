"""Command-line entry point: fixed-point reports, lattice simulations,
training jobs, and gradient checks, each leaving a manifest that reproduces
the run bit-identically.

Exit codes: 0 success, 1 runtime failure (divergence, non-convergence,
failed check), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .analysis import SimConfig, fixed_point_report, simulate_gradient_field
from .cells import CellKind, save_cells
from .heatmap import field_svg
from .lattice import LossMode, StackSpec
from .numerics import JacobiConvergenceError, Rng
from .tasks import IdxFormatError, load_mnist_idx
from .train import (ConfigError, NonFiniteGradientError, config_from_dict,
                    grad_check, train_run)

ARTIFACT_FORMAT = 1
GRADCHECK_PASS_BOUND = 1e-5


class UsageError(ValueError):
    pass


def _cell_kind(name: str) -> CellKind:
    try:
        return CellKind(name.lower())
    except ValueError:
        raise UsageError(f"unknown cell kind {name!r}; "
                         f"choose from {[k.value for k in CellKind]}") from None


def _write_manifest(out_dir: str, subcommand: str, argv: list[str],
                    resolved: dict, seed: int, outputs: list[str], wall: float):
    manifest = {
        "artifact_format": ARTIFACT_FORMAT,
        "package_version": __version__,
        "subcommand": subcommand,
        "argv": argv,
        "resolved": resolved,
        "seed": seed,
        "outputs": outputs,
        "timings": {"wall_seconds": wall},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _stack_from_args(args) -> StackSpec:
    if args.stack:
        with open(args.stack, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict) or set(raw) - {"n_in", "layers"}:
            raise UsageError("stack file must be {n_in?, layers: [{kind, hidden}]}")
        layers = tuple((_cell_kind(e["kind"]), int(e["hidden"])) for e in raw["layers"])
        n_in = int(raw.get("n_in", args.n_in))
    else:
        layers = tuple((_cell_kind(args.cell), args.hidden) for _ in range(args.layers))
        n_in = args.n_in
    if args.input == "mnist":
        n_in = 1
    return StackSpec(n_in=n_in, layers=layers, t_max=args.steps)


def cmd_analyze(args, argv) -> int:
    t0 = time.time()
    kind = _cell_kind(args.cell)
    if args.hidden < 2 or args.trials < 1:
        raise UsageError("need --hidden >= 2 and --trials >= 1")
    report = fixed_point_report(kind, args.hidden, args.trials, Rng(args.seed))
    d = report.as_dict()
    print(f"fixed-point report: {kind.value} (n={args.hidden}, trials={args.trials})")
    print(f"  mean singular value of J : {d['mean_sv_J']:.6f}")
    print(f"  mean singular value of H : {d['mean_sv_H']:.6f}")
    print(f"  factor, uncorrelated     : {d['factor_uncorrelated']:.6f}")
    print(f"  factor, correlated       : {d['factor_correlated']:.6f}")
    out = _ensure_out(args.out)
    if args.csv:
        name = f"fixed_point_{kind.value}.csv"
        with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("kind,mean_sv_J,mean_sv_H,factor_uncorrelated,factor_correlated,trials\n")
            fh.write(f"{kind.value},{d['mean_sv_J']!r},{d['mean_sv_H']!r},"
                     f"{d['factor_uncorrelated']!r},{d['factor_correlated']!r},{args.trials}\n")
    else:
        name = f"fixed_point_{kind.value}.json"
        with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")
    resolved = {"cell": kind.value, "hidden": args.hidden, "trials": args.trials,
                "format": "csv" if args.csv else "json", "out": out}
    _write_manifest(out, "analyze", argv, resolved, args.seed, [name], time.time() - t0)
    return 0


def cmd_simulate(args, argv) -> int:
    t0 = time.time()
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    if not args.cell and not args.stack:
        raise UsageError("need --cell or --stack")
    spec = _stack_from_args(args)
    images = None
    if args.input == "mnist":
        images_path = args.images or _data_path("train-images-idx3-ubyte")
        labels_path = args.labels or _data_path("train-labels-idx1-ubyte")
        if not (images_path and labels_path and os.path.exists(images_path)
                and os.path.exists(labels_path)):
            raise UsageError("mnist input needs --images/--labels files "
                             "(or STARLAB_DATA_DIR)")
        data = load_mnist_idx(images_path, labels_path)
        if data.images.shape[1] != spec.t_max:
            raise UsageError(f"--steps must be {data.images.shape[1]} for these images")
        images = data.images
    cfg = SimConfig(
        stack=spec, runs=args.runs, loss_mode=LossMode(args.loss),
        input_kind=args.input, alpha=args.alpha, images=images, seed=args.seed,
        record_cosine=args.cosine, at_fixed_point=not args.full_forward,
        workers=args.workers,
    )
    gradient_field = simulate_gradient_field(cfg)
    out = _ensure_out(args.out)
    tag = "stack" if args.stack else args.cell.lower()
    outputs = [f"field_{tag}.csv"]
    gradient_field.to_csv(os.path.join(out, outputs[0]))
    if args.cosine:
        name = f"field_{tag}_cosine.csv"
        with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("layer,t,mean_path_cosine,runs\n")
            for l in range(gradient_field.n_layers):
                for t in range(gradient_field.steps):
                    runs = int(gradient_field.cos_runs[l, t])
                    val = repr(gradient_field.mean_cos[l, t]) if runs else ""
                    fh.write(f"{l + 1},{t + 1},{val},{runs}\n")
        outputs.append(name)
    if args.heatmap:
        name = f"field_{tag}.svg"
        title = f"mean parameter-gradient magnitude, {tag}, loss={args.loss}"
        with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
            fh.write(field_svg(gradient_field.mean_gp, title))
        outputs.append(name)
    from .analysis import layer_ratio
    print(f"simulated {args.runs} runs on {len(spec.layers)}x{spec.t_max} "
          f"({tag}); layer-1/layer-{len(spec.layers)} total-gradient ratio: "
          f"{layer_ratio(gradient_field):.4g}")
    resolved = {
        "cell": None if args.stack else args.cell.lower(), "stack": args.stack,
        "layers": len(spec.layers), "hidden": None if args.stack else args.hidden,
        "n_in": spec.n_in, "steps": spec.t_max, "runs": args.runs,
        "loss": args.loss, "input": args.input, "alpha": args.alpha,
        "images": args.images, "labels": args.labels,
        "full_forward": args.full_forward, "workers": args.workers,
        "heatmap": args.heatmap, "cosine": args.cosine, "out": out,
    }
    _write_manifest(out, "simulate", argv, resolved, args.seed, outputs, time.time() - t0)
    return 0


def _data_path(name: str) -> str | None:
    root = os.environ.get("STARLAB_DATA_DIR")
    return os.path.join(root, name) if root else None


def cmd_train(args, argv) -> int:
    t0 = time.time()
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    raw.setdefault("task", args.task)
    if raw["task"] != args.task:
        raise UsageError(f"--task {args.task} but config says {raw['task']!r}")
    if args.task in ("mnist", "pmnist"):
        raw.setdefault("images_path", _data_path("train-images-idx3-ubyte"))
        raw.setdefault("labels_path", _data_path("train-labels-idx1-ubyte"))
    cfg = config_from_dict(raw)

    out = _ensure_out(args.out)
    metrics_path = os.path.join(out, "metrics.jsonl")
    checkpoint_path = os.path.join(out, "checkpoint.bin")
    diverged = False
    final = None
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for record in train_run(cfg):
            if record.get("event") == "done":
                final = record
                fh.write(json.dumps({"event": "done", "steps": record["steps"]},
                                    sort_keys=True) + "\n")
                continue
            if record.get("event") == "divergence":
                diverged = True
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            if "eval" in record:
                print(f"step {record['step']}: eval {record['eval']}")
    outputs = ["metrics.jsonl"]
    if final is not None:
        head = final["head"]
        save_cells(checkpoint_path, final["lattice"].cells,
                   extras={"head_W": head.W, "head_b": head.b})
        outputs.append("checkpoint.bin")
    resolved = dict(raw)
    resolved["out"] = out
    _write_manifest(out, "train", argv, resolved, cfg.seed, outputs, time.time() - t0)
    if diverged:
        print("training diverged; see metrics.jsonl for the diagnostic record",
              file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args, argv) -> int:
    t0 = time.time()
    kind = _cell_kind(args.cell)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    worst = grad_check(kind, args.trials, args.eps, Rng(args.seed))
    ok = worst < GRADCHECK_PASS_BOUND
    print(f"gradcheck {kind.value}: max relative error {worst:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {GRADCHECK_PASS_BOUND:.0e})")
    out = _ensure_out(args.out)
    name = f"gradcheck_{kind.value}.json"
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        json.dump({"kind": kind.value, "trials": args.trials, "eps": args.eps,
                   "max_relative_error": worst, "passed": ok}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    resolved = {"cell": kind.value, "trials": args.trials, "eps": args.eps, "out": out}
    _write_manifest(out, "gradcheck", argv, resolved, args.seed, [name], time.time() - t0)
    return 0 if ok else 1


def cmd_rerun(args, argv) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    replay = list(manifest["argv"])
    if not replay:
        raise UsageError("manifest has no recorded argv")
    # strip the recorded output directory and substitute the new one
    cleaned = []
    skip = False
    for tok in replay:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        cleaned.append(tok)
    cleaned += ["--out", args.out]
    return main(cleaned)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="starlab",
        description="Gradient-propagation laboratory for deep stacked recurrent cells",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    cells = [k.value for k in CellKind]

    pa = sub.add_parser("analyze", help="fixed-point Jacobian spectra and scaling factors")
    pa.add_argument("--cell", required=True, metavar="KIND", help=f"one of {cells}")
    pa.add_argument("--hidden", type=int, default=128)
    pa.add_argument("--trials", type=int, default=50)
    pa.add_argument("--seed", type=int, default=0)
    fmt = pa.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", default=True)
    fmt.add_argument("--csv", action="store_true", default=False)
    pa.add_argument("--out", default="starlab-out/analyze")
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="Monte-Carlo gradient-magnitude field")
    ps.add_argument("--cell", metavar="KIND", help=f"one of {cells}")
    ps.add_argument("--stack", metavar="SPECFILE", help="JSON stack spec for hybrid stacks")
    ps.add_argument("--layers", type=int, default=12)
    ps.add_argument("--hidden", type=int, default=128)
    ps.add_argument("--n-in", type=int, default=128, dest="n_in")
    ps.add_argument("--steps", type=int, default=50)
    ps.add_argument("--runs", type=int, default=100)
    ps.add_argument("--loss", choices=[m.value for m in LossMode], default="final")
    ps.add_argument("--input", choices=["ar1", "mnist"], default="ar1")
    ps.add_argument("--alpha", type=float, default=0.5)
    ps.add_argument("--images", help="IDX image file (mnist input mode)")
    ps.add_argument("--labels", help="IDX label file (mnist input mode)")
    ps.add_argument("--heatmap", action="store_true")
    ps.add_argument("--cosine", action="store_true",
                    help="also record the J-path/H-path gradient cosine")
    ps.add_argument("--full-forward", action="store_true", dest="full_forward",
                    help="run the nonlinear forward instead of the zero-state evaluation")
    ps.add_argument("--workers", type=int, default=1)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", default="starlab-out/simulate")
    ps.set_defaults(func=cmd_simulate)

    pt = sub.add_parser("train", help="train a stack on a task")
    pt.add_argument("--task", required=True, choices=["adding", "copy", "mnist", "pmnist"])
    pt.add_argument("--config", required=True, metavar="FILE")
    pt.add_argument("--out", default="starlab-out/train")
    pt.set_defaults(func=cmd_train)

    pg = sub.add_parser("gradcheck", help="finite-difference check of a cell backward pass")
    pg.add_argument("--cell", required=True, metavar="KIND", help=f"one of {cells}")
    pg.add_argument("--trials", type=int, default=100)
    pg.add_argument("--eps", type=float, default=1e-5)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--out", default="starlab-out/gradcheck")
    pg.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("rerun", help="re-execute a run from its manifest")
    pr.add_argument("manifest", metavar="MANIFEST")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, IdxFormatError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"starlab: error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteGradientError, JacobiConvergenceError) as exc:
        print(f"starlab: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
