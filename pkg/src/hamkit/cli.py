"""Command-line entry point: ``hamkit <command> [flags]``.

Commands::

    synth    write a synthetic multivariate series to CSV
    train    fit a model with early stopping, checkpointing every epoch
    ham      compute causal/anticausal HAM curves for one checkpoint -> trace JSON
    areas    append proportionality lines and signed area curves to a trace
    diff     append the difference curve and equivariant point to a trace
    interp   build an interpolated area plot from two or more traces
    render   draw an SVG (ham, areas, diff, interp, layerwise)
    ingest   validate an external trace and report whether it is canonical
    export   write a trace's columns to CSV
    sweep    train at several batch sizes and collect per-epoch traces

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import pipeline as P
from . import svg
from . import trace as T
from .ham import MODES, NORM_KINDS, REDUCTIONS, HamConfig, full_gradient_norm
from .models import KINDS, ModelConfig
from .training import OptimizerConfig, load_run, save_run

log = logging.getLogger("hamkit")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# -- data / model flag groups ------------------------------------------------------------


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CSV series (optional date column, then one column per channel)")
    src.add_argument("--synth", help="synthetic series config JSON (as written by `synth --config-out`)")
    g.add_argument("--channel", help="keep only this channel (univariate run)")
    g.add_argument("--forward-fill", action="store_true", help="fill missing CSV cells from the previous row")
    g.add_argument("--split", type=_floats, default=(0.6, 0.2, 0.2), help="train,val,test fractions")
    g.add_argument("--lookback", type=int, required=True)
    g.add_argument("--horizon", type=int, required=True)
    g.add_argument("--stride", type=int, default=1)
    g.add_argument("--no-standardize", action="store_true")


def _data_spec(args) -> P.DataSpec:
    if len(args.split) != 3:
        raise D.DataError(f"--split needs three fractions, got {len(args.split)}")
    synth_cfg = None
    if args.synth:
        synth_cfg = D.SynthConfig.from_dict(json.loads(Path(args.synth).read_text()))
    return P.DataSpec(
        window=D.WindowSpec(args.lookback, args.horizon, args.stride),
        csv_path=args.data,
        synth=synth_cfg,
        forward_fill=args.forward_fill,
        channel=args.channel,
        split=D.SplitSpec(*args.split),
        standardize=not args.no_standardize,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--kind", choices=KINDS, default="nlinear")
    g.add_argument("--hidden", type=_ints, default=(), help="mlp hidden sizes, e.g. 64,64")
    g.add_argument("--dropout", type=float, default=0.0)
    g.add_argument("--cycle-length", type=int, help="queue length |Q| for the cycle model")
    g.add_argument("--no-normalize", action="store_true", help="nlinear ablation: skip last-value normalization")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--patience", type=int, default=3)
    g.add_argument("--batch-size", type=int, default=32, help="training batch size")
    g.add_argument("--extra-epochs", type=int, default=0, help="epochs to keep training after early stopping")
    g.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--decay", type=float, default=1.0, help="learning-rate factor applied after every epoch")
    g.add_argument("--l2", type=float, default=0.0, help="weight penalty (an unmaskable loss term)")
    g.add_argument("--seed", type=int, default=0)


def _model_config(args, channels: int) -> ModelConfig:
    return ModelConfig(args.kind, args.lookback, args.horizon, channels, tuple(args.hidden), args.dropout,
                       args.cycle_length, not args.no_normalize, args.seed)


def _train_spec(args, batch_size: int | None = None) -> P.TrainSpec:
    return P.TrainSpec(args.epochs, args.patience, batch_size or args.batch_size, args.extra_epochs, args.seed,
                       OptimizerConfig(args.optimizer, args.lr, decay=args.decay), args.l2)


def _add_ham_flags(p: argparse.ArgumentParser, batch_flag: str = "--batch-size") -> None:
    g = p.add_argument_group("HAM")
    g.add_argument(batch_flag, dest="ham_batch_size", type=int, default=4096,
                   help="batch size for averaging gradient norms (largest feasible is the usual choice)")
    g.add_argument("--norm", choices=NORM_KINDS, default="l2")
    g.add_argument("--reduction", choices=REDUCTIONS, default="mean")
    g.add_argument("--eval-mode", action="store_true", help="disable dropout while computing gradients")
    g.add_argument("--workers", type=int, default=1)


def _ham_config(args, seed: int) -> HamConfig:
    return HamConfig(args.ham_batch_size, args.norm, args.reduction, not args.eval_mode, seed, args.workers)


def _check_finite(trace: T.Trace) -> None:
    for mode, c in trace.curves.items():
        if not np.all(np.isfinite(c.overall)):
            raise FloatingPointError(f"non-finite gradient norms in the {mode} curve")


# -- commands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if len(args.amplitudes) not in (1, len(args.periods)):
        raise D.DataError("--amplitudes needs one value or one per period")
    amps = args.amplitudes * len(args.periods) if len(args.amplitudes) == 1 else args.amplitudes
    comps = tuple(
        tuple(D.SineComponent(p, a, c * args.phase_step) for p, a in zip(args.periods, amps))
        for c in range(args.channels)
    )
    cfg = D.SynthConfig(args.length, args.channels, comps, args.slope, args.noise, args.seed)
    D.save_csv(D.synth(cfg), args.out)
    if args.config_out:
        _write(args.config_out, json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    log.info("wrote %d rows x %d channels to %s", args.length, args.channels, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _data_spec(args)
    prepared = P.prepare(spec)
    tspec = _train_spec(args)
    run = P.train(_model_config(args, prepared.channels), prepared, tspec)
    save_run(run, args.out, {"data": spec.to_dict(), "train": tspec.to_dict()})
    print(f"trained {run.epochs} epochs; best {run.best_epoch}, stopped {run.stop_epoch}; "
          f"val mse {run.val_losses[run.best_epoch or run.epochs]:.6g} -> {args.out}")
    return EXIT_OK


def _resolve_epoch(run, which: str) -> int:
    if which == "best":
        return run.best_epoch if run.best_epoch is not None else run.epochs
    if which == "last":
        return run.epochs
    e = int(which)
    if not 0 <= e <= run.epochs:
        raise D.DataError(f"--epoch {e} outside 0..{run.epochs}")
    return e


def cmd_ham(args) -> int:
    run = load_run(args.run)
    spec = P.DataSpec.from_dict(run.meta["data"])
    prepared = P.prepare(spec)
    epoch = _resolve_epoch(run, args.epoch)
    tspec = run.meta.get("train", {})
    modes = MODES if args.mode == "both" else (args.mode,)
    trace = P.ham_trace(run.model_at(epoch), prepared, args.split, _ham_config(args, args.seed), args.naive, modes,
                        args.layerwise, epoch, args.id, spec.window, P.objective_for(tspec.get("l2", 0.0)))
    _check_finite(trace)
    _write(args.out, T.dumps(trace))
    return EXIT_OK


def _update_trace(args, fn) -> int:
    trace = T.read_trace(args.trace)
    fn(trace)
    _write(args.out or args.trace, T.dumps(trace))
    return EXIT_OK


def cmd_areas(args) -> int:
    return _update_trace(args, lambda t: T.add_areas(t, args.scope, args.layer))


def cmd_diff(args) -> int:
    def go(t):
        info = T.add_difference(t, args.layer)["equivariant"]
        if info["found"]:
            print(f"equivariant point t* = {info['t']:.6g}" + (" (multiple crossings)" if len(info["crossings"]) > 1 else ""))
        else:
            print("no equivariant point: the curves never meet")
    return _update_trace(args, go)


def cmd_interp(args) -> int:
    traces = [T.read_trace(p) for p in args.traces]
    doc = T.interpolated(traces, args.grid_size)
    _write(args.out, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_render(args) -> int:
    traces = [T.read_trace(p) for p in args.traces]
    _write(args.out, svg.render(args.kind, traces, args.layer, args.mode))
    return EXIT_OK


def cmd_ingest(args) -> int:
    text = Path(args.trace).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise T.TraceValidationError("$", f"invalid JSON: {exc}") from None
    trace = T.from_dict(doc)
    canonical = T.dumps(trace)
    same = canonical == text
    print(f"{args.trace}: valid trace, H={trace.horizon}, modes={sorted(trace.curves)}"
          + ("" if same else " (not in canonical form)"))
    if args.out:
        _write(args.out, canonical)
    return EXIT_OK


def cmd_export(args) -> int:
    _write(args.out, T.export_csv(T.read_trace(args.trace), args.layer))
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = _data_spec(args)
    prepared = P.prepare(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _ham_config(args, args.seed)

    def cell(bs: int) -> dict:
        tspec = _train_spec(args, bs)
        run = P.train(_model_config(args, prepared.channels), prepared, tspec)
        cell_dir = out / f"bs_{bs}"
        cell_dir.mkdir(exist_ok=True)
        for e in range(run.epochs + 1):
            tr = P.ham_trace(run.model_at(e), prepared, "train", cfg, epoch=e, model_id=f"{args.kind}-bs{bs}",
                             window=spec.window, objective=P.objective_for(args.l2))
            _check_finite(tr)
            T.write_trace(tr, cell_dir / f"epoch_{e:03d}.json")
        conv = run.best_epoch if run.best_epoch is not None else run.epochs
        norm = full_gradient_norm(run.model_at(conv), prepared.windows["train"], cfg, P.objective_for(args.l2))
        return {"batch_size": bs, "converged_epoch": conv, "stop_epoch": run.stop_epoch, "epochs": run.epochs,
                "full_norm_avg": norm}

    with ThreadPoolExecutor(max_workers=max(1, args.cells)) as pool:
        rows = list(pool.map(cell, args.batch_sizes))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_size", "converged_epoch", "stop_epoch", "epochs", "full_norm_avg"])
        for r in rows:
            w.writerow([r["batch_size"], r["converged_epoch"], "" if r["stop_epoch"] is None else r["stop_epoch"],
                        r["epochs"], repr(float(r["full_norm_avg"]))])
    print(f"swept batch sizes {list(args.batch_sizes)} -> {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hamkit", description="Horizon activation maps for forecasting models.")
    p.add_argument("--version", action="version", version=f"hamkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic series")
    s.add_argument("--out", required=True)
    s.add_argument("--length", type=int, default=2000)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--periods", type=_floats, default=(24.0,))
    s.add_argument("--amplitudes", type=_floats, default=(1.0,))
    s.add_argument("--phase-step", type=float, default=0.5, help="phase offset between consecutive channels")
    s.add_argument("--slope", type=float, default=0.0)
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config-out", help="also write the generator config as JSON")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model and checkpoint every epoch")
    _add_data_flags(s)
    _add_model_flags(s)
    _add_train_flags(s)
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("ham", help="HAM curves of one checkpoint")
    s.add_argument("--run", required=True, help="run directory written by `train`")
    s.add_argument("--epoch", default="best", help="epoch number, 'best' or 'last'")
    s.add_argument("--split", choices=P.SPLITS, default="train")
    s.add_argument("--mode", choices=("both",) + MODES, default="both")
    s.add_argument("--naive", action="store_true", help="one backward pass per cut (reference path)")
    s.add_argument("--layerwise", action="store_true", help="keep per-layer curves in the trace")
    s.add_argument("--id", help="model label stored in the trace")
    s.add_argument("--seed", type=int, default=0, help="dropout replay seed")
    _add_ham_flags(s)
    s.add_argument("--out", help="trace path (stdout when omitted)")
    s.set_defaults(fn=cmd_ham)

    s = sub.add_parser("areas", help="append area curves to a trace")
    s.add_argument("trace")
    s.add_argument("--scope", choices=("per-mode", "global"), default="per-mode",
                   help="peak of each line: its own curve's max, or the max over both modes")
    s.add_argument("--layer")
    s.add_argument("--out", help="output path (default: rewrite the input)")
    s.set_defaults(fn=cmd_areas)

    s = sub.add_parser("diff", help="append the difference curve to a trace")
    s.add_argument("trace")
    s.add_argument("--layer")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_diff)

    s = sub.add_parser("interp", help="interpolated area plot data from >= 2 traces")
    s.add_argument("traces", nargs="+")
    s.add_argument("--grid-size", type=int, default=201)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_interp)

    s = sub.add_parser("render", help="SVG chart")
    s.add_argument("traces", nargs="+")
    s.add_argument("--kind", choices=svg.PLOT_KINDS, default="ham")
    s.add_argument("--layer")
    s.add_argument("--mode", choices=MODES, default="causal", help="mode for layerwise plots")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("ingest", help="validate an external trace")
    s.add_argument("trace")
    s.add_argument("--out", help="write the canonical form here")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("export", help="trace columns as CSV")
    s.add_argument("trace")
    s.add_argument("--layer")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("sweep", help="train at several batch sizes")
    _add_data_flags(s)
    _add_model_flags(s)
    _add_train_flags(s)
    s.add_argument("--batch-sizes", type=_ints, default=(500, 2000, 4000))
    s.add_argument("--cells", type=int, default=1, help="batch-size cells trained in parallel")
    _add_ham_flags(s, "--ham-batch-size")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except FloatingPointError as exc:
        print(f"hamkit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (T.TraceValidationError, D.DataError, ValueError, KeyError, OSError) as exc:
        print(f"hamkit: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
