"""``tripod`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Log verbosity comes from ``TRIPOD_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import dataio, metrics
from .config import Config, ConfigError, load_config, parse_override
from .dataio import DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("tripod")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> Config:
    overrides = dict(parse_override(s) for s in (args.set or []))
    return load_config(args.config, overrides)


def _samples(path):
    try:
        return dataio.read(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None


def _data_config(cfg: Config, header) -> Config:
    """Dimensions and timing follow the data file."""
    return cfg.replace(K=header.K, d=header.d, tau_o=header.tau_o, tau_f=header.tau_f or cfg.tau_f,
                       frame_interval_ms=header.frame_interval_ms, units=header.units)


def _write(path: Optional[str], text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    from .synth import generate
    cfg = _config(args)
    samples = generate(cfg)
    dataio.write(args.out, samples, dataio.header_for(samples, cfg.units))
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import load_checkpoint, metrics_log_csv, save_checkpoint, split_validation, train
    header, samples, _ = _samples(args.data)
    if args.resume:
        state, cfg = load_checkpoint(args.resume)
        if args.set:
            cfg = cfg.replace(**dict(parse_override(s) for s in args.set))
    else:
        cfg = _data_config(_config(args), header)
        state = None
    if args.val:
        _, val, _ = _samples(args.val)
        train_set = samples
    else:
        train_set, val = split_validation(samples, cfg.val_fraction)
    state = train(train_set, cfg, state=state, val=val, stop_after_epochs=args.stop_after_epochs)
    save_checkpoint(args.checkpoint, state, cfg)
    metrics_path = args.metrics or str(Path(args.checkpoint).with_suffix(".metrics.csv"))
    Path(metrics_path).write_text(metrics_log_csv(state.log, cfg.tau_f))
    if state.log:
        first, last = state.log[0]["loss_total"], state.log[-1]["loss_total"]
        print(f"epochs {state.next_epoch} steps {state.steps} loss {first:.6g} -> {last:.6g}")
    print(f"checkpoint {args.checkpoint}\nmetrics {metrics_path}")
    return EXIT_OK


def _load_model(path):
    from .training import load_checkpoint
    try:
        state, cfg = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    return state, cfg


def cmd_predict(args) -> int:
    from .decoder import rollout
    from .training import NumericalError
    state, cfg = _load_model(args.checkpoint)
    if args.set:
        cfg = cfg.replace(**dict(parse_override(s) for s in args.set))
    header, samples, _ = _samples(args.data)
    if (header.K, header.d) != (cfg.K, cfg.d):
        raise DataError(f"{args.data}: K={header.K}, d={header.d} but the checkpoint expects "
                        f"K={cfg.K}, d={cfg.d}")
    horizon = args.horizon or cfg.tau_f
    forecasts = []
    for s in samples:
        fc = rollout(s, state.params, cfg, horizon)
        if not (np.all(np.isfinite(fc.locations)) and np.all(np.isfinite(fc.visibility))):
            raise NumericalError(s.sample_id, "prediction")
        forecasts.append(fc)
    dataio.write_predictions(args.out, samples, forecasts, cfg.vis_threshold, header.units)
    print(f"wrote {len(forecasts)} forecasts ({horizon} frames) to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    preds = dataio.read_predictions(args.pred)
    _, truths, _ = _samples(args.truth)
    horizons = cfg.horizons_ms
    try:
        rep = metrics.report(preds, truths, cfg.beta, cfg.vis_threshold, horizons, filtered=args.filtered)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _write(args.out, rep.to_csv())
    for r in rep.rows:
        cells = [f"{name}={'-' if v is None else f'{v:.4f}'}"
                 for name, v in (("vim", r.vim), ("vam", r.vam), ("iou", r.iou), ("f1", r.f1))]
        label = f"{r.horizon_ms:g}ms" if r.horizon_ms is not None else f"frame {r.frame}"
        print(f"{label:>10} " + " ".join(cells), file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, injected_bug, run_suite
    cfg = _config(args)
    if args.inject_bug:
        with injected_bug():
            results = run_suite(cfg, args.tolerance, cfg.seed)
    else:
        results = run_suite(cfg, args.tolerance, cfg.seed)
    print(format_report(results))
    return EXIT_OK if all(r.report.passed for r in results) else EXIT_NUMERIC


INSPECT_COLUMNS = ("sample_id", "graph", "step", "row", "col", "row_node", "col_node", "weight")


def cmd_inspect(args) -> int:
    from .decoder import rollout
    from .interaction import AttentionLog
    state, cfg = _load_model(args.checkpoint)
    header, samples, _ = _samples(args.data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INSPECT_COLUMNS)
    for s in samples:
        att = AttentionLog()
        rollout(s, state.params, cfg, cfg.tau_f, log=att)
        persons = [p.person_id for p in s.persons]
        nodes = {"h2o": persons + [f"object{j}" for j in range(len(s.objects))],
                 "h2h": persons, "future_h2h": persons}
        for graph in ("h2o", "h2h", "future_h2h"):
            names = nodes[graph]
            for step, mat in enumerate(getattr(att, graph)):
                for i in range(mat.shape[0]):
                    for j in range(mat.shape[1]):
                        w.writerow([s.sample_id, graph, step, i, j, names[i], names[j], repr(float(mat[i, j]))])
    _write(args.out, buf.getvalue())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ABLATIONS, ablation, ablation_csv
    cfg = _config(args)
    variants = args.variants or list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation variant(s): {', '.join(unknown)}")
    _write(args.out, ablation_csv(ablation(cfg, variants)))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .experiments import benchmark
    cfg = _config(args)
    result, _ = benchmark(cfg)
    _write(args.out, result.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tripod", description="Multi-person pose forecasting with visibility.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, fn, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", help="preset name or JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("gen", cmd_gen, "generate a synthetic dataset")
    sp.add_argument("--out", required=True)

    sp = command("train", cmd_train, "train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True, help="checkpoint output path")
    sp.add_argument("--metrics", help="per-epoch metrics CSV (default: next to the checkpoint)")
    sp.add_argument("--val", help="validation sequence file")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--stop-after-epochs", type=int, dest="stop_after_epochs")

    sp = command("predict", cmd_predict, "forecast every sample of a sequence file", config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")

    sp = command("eval", cmd_eval, "score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--out", help="metric CSV path (default: standard output)")
    sp.add_argument("--filtered", action="store_true", help="IoU/F1 over persons with an invisible joint only")

    sp = command("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--inject-bug", action="store_true", dest="inject_bug", help=argparse.SUPPRESS)

    sp = command("inspect", cmd_inspect, "dump attention matrices as CSV", config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")

    sp = command("ablate", cmd_ablate, "train ablation variants and report final-horizon VIM")
    sp.add_argument("--variants", nargs="+")
    sp.add_argument("--out")

    sp = command("bench", cmd_bench, "model versus zero- and constant-velocity baselines")
    sp.add_argument("--out")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .training import NumericalError
    level = getattr(logging, os.environ.get("TRIPOD_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"tripod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"tripod: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"tripod: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"tripod: data error: {exc.filename}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, KeyError, ValueError) as exc:
        print(f"tripod: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
