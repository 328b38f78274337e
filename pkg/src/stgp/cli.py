"""Command-line interface.

Commands: ``ingest``, ``synth``, ``train``, ``predict``, ``evaluate``,
``sweep-delta`` and ``export-kernel``. Options are resolved in the order
built-in defaults < ``--config`` file < command-line flags.

Panels are directories holding ``panel.csv`` and ``adjacency.csv``.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .baselines import BASELINES, baseline_predictor
from .data import (
    adjacency_csv,
    atomic_write_text,
    ingest,
    panel_csv,
    read_panel,
)
from .detect import (
    model_predictor,
    oracle_predictor,
    report_rows,
    rolling_evaluate,
)
from .errors import DataError, ModelFileError, NumericalError
from .kernel import gram_forward, mixture_weights, net_forward
from .synth import SynthConfig, synthesize
from .train import TrainConfig, forecast, load_model, refresh_posterior, train

log = logging.getLogger("stgp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

PANEL_FILE = "panel.csv"
ADJACENCY_FILE = "adjacency.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _write_all(files):
    """Write ``{path: text}`` only after every output has been produced."""
    for path, text in files.items():
        d = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(d):
            raise UsageError(f"output directory {d} does not exist")
    for path, text in files.items():
        atomic_write_text(path, text)


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _load_panel(path):
    if os.path.isdir(path):
        adj = os.path.join(path, ADJACENCY_FILE)
        return read_panel(os.path.join(path, PANEL_FILE), adj if os.path.exists(adj) else None)
    if not os.path.exists(path):
        raise DataError(f"panel {path} does not exist")
    return read_panel(path)


def _panel_files(panel, out):
    return {os.path.join(out, PANEL_FILE): panel_csv(panel),
            os.path.join(out, ADJACENCY_FILE): adjacency_csv(panel)}


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _train_config(args, cfg):
    opts = dict(cfg.get("train", {}))
    flags = {
        "delta": args.delta, "iterations": args.iterations, "batch_size": args.batch_size,
        "learning_rate": args.learning_rate, "natgrad_step": args.natgrad_step,
        "n_inducing": args.inducing, "n_components": args.components,
        "log_every": args.log_every,
        "hidden": None if args.hidden is None else [int(v) for v in _floats(args.hidden)],
    }
    opts.update({k: v for k, v in flags.items() if v is not None})
    opts["seed"] = args.seed
    try:
        return TrainConfig.from_dict(opts)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training options: {exc}") from exc


def _holdout_weeks(args, cfg, panel):
    if args.weeks:
        return sorted(set(int(w) for w in _floats(args.weeks)))
    H = args.holdout if args.holdout is not None else int(cfg.get("evaluate", {}).get("holdout", 10))
    if not 1 <= H < panel.T:
        raise UsageError(f"holdout must lie in [1, {panel.T - 1}], got {H}")
    return list(range(panel.T - H + 1, panel.T + 1))


def _trace_text(model):
    cfg = model.config
    lines = [f"# delta={cfg.delta!r} seed={cfg.seed} iterations={cfg.iterations}",
             "iteration,elbo_h,elbo_y,combined"]
    for it, eh, ey, c in model.trace:
        lines.append(f"{int(it)},{float(eh)!r},{float(ey)!r},{float(c)!r}")
    return "\n".join(lines) + "\n"


def _model_text(model):
    return json.dumps(model.to_dict(), sort_keys=True)


def _report_text(reports):
    with_model = len(reports) > 1 or reports[0].label != "stgp"
    lines = []
    for k, rep in enumerate(reports):
        header, rows = report_rows(rep, with_model)
        if k == 0:
            lines.append(",".join(header))
        lines.extend(",".join(r) for r in rows)
    return "\n".join(lines) + "\n"


def _json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(args, cfg):
    panel, report = ingest(args.cases, args.hotspots, args.centroids,
                           adjacency_path=args.adjacency, mobility_path=args.mobility,
                           week_origin=args.week_origin)
    out = _out_dir(args.out)
    files = _panel_files(panel, out)
    files[os.path.join(out, "ingest_report.json")] = _json(
        {"counties": panel.I, "weeks": panel.T, "warning_count": report.warning_count,
         **report.to_dict()})
    _write_all(files)
    print(f"panel: {panel.I} counties x {panel.T} weeks, {report.warning_count} warnings -> {out}")


def cmd_synth(args, cfg):
    opts = dict(cfg.get("synth", {}))
    for key in ("n_counties", "n_weeks", "latent_sd", "bandwidth_weeks", "spatial_length",
                "noise"):
        v = getattr(args, key)
        if v is not None:
            opts[key] = v
    opts["seed"] = args.seed
    try:
        sc = SynthConfig(**opts)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth options: {exc}") from exc
    try:
        res = synthesize(sc)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args.out)
    files = _panel_files(res.panel, out)
    truth = ["fips,week,f"]
    for i, f in enumerate(res.panel.fips):
        for t in range(res.panel.T):
            truth.append(f"{f},{t + 1},{float(res.f[i, t])!r}")
    files[os.path.join(out, "latent.csv")] = "\n".join(truth) + "\n"
    _write_all(files)
    print(f"synthetic panel: {res.panel.I} counties x {res.panel.T} weeks, "
          f"hotspot rate {res.panel.hotspots.mean():.3f} -> {out}")


def _train_weeks(args, panel):
    if args.train_weeks is not None:
        return args.train_weeks
    if args.holdout is not None:
        return panel.T - args.holdout
    return panel.T


def cmd_train(args, cfg):
    panel = _load_panel(args.panel)
    config = _train_config(args, cfg)
    model = train(panel, config, train_weeks=_train_weeks(args, panel))
    files = {args.model: _model_text(model)}
    if args.trace:
        files[args.trace] = _trace_text(model)
    _write_all(files)
    print(f"trained {config.iterations} iterations; final objective "
          f"{model.trace[-1, 3] if len(model.trace) else float('nan'):.6g} -> {args.model}")


def cmd_predict(args, cfg):
    panel = _load_panel(args.panel)
    model = load_model(args.model)
    weeks = sorted(set(int(w) for w in _floats(args.weeks)))
    if not weeks:
        raise UsageError("no weeks given")
    origin = weeks[0] - 1
    if origin > model.train_weeks and not args.no_refresh:
        model = refresh_posterior(model, panel, origin,
                                  steps=int(cfg.get("evaluate", {}).get("refresh_steps", 20)))
    fc = forecast(model, panel, weeks)
    lines = ["week,fips,prob,case_mean,case_lower,case_upper"]
    for k, w in enumerate(weeks):
        for i, f in enumerate(panel.fips):
            lines.append(f"{w},{f},{float(fc.prob[i, k])!r},{float(fc.mean[i, k])!r},"
                         f"{float(fc.lower[i, k])!r},{float(fc.upper[i, k])!r}")
    _write_all({args.out: "\n".join(lines) + "\n"})
    print(f"predicted {len(weeks)} week(s) for {panel.I} counties -> {args.out}")


def _evaluate(panel, model, weeks, cfg, label="stgp"):
    steps = int(cfg.get("evaluate", {}).get("refresh_steps", 20))
    return rolling_evaluate(model_predictor(model, panel, refresh_steps=steps), panel, weeks,
                            label=label, lag_depth=model.lag_depth)


def cmd_evaluate(args, cfg):
    panel = _load_panel(args.panel)
    weeks = _holdout_weeks(args, cfg, panel)
    reports = []
    if args.oracle:
        reports.append(rolling_evaluate(oracle_predictor(panel), panel, weeks, label="oracle"))
    elif args.model:
        model = load_model(args.model)
        reports.append(_evaluate(panel, model, weeks, cfg))
    kinds = []
    if args.baseline:
        kinds = list(BASELINES) if args.baseline == "all" else args.baseline.split(",")
        bad = [k for k in kinds if k not in BASELINES]
        if bad:
            raise UsageError(f"unknown baseline(s) {', '.join(bad)}; choose from "
                             f"{', '.join(BASELINES)} or all")
    for kind in kinds:
        reports.append(rolling_evaluate(baseline_predictor(panel, kind, seed=args.seed), panel,
                                        weeks, label=kind))
    if not reports:
        raise UsageError("evaluate needs --model, --oracle or --baseline")
    summary = dict(reports[0].summary())
    summary["model"] = reports[0].label
    if len(reports) > 1:
        summary["baselines" if reports[0].label in ("stgp", "oracle") else "others"] = {
            r.label: r.summary() for r in reports[1:]}
    out = _out_dir(args.out)
    _write_all({os.path.join(out, "report.csv"): _report_text(reports),
                os.path.join(out, "summary.json"): _json(summary)})
    print(" ".join(f"{r.label}: f1={r.f1:.3f}" for r in reports) + f" -> {out}")


def cmd_sweep_delta(args, cfg):
    deltas = _floats(args.deltas) if args.deltas is not None else \
        [float(d) for d in cfg.get("sweep", {}).get("deltas", [])]
    deltas = list(dict.fromkeys(deltas))
    if not deltas:
        raise UsageError("the delta list is empty")
    if any(d < 0 for d in deltas):
        raise UsageError("delta values must be non-negative")
    panel = _load_panel(args.panel)
    weeks = _holdout_weeks(args, cfg, panel)
    base = _train_config(args, cfg)
    rows = ["delta,f1,rmse"]
    for d in deltas:
        config = TrainConfig.from_dict({**base.to_dict(), "delta": d})
        model = train(panel, config, train_weeks=weeks[0] - 1)
        rep = _evaluate(panel, model, weeks, cfg)
        rows.append(f"{d!r},{rep.f1!r},{rep.rmse!r}")
        log.info("delta %g: f1 %.4f rmse %.4f", d, rep.f1, rep.rmse)
    _write_all({args.out: "\n".join(rows) + "\n"})
    print(f"swept {len(deltas)} delta value(s) -> {args.out}")


def kernel_grid(model, center, n, extent=None):
    """Spatial kernel ``sum_r g_r(c) g_r(s) u_r(c, s)`` between ``center`` and
    an ``n x n`` lon/lat grid, plus per-component focus vectors and weights."""
    sc = model.scaler
    if extent is None:
        lo = sc.center[1:] - sc.half_range[1:]
        hi = sc.center[1:] + sc.half_range[1:]
        extent = (lo[0], hi[0], lo[1], hi[1])
    lon = np.linspace(extent[0], extent[1], n)
    lat = np.linspace(extent[2], extent[3], n)
    LON, LAT = np.meshgrid(lon, lat, indexing="ij")
    pts = np.column_stack([LON.ravel(), LAT.ravel()])
    week = sc.center[0]
    raw = np.column_stack([np.full(len(pts), week), pts])
    c = np.array([[week, center[0], center[1]]])
    K, _ = gram_forward(model.kernel, sc.transform(c), sc.transform(raw))
    s = sc.transform(raw)[:, 1:]
    comps = []
    for net in model.kernel.nets:
        comps.append(net_forward(net, s))
    out = np.stack(comps, axis=1)  # (n*n, R, 3)
    w = mixture_weights(out[..., 2])
    return pts, K[0] / model.kernel.amplitude, out[..., :2], w


def cmd_export_kernel(args, cfg):
    model = load_model(args.model)
    center = _floats(args.center)
    if len(center) != 2:
        raise UsageError("--center must be LON,LAT")
    if args.grid < 1:
        raise UsageError("--grid must be >= 1")
    extent = None
    if args.extent:
        extent = _floats(args.extent)
        if len(extent) != 4:
            raise UsageError("--extent must be LON_MIN,LON_MAX,LAT_MIN,LAT_MAX")
    pts, values, psi, w = kernel_grid(model, center, args.grid, extent)
    pts = pts.tolist()
    kern = ["lon,lat,value"] + [f"{p[0]!r},{p[1]!r},{float(v)!r}" for p, v in zip(pts, values)]
    comp = ["component,lon,lat,psi_x,psi_y,w"]
    for r in range(psi.shape[1]):
        for p, ps, wr in zip(pts, psi[:, r], w[:, r]):
            comp.append(f"{r},{p[0]!r},{p[1]!r},{float(ps[0])!r},{float(ps[1])!r},{float(wr)!r}")
    out = _out_dir(args.out)
    _write_all({os.path.join(out, "kernel.csv"): "\n".join(kern) + "\n",
                os.path.join(out, "components.csv"): "\n".join(comp) + "\n"})
    print(f"exported a {args.grid}x{args.grid} kernel grid and {psi.shape[1]} components -> {out}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--delta", type=float, help="weight of the case objective")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--natgrad-step", type=float)
    p.add_argument("--inducing", type=int, help="number of inducing points")
    p.add_argument("--components", type=int, help="kernel components")
    p.add_argument("--hidden", help="hidden layer widths, e.g. 64,64,64")
    p.add_argument("--log-every", type=int)


def _global_flags(p, suppress):
    # subcommands repeat the global flags; SUPPRESS keeps their defaults from
    # overwriting values given before the command name
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="seed for all randomness")
    p.add_argument("--threads", type=int, default=d(None),
                   help="worker threads for linear algebra (default: all cores)")
    p.add_argument("--config", default=d(None), help="JSON config file")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser():
    common = _global_flags(_Parser(add_help=False), suppress=True)
    parser = _global_flags(_Parser(prog="stgp", description=__doc__.splitlines()[0]),
                           suppress=False)
    parser.add_argument("--version", action="version", version=f"stgp {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="build a weekly panel from raw CSVs")
    p.add_argument("--cases", required=True)
    p.add_argument("--hotspots", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--adjacency")
    p.add_argument("--mobility")
    p.add_argument("--week-origin", help="first Sunday (YYYY-MM-DD)")
    p.add_argument("--out", required=True, help="output panel directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="sample a synthetic panel")
    p.add_argument("--counties", dest="n_counties", type=int)
    p.add_argument("--weeks", dest="n_weeks", type=int)
    p.add_argument("--latent-sd", type=float)
    p.add_argument("--bandwidth-weeks", type=float)
    p.add_argument("--spatial-length", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--out", required=True, help="output panel directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="fit a model")
    p.add_argument("--panel", required=True)
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--trace", help="output trace CSV")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--train-weeks", type=int, help="train on weeks 1..N")
    g.add_argument("--holdout", type=int, help="leave out the last H weeks")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="forecast given weeks")
    p.add_argument("--panel", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--weeks", required=True, help="comma-separated 1-based weeks")
    p.add_argument("--no-refresh", action="store_true",
                   help="do not condition on weeks after the training window")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="rolling one-week-ahead evaluation")
    p.add_argument("--panel", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--model")
    g.add_argument("--oracle", action="store_true", help="use the true labels as probabilities")
    p.add_argument("--baseline", help="perceptron,logistic,knn or all")
    p.add_argument("--holdout", type=int, help="evaluate the last H weeks (default 10)")
    p.add_argument("--weeks", help="explicit comma-separated holdout weeks")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-delta", parents=[common], help="train and evaluate per delta")
    p.add_argument("--panel", required=True)
    p.add_argument("--deltas", help="comma-separated delta values")
    p.add_argument("--holdout", type=int)
    p.add_argument("--weeks", help="explicit comma-separated holdout weeks")
    p.add_argument("--out", required=True, help="output CSV")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_delta)

    p = sub.add_parser("export-kernel", parents=[common], help="export kernel grids")
    p.add_argument("--model", required=True)
    p.add_argument("--center", required=True, help="LON,LAT")
    p.add_argument("--grid", type=int, default=10, help="points per axis")
    p.add_argument("--extent", help="LON_MIN,LON_MAX,LAT_MIN,LAT_MAX")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_kernel)
    return parser


@contextlib.contextmanager
def _threads(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _read_config(args.config)
        with _threads(args.threads):
            args.func(args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"stgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFileError, FileNotFoundError) as exc:
        print(f"stgp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"stgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
