"""Command-line pipeline: ingest -> preprocess -> build-graph -> train -> evaluate.

Exit codes: 0 success, 1 unexpected pipeline error, 2 input not found,
3 malformed input data, 4 invalid argument or config, 5 graph fingerprint
mismatch, 6 unknown sensor id.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import clustering, graph as graphmod, ingest, training
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    FingerprintMismatch,
    ImputationError,
    IngestError,
    PedflowError,
    UnknownSensorError,
)
from .model import Seq2SeqModel, load_checkpoint
from .var import VarFit, var_forecast_windows

EXIT_OK, EXIT_ERROR, EXIT_NOT_FOUND, EXIT_DATA, EXIT_ARGS, EXIT_FINGERPRINT, EXIT_SENSOR = range(7)
VAR_FORMAT = "pedflow.var/1"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _require(path, label="input"):
    if path is None:
        raise UsageError(f"missing {label} path")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{label} not found: {path}")
    return path


def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_medoid(path):
    return ingest.load_panel(_require(path, "medoid"))


def _graph_for(panel, cfg: RunConfig):
    beta = cfg.train.effective_beta
    gcfg = replace(cfg.graph, beta=beta)
    medoid = None
    if beta > 0:
        medoid = _load_medoid(cfg.paths.medoid)
    return graphmod.build_graph(panel.sensors, medoid, gcfg)


# ------------------------------------------------------------------ commands

def cmd_ingest(args, cfg: RunConfig):
    section = cfg.ingest
    src = _require(args.input)
    meta = None
    if section.locations:
        meta = ingest.load_sensor_locations(_require(section.locations, "locations"))
    panel = ingest.ingest_csv(src, section.schema(), meta)
    if section.n_sensors:
        panel = ingest.select_sensors(panel, section.n_sensors)
    ingest.save_panel(panel, args.out)
    print(f"panel: {panel.shape[0]} hours x {panel.shape[1]} sensors, "
          f"{int(panel.missing_mask.sum())} missing cells -> {args.out}")


def cmd_preprocess(args, cfg: RunConfig):
    panel = ingest.load_panel(_require(args.panel, "panel"))
    if cfg.ingest.n_sensors and cfg.ingest.n_sensors < panel.shape[1]:
        panel = ingest.select_sensors(panel, cfg.ingest.n_sensors)
    panel = ingest.impute_missing(panel)
    result = clustering.remove_abnormal_weeks(panel, cfg.anomaly.build())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.save_panel(result.panel, out / "cleaned.csv")
    clustering.write_removal_report(result, out / "removed_weeks.csv")
    for i, week in enumerate(result.medoids):
        name = "medoid.csv" if i == 0 else f"medoid_{i}.csv"
        ingest.save_panel(clustering.medoid_panel(panel, week), out / name)
    sel = result.selection
    _write_json(out / "clustering.json", {
        "best_k": sel.best_k,
        "best_silhouette": {str(k): v for k, v in sel.best_scores.items()},
        "modal_frequency": sel.frequency,
        "runs": sel.runs,
        "medoid_weeks": [w.week_index for w in result.medoids],
        "weeks": len(result.weeks),
        "removed_weeks": [r.week_index for r in result.removed],
    })
    print(f"k={sel.best_k}, removed {len(result.removed)} of {len(result.weeks)} weeks; "
          f"{len(result.panel)} hours kept -> {out}")


def cmd_build_graph(args, cfg: RunConfig):
    panel = ingest.load_panel(_require(args.panel, "panel"))
    gcfg = cfg.graph
    medoid = _load_medoid(args.medoid or cfg.paths.medoid) if gcfg.beta > 0 else None
    graph = graphmod.build_graph(panel.sensors, medoid, gcfg)
    graphmod.save_graph(graph, args.out)
    print(f"graph: {graph.n} nodes, {int((graph.w > 0).sum())} nonzero weights, "
          f"beta={graph.beta} -> {args.out}")


def _prepare(cfg: RunConfig, panel_path):
    panel = ingest.load_panel(_require(panel_path, "panel"))
    if panel.missing_mask.any():
        panel = ingest.impute_missing(panel)
    t = cfg.train
    return panel, training.prepare_dataset(panel, cfg.split, t.l_in, t.l_out)


def _save_var(fit: VarFit, path, cfg: RunConfig, norm):
    _write_json(path, {
        "format": VAR_FORMAT,
        "order": fit.order,
        "coefs": [[[repr(float(v)) for v in row] for row in lag] for lag in fit.coefs],
        "intercept": [repr(float(v)) for v in fit.intercept],
        "run": _portable(cfg),
        "norm": norm.to_dict(),
    })


def _load_any_checkpoint(path, graph=None):
    doc = json.loads(Path(_require(path, "checkpoint")).read_text(encoding="utf-8"))
    if doc.get("format") == VAR_FORMAT:
        coefs = np.array(doc["coefs"], dtype=float)
        intercept = np.array(doc["intercept"], dtype=float)
        n = intercept.size
        fit = VarFit(coefs, intercept, np.zeros((n, n)), np.zeros_like(coefs), 0)
        return fit, doc
    return load_checkpoint(path, graph)


def _run_dir(cfg: RunConfig, default=None):
    out = cfg.paths.out or default
    if out is None:
        raise UsageError("no output directory: pass --out or set paths.out")
    return Path(out)


def _portable(cfg: RunConfig):
    """Config stored inside checkpoints: independent of where the run was written."""
    doc = cfg.to_dict()
    doc["paths"]["out"] = None
    return doc


def cmd_train(args, cfg: RunConfig):
    out = _run_dir(cfg)
    panel, data = _prepare(cfg, cfg.paths.panel)
    graph = None
    if cfg.train.model in ("dcgru", "dcgru-dtw"):
        graph = _graph_for(panel, cfg)
        graphmod.save_graph(graph, out / "graph")
    outcome = training.run_single(data, cfg.train, graph, record_time=False)
    cfg.dump(out / "config.json")
    if cfg.train.model == "var":
        _save_var(outcome.model, out / "checkpoint.json", cfg, data.norm)
        (out / "train.log").write_text(
            json.dumps({"kind": "var", "order": outcome.model.order,
                        "val_loss": outcome.val_loss}, sort_keys=True) + "\n", encoding="utf-8")
    else:
        outcome.result.write_log(out / "train.log")
        outcome.model.save(out / "checkpoint.json", norm=data.norm.to_dict(),
                           extra={"run": _portable(cfg), "best_epoch": outcome.result.best_epoch})
    print(f"{cfg.train.model}: best validation loss {outcome.val_loss:.6f} -> {out}")


def cmd_grid(args, cfg: RunConfig):
    out = _run_dir(cfg, "grid_run")
    panel, data = _prepare(cfg, cfg.paths.panel)
    grid = cfg.grid or {k: list(v) for k, v in training.GRID.items()}
    if cfg.train.model != "dcgru-dtw":
        grid = {k: v for k, v in grid.items() if k != "beta"}
    base = cfg.train
    if args.check_grid:
        for c in training.expand_grid(base, grid):
            c.check_grid()
    cache = {}

    def graph_for(c):
        if c.model in ("var", "gru"):
            return None
        key = c.effective_beta
        if key not in cache:
            cache[key] = _graph_for(panel, replace(cfg, train=c))
        return cache[key]

    result = training.grid_search(data, base, grid, args.repeats, graph_for)
    cfg.dump(out / "config.json")
    result.to_csv(out / "grid.csv", cfg.train.l_out)
    best = result.best_row()
    if best is not None:
        best.test.to_csv(out / "best_test_metrics.csv")
        print(best.test.table())
    print(f"grid: {len(result.rows)} runs -> {out / 'grid.csv'}")


def _test_windows(cfg: RunConfig, panel_path):
    panel, data = _prepare(cfg, panel_path)
    return panel, data


def _run_config_of(doc):
    run = doc.get("run") or doc.get("extra", {}).get("run")
    from .config import config_from_dict

    return config_from_dict(run) if run else RunConfig()


def _load_for_eval(args):
    doc = json.loads(Path(_require(args.checkpoint, "checkpoint")).read_text(encoding="utf-8"))
    graph = None
    if doc.get("format") != VAR_FORMAT and doc["config"]["kind"] == "dcgru":
        gdir = Path(args.graph) if args.graph else Path(args.checkpoint).parent / "graph"
        graph = graphmod.load_graph(_require(gdir, "graph"))
    model, doc = _load_any_checkpoint(args.checkpoint, graph)
    return model, doc, _run_config_of(doc), ingest.NormStats.from_dict(doc["norm"])


def _predict(model, inputs, steps, norm):
    if isinstance(model, VarFit):
        return var_forecast_windows(model, inputs, steps)
    return norm.inverse(training.predict_windows(model, norm.transform(inputs), steps))


def cmd_evaluate(args, cfg_cli: RunConfig):
    model, doc, cfg, norm = _load_for_eval(args)
    panel, data = _test_windows(cfg, args.panel)
    steps = data.test.l_out
    horizons = args.horizons or steps
    if not 1 <= horizons <= steps:
        raise UsageError(f"--horizons must lie in [1, {steps}]")
    pred = _predict(model, data.test.inputs, steps, norm)[:, :horizons]
    report = training.compute_metrics(pred, data.test.targets[:, :horizons])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "metrics.csv"
    report.to_csv(out)
    print(report.table())


def cmd_forecast(args, cfg_cli: RunConfig):
    model, doc, cfg, norm = _load_for_eval(args)
    panel = ingest.load_panel(_require(args.panel, "panel"))
    if panel.missing_mask.any():
        panel = ingest.impute_missing(panel)
    t = cfg.train
    history = np.asarray(panel.values[-t.l_in:])[None]
    pred = _predict(model, history, t.l_out, norm)[0]
    stamps = panel.timestamps[-1] + np.arange(1, t.l_out + 1) * ingest.HOUR
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(["timestamp", *panel.sensor_ids])]
    for ts, row in zip(stamps, pred):
        lines.append(",".join([str(ts.astype("datetime64[m]")), *(repr(float(v)) for v in row)]))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"forecast for {t.l_out} hours after {panel.timestamps[-1]} -> {out}")


def cmd_export_plot(args, cfg_cli: RunConfig):
    model, doc, cfg, norm = _load_for_eval(args)
    panel = ingest.load_panel(_require(args.panel, "panel"))
    if panel.missing_mask.any():
        panel = ingest.impute_missing(panel)
    ids = panel.sensor_ids
    wanted = args.sensors or ids[:1]
    for sid in wanted:
        if sid not in ids:
            raise UnknownSensorError(f"unknown sensor id {sid!r}")
    l_in = cfg.train.l_in
    span = args.weeks * clustering.WEEK_HOURS
    first = max(l_in, len(panel) - span)
    rows = np.arange(first, len(panel))
    inputs = np.stack([panel.values[r - l_in:r] for r in rows])
    pred = _predict(model, inputs, 1, norm)[:, 0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in wanted:
        j = ids.index(sid)
        lines = ["timestamp,truth,prediction"]
        for r, p in zip(rows, pred[:, j]):
            lines.append(f"{panel.timestamps[r].astype('datetime64[m]')},"
                         f"{repr(float(panel.values[r, j]))},{repr(float(p))}")
        (out / f"{sid}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        _render_svg(panel.timestamps[rows], panel.values[rows, j], pred[:, j], sid,
                    out / f"{sid}.svg")
    print(f"exported {len(wanted)} sensor(s), {rows.size} hours -> {out}")


def _render_svg(stamps, truth, pred, title, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pedflow"
    fig, ax = plt.subplots(figsize=(10, 3))
    x = np.arange(len(truth))
    ax.plot(x, truth, color="tab:blue", lw=1, label="truth")
    ax.plot(x, pred, color="tab:red", lw=1, label="1 h ahead")
    ax.set_title(f"{title} ({stamps[0]} .. {stamps[-1]})")
    ax.set_xlabel("hour")
    ax.set_ylabel("count")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ------------------------------------------------------------------- parser

def build_parser():
    parser = _Parser(prog="pedflow", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (flags override it)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("ingest", help="long-format count CSV -> panel")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", help="JSON column mapping (keys of the 'ingest' section)")
    p.add_argument("--locations", help="sensor location CSV (sensor_id,latitude,longitude,name)")
    p.add_argument("--n-sensors", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="impute and drop abnormal weeks")
    p.add_argument("--panel", required=True)
    p.add_argument("--k-range", type=_int_list)
    p.add_argument("--runs", type=int)
    p.add_argument("--q", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-sensors", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-graph", help="sensor adjacency and transition matrices")
    p.add_argument("--panel", required=True)
    p.add_argument("--medoid")
    p.add_argument("--kappa", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--raw-distances", action="store_true",
                   help="threshold raw distances instead of max-normalised ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("grid", cmd_grid, "grid search")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--panel")
        p.add_argument("--medoid")
        p.add_argument("--model", choices=training.MODEL_KINDS)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--hidden", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--k-max", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--l-in", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--kappa", type=float)
        p.add_argument("--out", help="run directory (default: paths.out from the config)")
        if name == "grid":
            p.add_argument("--repeats", type=int, default=3)
            p.add_argument("--check-grid", action="store_true",
                           help="reject configurations outside the declared grids")
        p.set_defaults(func=func)

    for name, func, helptext in (("evaluate", cmd_evaluate, "test-set metrics per horizon"),
                                 ("forecast", cmd_forecast, "forecast after the panel end"),
                                 ("export-plot", cmd_export_plot, "truth vs 1 h predictions")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--panel", required=True)
        p.add_argument("--graph", help="graph directory (default: next to the checkpoint)")
        if name == "evaluate":
            p.add_argument("--horizons", type=int)
            p.add_argument("--out")
        elif name == "forecast":
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--sensors", nargs="+")
            p.add_argument("--weeks", type=int, default=1)
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)
    return parser


def _apply_flags(cfg: RunConfig, args):
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if args.command == "ingest" and get("schema"):
        schema = json.loads(Path(_require(args.schema, "schema")).read_text(encoding="utf-8"))
        cfg = cfg.override("ingest", **schema)
    cfg = cfg.override("ingest", locations=get("locations"), n_sensors=get("n_sensors"))
    cfg = cfg.override("anomaly", k_range=get("k_range"), runs=get("runs"), q=get("q"),
                       seed=get("seed") if args.command == "preprocess" else None)
    cfg = cfg.override("graph", kappa=get("kappa"), beta=get("beta"),
                       normalize_distances=False if get("raw_distances") else None)
    if args.command in ("train", "grid"):
        cfg = cfg.override("train", model=get("model"), seed=get("seed"), epochs=get("epochs"),
                           hidden=get("hidden"), layers=get("layers"), k_max=get("k_max"),
                           beta=get("beta"), learning_rate=get("learning_rate"),
                           batch_size=get("batch_size"), l_in=get("l_in"), tau=get("tau"))
        cfg = cfg.override("paths", panel=get("panel"), medoid=get("medoid"), out=get("out"))
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_ARGS
    try:
        cfg = _apply_flags(load_config(args.config), args)
        args.func(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: input not found: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (IngestError, ImputationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except UnknownSensorError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_SENSOR
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except PedflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
