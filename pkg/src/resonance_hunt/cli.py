"""Command-line pipeline: generate, score, bump-hunt, evaluate, report.

Every subcommand records its configuration, seed, package version and
the digests of the files it read and wrote in ``manifest.json`` beside
its output.  Scoring stages read inputs through an unlabeled schema, so
truth labels never reach them; only ``supervised`` training and ``eval``
touch labels.

Exit codes: 1 configuration error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import bumphunt as bh
from . import cwola, datagen, density, evaluation, ingest, plotting
from .core import ConfigError, DataError, Dataset, Region, ResonanceHuntError, WindowSpec
from .folds import SCHEMES
from .spectrum import default_m_scale
from .windows import ScanPlan, make_window, plan_scan

log = logging.getLogger("resonance_hunt")


# ---------------------------------------------------------------- helpers


def _sha256(path) -> str:
    return datagen.file_digest(path)


def _write_json(obj, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _record(args, inputs, outputs, extra=None):
    """Merge this stage's entry into ``manifest.json`` next to the first output."""
    outputs = [str(p) for p in outputs if p]
    where = Path(outputs[0]).parent if outputs else Path(".")
    path = where / "manifest.json"
    manifest = {"version": __version__, "stages": {}}
    if path.exists():
        try:
            with open(path, encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, ValueError):
            pass
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest["version"] = __version__
    manifest.setdefault("stages", {})[args.command] = {
        "config": config,
        "seed": args.seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "outputs": {p: _sha256(p) for p in outputs if os.path.isfile(p)},
        **(extra or {}),
    }
    _write_json(manifest, path)


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _schema(args, d=None, labeled=False) -> ingest.ColumnSchema:
    if args.schema:
        schema = ingest.ColumnSchema.load(args.schema)
    elif d is not None:
        schema = ingest.default_schema(d, labeled=labeled)
    else:
        raise ConfigError("no schema given and feature count unknown")
    return schema if labeled else schema.unlabeled()


def _guess_d(path) -> int:
    """Feature count of a file written with the default schema."""
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}") from None
    return sum(1 for c in header if c.startswith("x") and c[1:].isdigit())


def _read_unlabeled(args, path) -> Dataset:
    d = None if args.schema else _guess_d(path)
    return ingest.read_csv(path, _schema(args, d, labeled=False))


def _read_labeled(args, path) -> Dataset:
    d = None if args.schema else _guess_d(path)
    return ingest.read_csv(path, _schema(args, d, labeled=True))


def _domain(args, ds: Dataset) -> tuple:
    if args.domain:
        dom = _floats(args.domain)
        if len(dom) != 2:
            raise ConfigError("--domain takes two numbers: m_min,m_max")
        return dom
    return (float(ds.m.min()), float(ds.m.max()))


def _plan(args, ds: Dataset) -> ScanPlan:
    dom = _domain(args, ds)
    if args.scan or args.step:
        return plan_scan(dom, args.delta, args.epsilon, args.step or args.delta)
    if args.m0 is None:
        raise ConfigError("give --m0 for a single window or --scan for a sliding scan")
    return ScanPlan.single(make_window(args.m0, args.delta, args.epsilon, dom))


def _classifier_cfg(args) -> cwola.ClassifierConfig:
    return cwola.ClassifierConfig(
        hidden=tuple(int(h) for h in _floats(args.hidden)) if args.hidden else (),
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        k_folds=args.k_folds,
        seed=args.seed,
    )


def _anode_cfg(args) -> density.AnodeConfig:
    if args.estimator == "hist":
        est = density.HistogramConfig(bins=args.bins, n_m_bins=args.n_m_bins)
    else:
        est = density.MixtureConfig(K=args.K, covariance=args.covariance, n_m_bins=max(2, args.n_m_bins), seed=args.seed)
    return density.AnodeConfig(estimator=est, k_folds=args.k_folds, seed=args.seed, scheme=args.scheme)


def _scorer(args):
    if args.method == "cwola":
        cfg = _classifier_cfg(args)
        return lambda ds, w: cwola.cwola_scores(ds, w, cfg, scheme=args.scheme)
    if args.method == "anode":
        cfg = _anode_cfg(args)
        return lambda ds, w: density.anode_scores(ds, w, cfg)
    raise ConfigError(f"unknown method {args.method!r}")


def _score_plan(args, ds: Dataset, plan: ScanPlan):
    """Score every window; windows whose scorer fails are skipped and reported."""
    score = _scorer(args)
    tables, failures = [], []
    for w in plan:
        try:
            t = score(ds, w)
        except DataError as exc:
            log.warning("window m0=%g skipped: %s", w.m0, exc)
            failures.append({"m0": w.m0, "q": None, "error": f"scoring failed: {exc}"})
            continue
        t.labels = None
        tables.append(t)
    if not tables:
        raise DataError("no window could be scored: " + "; ".join(f["error"] for f in failures))
    return tables, failures


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    cfg = _toy_config(args)
    ds = datagen.generate(cfg)
    ingest.write_csv(ds, args.out)
    _record(args, [], [args.out], {"toy": cfg.to_dict()})
    print(f"wrote {len(ds)} events ({ds.n_signal()} signal) to {args.out}")


def cmd_blackbox(args):
    cfg = _toy_config(args)
    key_path = args.key or str(datagen.default_key_path(args.out))
    key = datagen.emit_blackbox(cfg, args.out, key_path)
    labels_path = Path(key_path).with_name(Path(key_path).stem + ".labels.csv")
    _record(args, [], [args.out, key_path, str(labels_path)], {"toy": cfg.to_dict()})
    print(f"wrote {key.n_events} unlabeled events to {args.out}; key sealed in {key_path}")


def _toy_config(args) -> datagen.ToyConfig:
    overrides = {"seed": args.seed}
    if args.n_background is not None:
        overrides["n_background"] = args.n_background
    if args.n_signal is not None:
        overrides["n_signal"] = args.n_signal
    if args.signal_m0 is not None:
        overrides["signal_m0"] = args.signal_m0
    if args.difficulty:
        overrides["difficulty"] = args.difficulty
    return datagen.preset(args.preset, **overrides)


def _cmd_score(args):
    ds = _read_unlabeled(args, args.input)
    plan = _plan(args, ds)
    tables, failures = _score_plan(args, ds, plan)
    ingest.write_scores(tables, args.out, {"plan": plan.to_dict(), "method": args.method, "score_failures": failures})
    _record(args, [args.input, args.schema], [args.out, str(ingest.sidecar_path(args.out))])
    print(f"scored {len(ds)} events in {len(tables)} of {len(plan)} window(s) -> {args.out}")


def cmd_cwola(args):
    args.method = "cwola"
    _cmd_score(args)


def cmd_anode(args):
    args.method = "anode"
    _cmd_score(args)


def cmd_supervised(args):
    train = _read_labeled(args, args.train)
    ds = _read_unlabeled(args, args.input)
    plan = _plan(args, ds)
    cfg = _classifier_cfg(args)
    tables = []
    for w in plan:
        s = cwola.train_supervised(train, cfg, window=w if args.sr_only else None)
        tables.append(cwola.score(s, ds, w))
    ingest.write_scores(tables, args.out, {"plan": plan.to_dict(), "method": "supervised"})
    _record(args, [args.train, args.input, args.schema], [args.out])
    print(f"scored {len(ds)} events with the supervised baseline -> {args.out}")


def _plan_from_tables(tables) -> ScanPlan:
    if any(t.window is None for t in tables):
        raise DataError("score file has no window sidecar")
    return ScanPlan.from_windows([t.window for t in tables])


def _hunt(args, tables):
    plan = _plan_from_tables(tables)
    quantiles = _floats(args.quantiles)
    return bh.hunt_tables(tables, plan, quantiles, bin_width=args.bin_width,
                          mc_calibrate=args.mc_calibrate, seed=args.seed, threads=args.threads)


def _hunt_plots(tables, res, plots, bin_width=None):
    if res.best is None:
        return []
    row = res.best_row()
    table = tables[row.window_index]
    w = res.windows[row.window_index]
    keep = np.ones(len(table), dtype=bool) if row.threshold is None else (table.score > row.threshold) & table.hunt_mask()
    sb = table.sideband_mask() & keep
    m_sel = table.m[keep]
    m_scale = default_m_scale(max(float(t.m.max()) for t in tables))
    fit = bh.fit_background_shape(table.m[sb], bh.sideband_edges(w, bin_width), m_scale, exclude=w.sr)
    return [
        plotting.scan_figure(res, os.path.join(plots, "scan.svg")),
        plotting.fit_figure(m_sel, fit, w, os.path.join(plots, "background_fit.svg")),
    ]


def cmd_bump(args):
    tables = ingest.read_scores(args.scores)
    for t in tables:
        t.labels = None
    res = _hunt(args, tables)
    out = res.to_dict()
    try:
        out["signal_count"] = dict(zip(("estimate", "sigma"), bh.estimate_signal_count(res)))
    except DataError as exc:
        out["signal_count"] = {"error": str(exc)}
    _write_json(out, args.out)
    written = [args.out]
    if args.plots:
        written += _hunt_plots(tables, res, args.plots, args.bin_width)
    _record(args, [args.scores], written)
    print(f"min local p = {res.min_local_p:.3g}, global p = {res.global_p:.3g} -> {args.out}")


def _attach_labels(args, tables):
    if args.key:
        key = datagen.SealedKey.load(args.key)
        key.verify(args.data)
        labels = key.labels
    elif args.truth:
        labels = _read_labeled(args, args.truth).labels
    else:
        labels = tables[0].labels
    if labels is None:
        raise DataError("no truth labels: pass --key or --truth, or a labeled score file")
    for t in tables:
        if len(labels) != len(t):
            raise DataError(f"{len(labels)} labels for {len(t)} scored events")
        t.labels = np.asarray(labels)
    return tables


def _metrics(tables, fpr_floor):
    """Per-window metrics over signal-region events."""
    out, rocs, sics = [], {}, {}
    for k, t in enumerate(tables):
        sel = t.in_region(Region.SR) if t.window is not None else t
        if sel.hunt is not None:
            sel = sel.subset(sel.hunt)
        name = f"{t.meta.get('method', 'score')}[{k}]"
        try:
            c = evaluation.roc(sel)
            s = evaluation.sic_curve(c, fpr_floor)
        except DataError as exc:
            out.append({"window": None if t.window is None else t.window.to_dict(), "name": name, "error": str(exc)})
            continue
        out.append({"window": None if t.window is None else t.window.to_dict(), "name": name,
                    "auc": evaluation.auc(c), "max_sic": s.max_sic, "tpr_at_max_sic": s.tpr_at_max,
                    "fpr_floor": s.fpr_floor, "n_signal": c.n_signal, "n_background": c.n_background})
        rocs[name], sics[name] = c, s
    return out, rocs, sics


def _write_curves(rocs, sics, plots):
    files = []
    if not rocs:
        return files
    for name, c in rocs.items():
        safe = name.replace("[", "_").replace("]", "")
        p = os.path.join(plots, f"roc_{safe}.csv")
        os.makedirs(plots, exist_ok=True)
        pd.DataFrame({"threshold": c.thresholds, "tpr": c.tpr, "fpr": c.fpr}).to_csv(
            p, index=False, float_format=ingest.FLOAT_FORMAT, lineterminator="\n")
        files.append(p)
        s = sics[name]
        p = os.path.join(plots, f"sic_{safe}.csv")
        pd.DataFrame({"tpr": s.tpr, "fpr": s.fpr, "sic": s.sic}).to_csv(
            p, index=False, float_format=ingest.FLOAT_FORMAT, lineterminator="\n")
        files.append(p)
    files.append(plotting.roc_figure(rocs, os.path.join(plots, "roc.svg")))
    files.append(plotting.sic_figure(sics, os.path.join(plots, "sic.svg")))
    return files


def cmd_eval(args):
    tables = _attach_labels(args, ingest.read_scores(args.scores))
    rows, rocs, sics = _metrics(tables, args.fpr_floor)
    out = {"scores": args.scores, "region": "SR", "metrics": rows}
    if args.hunt and args.key:
        with open(args.hunt, encoding="utf-8") as fh:
            hunt = json.load(fh)
        out["key_comparison"] = _compare_json(hunt, datagen.SealedKey.load(args.key), args.data)
    _write_json(out, args.out)
    written = [args.out]
    if args.plots:
        written += _write_curves(rocs, sics, args.plots)
    _record(args, [args.scores, args.key, args.data, args.truth, args.hunt], written)
    for r in rows:
        print(f"{r['name']}: AUC {r['auc']:.4f}, max SIC {r['max_sic']:.2f} (floor {r['fpr_floor']:.2g})")


def _compare_json(hunt: dict, key, data_path):
    """Key comparison from a serialized hunt result."""
    key.verify(data_path)
    best = hunt.get("best")
    sc = hunt.get("signal_count", {})
    if best is None or "estimate" not in sc:
        raise DataError("hunt result has no valid best window")
    row = hunt["rows"][best]
    w = WindowSpec.from_dict(hunt["windows"][row["window_index"]])
    return {
        "estimate": sc["estimate"],
        "sigma": sc["sigma"],
        "truth": int(key.signal_count),
        "pull": (sc["estimate"] - key.signal_count) / sc["sigma"],
        "localized": w.contains_sr(key.m0),
        "best_m0": w.m0,
        "true_m0": key.m0,
        "global_p": hunt["global_p"],
    }


def cmd_report(args):
    """End-to-end: score a scan, hunt, and (with a key) evaluate."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _read_unlabeled(args, args.input)
    plan = _plan(args, ds)
    tables, failures = _score_plan(args, ds, plan)
    scores_path = out / "scores.csv"
    ingest.write_scores(tables, scores_path, {"plan": plan.to_dict(), "method": args.method, "score_failures": failures})
    res = bh.hunt_tables(tables, _plan_from_tables(tables), _floats(args.quantiles), bin_width=args.bin_width,
                         mc_calibrate=args.mc_calibrate, seed=args.seed, threads=args.threads)
    res.invalid.extend(failures)
    hunt = res.to_dict()
    estimate = None
    try:
        estimate = bh.estimate_signal_count(res)
        hunt["signal_count"] = {"estimate": estimate[0], "sigma": estimate[1]}
    except DataError as exc:
        hunt["signal_count"] = {"error": str(exc)}
    _write_json(hunt, out / "hunt.json")
    written = [str(scores_path), str(out / "hunt.json")]
    if args.plots:
        written += _hunt_plots(tables, res, str(out), args.bin_width)
    if args.key:
        key = datagen.SealedKey.load(args.key)
        key.verify(args.input)
        for t in tables:
            t.labels = key.labels
        rows, rocs, sics = _metrics(tables, args.fpr_floor)
        metrics = {"region": "SR", "metrics": rows}
        if estimate is not None:
            metrics["key_comparison"] = evaluation.compare_to_key(res, estimate, key, args.input)
        _write_json(metrics, out / "metrics.json")
        written.append(str(out / "metrics.json"))
        if args.plots:
            written += _write_curves(rocs, sics, str(out))
    _record(args, [args.input, args.schema, args.key], written)
    print(f"{len(plan)} windows, min local p = {res.min_local_p:.3g}, global p = {res.global_p:.3g} -> {out}")


# ---------------------------------------------------------------- parser


def _window_args(p):
    p.add_argument("--m0", type=float, help="window centre (single-window mode)")
    p.add_argument("--delta", type=float, default=0.1, help="SR half-width")
    p.add_argument("--epsilon", type=float, default=0.3, help="SS outer half-width")
    p.add_argument("--scan", action="store_true", help="slide windows across the domain (step delta)")
    p.add_argument("--scan-step", dest="step", type=float, help="scan mode with this m0 step")
    p.add_argument("--domain", help="m_min,m_max (default: data range)")


def _classifier_args(p):
    p.add_argument("--hidden", default="64,64", help="hidden layer widths")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--k-folds", type=int, default=5)
    _scheme_arg(p)


def _scheme_arg(p):
    if not any(a.dest == "scheme" for a in p._actions):
        p.add_argument("--scheme", choices=SCHEMES, default="holdout",
                       help="holdout: train on half, hunt the other half; kfold: score every event out-of-fold")


def _anode_args(p):
    p.add_argument("--estimator", choices=("hist", "gmm"), default="hist")
    p.add_argument("--bins", type=int, default=8, help="histogram cells per feature axis")
    p.add_argument("--K", type=int, default=4, help="mixture components")
    p.add_argument("--covariance", choices=("full", "diagonal"), default="full")
    p.add_argument("--n-m-bins", type=int, default=2, help="sideband m-bins per side")
    if not any(a.dest == "k_folds" for a in p._actions):
        p.add_argument("--k-folds", type=int, default=5)
    _scheme_arg(p)


def _hunt_args(p):
    p.add_argument("--quantiles", default="0.1,0.01,0.001")
    p.add_argument("--mc-calibrate", type=int, default=0, metavar="N", help="Monte Carlo replicas")
    p.add_argument("--bin-width", type=float, help="sideband histogram bin width (default: delta/2)")


def _toy_args(p):
    p.add_argument("--preset", choices=("default", "small", "null"), default="default")
    p.add_argument("--difficulty", choices=sorted(datagen.DIFFICULTY_SHIFTS))
    p.add_argument("--n-background", type=int)
    p.add_argument("--n-signal", type=int)
    p.add_argument("--signal-m0", type=float)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(top: bool):
        # subcommands repeat the flags without defaults so a value given
        # before the subcommand is not overwritten
        dflt = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=dflt(0))
        g.add_argument("--threads", type=int, default=dflt(1), help="cap on worker threads")
        g.add_argument("--schema", default=dflt(None), help="column schema JSON")
        g.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
        return g

    common = global_flags(top=False)
    parser = argparse.ArgumentParser(prog="resonance-hunt", description=__doc__.split("\n")[0], parents=[global_flags(top=True)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="labeled toy dataset")
    _toy_args(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("blackbox", parents=[common], help="unlabeled toy dataset plus sealed key")
    _toy_args(p)
    p.add_argument("--key", help="key path (default: <stem>.key.json)")
    p.set_defaults(func=cmd_blackbox)

    p = sub.add_parser("cwola", parents=[common], help="SR-vs-SS classifier scores")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _window_args(p)
    _classifier_args(p)
    p.set_defaults(func=cmd_cwola)

    p = sub.add_parser("anode", parents=[common], help="conditional density-ratio scores")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _window_args(p)
    _anode_args(p)
    p.set_defaults(func=cmd_anode)

    p = sub.add_parser("supervised", parents=[common], help="fully supervised baseline scores")
    p.add_argument("--train", required=True, help="labeled development sample")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sr-only", action="store_true", help="train on SR events only")
    _window_args(p)
    _classifier_args(p)
    p.set_defaults(func=cmd_supervised)

    p = sub.add_parser("bump", parents=[common], help="bump hunt on a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", help="directory for SVG figures")
    _hunt_args(p)
    p.set_defaults(func=cmd_bump)

    p = sub.add_parser("eval", parents=[common], help="ROC/AUC/SIC against truth labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", help="directory for curve CSVs and SVG figures")
    p.add_argument("--key", help="sealed key JSON supplying labels")
    p.add_argument("--data", help="data file the key is bound to (digest check)")
    p.add_argument("--truth", help="labeled CSV supplying labels")
    p.add_argument("--hunt", help="hunt.json for the key comparison")
    p.add_argument("--fpr-floor", type=float, help="default: 10 / n_background")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="scan, hunt and evaluate in one go")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--method", choices=("cwola", "anode"), default="anode")
    p.add_argument("--key", help="sealed key for evaluation")
    p.add_argument("--fpr-floor", type=float)
    p.add_argument("--no-plots", dest="plots", action="store_false")
    _window_args(p)
    _classifier_args(p)
    _anode_args(p)
    _hunt_args(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("resonance-hunt: error: --threads must be at least 1", file=sys.stderr)
        return ConfigError.exit_code
    try:
        args.func(args)
    except ResonanceHuntError as exc:
        print(f"resonance-hunt {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
