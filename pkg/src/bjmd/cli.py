"""Command-line front end: ``bjmd synth|fit|eval|sweep|select``."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .core import BJMDError, ModelState
from .io import (
    FormatError,
    Manifest,
    SourceEntry,
    config_hash,
    dump_synth_spec,
    load_manifest,
    load_synth_spec,
    read_fit,
    write_json,
    write_matrix,
    write_rows,
    write_state,
    write_trace,
)

logger = logging.getLogger("bjmd")

SWEEP_COLUMNS = ["sigma3", "engine", "variant", "source", "auc", "seconds"]


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- synth --------------------------------------------------------------------

def cmd_synth(args):
    from .datagen import SynthSpec, gen_dataset

    if args.spec_file:
        spec = load_synth_spec(args.spec_file)
    else:
        spec = SynthSpec.small_scale() if args.preset == "small" else SynthSpec.large_scale()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    if args.sigma3 is not None:
        spec = spec.replace(sigmas=tuple(spec.sigmas[:-1]) + (args.sigma3,))
    out = _out_dir(args, "synth")
    ds = gen_dataset(spec)
    entries = []
    for c in range(spec.C):
        write_matrix(out / f"X_{c + 1}.csv", ds.data[c])
        write_matrix(out / f"H_true_{c + 1}.csv", ds.H_true[c])
        write_matrix(out / f"labels_{c + 1}.csv", ds.labels[c])
        entries.append(SourceEntry(f"source_{c + 1}", f"X_{c + 1}.csv", f"labels_{c + 1}.csv"))
    write_matrix(out / "W_true.csv", ds.W_true)
    Manifest(entries, spec.K, {"lambda": 1.0, "alpha0": 1.1, "a0": 1.0, "b0": 1.0},
             {"engine": "map"}, spec.seed).dump(out / "manifest.yaml")
    dump_synth_spec(spec, out / "spec.yaml")
    write_json(out / "provenance.json", {"generator": "bjmd.datagen", "version": __version__,
                                         "spec": spec.to_dict(), "seed": spec.seed, "M": spec.M})
    print(f"wrote {spec.C} sources of shape {spec.M}x{list(spec.N)} to {out}")
    return 0


# -- fit ----------------------------------------------------------------------

def _fit_outputs(out, run, engine, variant, data, names, make_plots):
    from .experiment import per_source_H, per_source_sigma2

    H = per_source_H(run.state, variant, data.N)
    s2 = per_source_sigma2(run.state, variant, data.C)
    state = ModelState(run.state.W, run.state.Z, H, s2)
    write_state(out, state, names)
    write_trace(out / "trace.csv", run.report.objective_trace, run.report.elapsed_trace)
    if make_plots:
        from .plotting import plot_trace

        extra = run.report.extra
        plot_trace(run.report.objective_trace, out / "trace.png", engine,
                   extra.get("h_change"), extra.get("check_iterations"))


def cmd_fit(args):
    from .experiment import fit_restarts

    manifest = load_manifest(args.manifest)
    engine = args.engine or manifest.engine
    data = manifest.load_data()
    hyper = manifest.hyperparams()
    cfg = manifest.solver_config(engine)
    seed = manifest.seed if args.seed is None else args.seed
    out = _out_dir(args, "fit")
    names = [s.name for s in manifest.sources]
    cfg_dict = {"engine": engine, "variant": args.variant, "hyper": manifest.hyper, "solver": cfg.__dict__,
                "K": manifest.K, "restarts": args.restarts, "keep_best": args.keep_best}
    report = {"engine": engine, "variant": args.variant, "seed": seed, "config_hash": config_hash(cfg_dict),
              "config": cfg_dict}
    fit_data = data.concatenated() if args.variant == "cat" else data
    try:
        best, runs = fit_restarts(fit_data, hyper, engine, cfg, args.restarts, args.keep_best, seed, args.threads)
    except (BJMDError, np.linalg.LinAlgError, FloatingPointError) as exc:
        report.update(converged=False, error=f"{type(exc).__name__}: {exc}")
        write_json(out / "report.json", report)
        logger.error("fit failed: %s", exc)
        return 1

    _fit_outputs(out, best[0], engine, args.variant, data, names, not args.no_plots)
    if len(best) > 1:
        for rank, run in enumerate(best, start=1):
            _fit_outputs(out / "runs" / f"rank_{rank:02d}", run, engine, args.variant, data, names, False)
    top = best[0].report
    report.update(
        converged=bool(top.converged), iterations=int(top.iterations), elapsed_seconds=float(top.elapsed_seconds),
        total_seconds=float(sum(r.report.elapsed_seconds for r in runs)),
        restarts=[{"seed": r.seed, "score": r.score, "iterations": r.report.iterations,
                   "converged": bool(r.report.converged)} for r in runs],
        kept=[r.seed for r in best],
    )
    write_json(out / "report.json", report)
    sig = np.sqrt(best[0].state.sigma2)
    print(f"{engine} fit: {top.iterations} iterations, converged={top.converged}, sigma={np.round(sig, 4).tolist()}")
    return 0


# -- eval ---------------------------------------------------------------------

def evaluate_fit_dir(fit_dir, labels):
    from .evaluation import cluster_metric

    H = read_fit(fit_dir, len(labels))[1]
    per_source = []
    for c, (h, lab) in enumerate(zip(H, labels)):
        m = cluster_metric(h, lab)
        per_source.append({"source": c + 1, "r": m.r, "auc": round(100.0 * m.r, 2),
                           "r_k": [None if np.isnan(v) else round(100.0 * v, 2) for v in m.r_k],
                           "excluded_rows": m.excluded})
    return per_source


def cmd_eval(args):
    fit_dir = Path(args.fit_dir)
    if args.labels:
        from .io import read_matrix

        labels = [read_matrix(p).astype(int) for p in args.labels]
    elif args.manifest:
        labels = load_manifest(args.manifest).load_labels()
    else:
        raise FormatError("eval needs --manifest or --labels")
    metrics = {"fit_dir": str(fit_dir), "sources": evaluate_fit_dir(fit_dir, labels)}
    runs_dir = fit_dir / "runs"
    if runs_dir.is_dir():
        runs = sorted(p for p in runs_dir.iterdir() if p.is_dir())
        per_run = [evaluate_fit_dir(p, labels) for p in runs]
        mean_r = np.mean([[s["r"] for s in run] for run in per_run], axis=0)
        metrics["runs"] = [{"run": p.name, "auc": [s["auc"] for s in run]} for p, run in zip(runs, per_run)]
        metrics["mean_over_runs"] = {"r": mean_r.tolist(), "auc": [round(100.0 * v, 2) for v in mean_r]}
    out = Path(args.out) if args.out else fit_dir
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", metrics)
    print("AUC per source:", [s["auc"] for s in metrics["sources"]])
    return 0


# -- sweep --------------------------------------------------------------------

def cmd_sweep(args):
    from .datagen import SynthSpec
    from .core import SolverConfig
    from .experiment import DEFAULT_SIGMA3, run_sweep

    base = load_synth_spec(args.base_spec) if args.base_spec else SynthSpec.small_scale()
    if args.seed is not None:
        base = base.replace(seed=args.seed)
    out = _out_dir(args, "sweep")
    sigma3 = args.sigma3 or list(DEFAULT_SIGMA3)
    configs = {"map": SolverConfig(), "advi": SolverConfig.advi_defaults()}
    rows, failures = run_sweep(base, sigma3, args.engines, args.variants, configs=configs,
                               restarts=args.restarts, keep_best=args.keep_best, seed=base.seed,
                               workers=args.threads)
    write_rows(out / "summary.csv", rows, SWEEP_COLUMNS)
    write_json(out / "failures.json", failures)
    if rows and not args.no_plots:
        from .plotting import plot_sweep

        plot_sweep(rows, out / "auc_vs_sigma3.png")
    print(f"{len(rows)} rows written to {out / 'summary.csv'}; {len(failures)} failed cell(s)")
    return 1 if failures else 0


# -- select -------------------------------------------------------------------

def cmd_select(args):
    from .evaluation import select_features

    manifest = load_manifest(args.manifest)
    data = manifest.load_data()
    sigma2 = read_fit(args.fit_dir, data.C)[2]
    rep = select_features(data, sigma2, args.alpha, args.select_mode)
    out = _out_dir(args, "selected")
    write_json(out / "selection.json", rep.to_dict())
    if rep.selected.size == 0:
        warnings.warn("no feature passed the variance test; manifest left unchanged", RuntimeWarning)
        new = Manifest(
            [SourceEntry(s.name, str(manifest.resolve(s.matrix).resolve()),
                         None if s.labels is None else str(manifest.resolve(s.labels).resolve()))
             for s in manifest.sources],
            manifest.K, manifest.hyper, manifest.solver, manifest.seed)
        new.dump(out / "manifest.yaml")
        print("no features selected; original manifest copied")
        return 0
    entries = []
    for c, s in enumerate(manifest.sources):
        name = f"X_{c + 1}.csv"
        write_matrix(out / name, data[c][rep.selected])
        labels = None
        if s.labels is not None:
            labels = f"labels_{c + 1}.csv"
            shutil.copyfile(manifest.resolve(s.labels), out / labels)
        entries.append(SourceEntry(s.name, name, labels))
    Manifest(entries, manifest.K, manifest.hyper, manifest.solver, manifest.seed).dump(out / "manifest.yaml")
    np.savetxt(out / "selected_features.txt", rep.selected, fmt="%d")
    print(f"selected {rep.selected.size} of {data.M} features")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed from the generator spec or manifest")
    common.add_argument("--out", "-o", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for restarts and sweep cells")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="bjmd", description="Bayesian joint matrix decomposition toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-source dataset")
    p.add_argument("spec_file", nargs="?", help="YAML generator spec")
    p.add_argument("--preset", choices=["small", "large"], default="small")
    p.add_argument("--sigma3", type=float, default=None, help="override the last source's noise level")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="fit the model to the sources of a manifest")
    p.add_argument("manifest")
    p.add_argument("--engine", choices=["map", "advi"], default=None)
    p.add_argument("--variant", choices=["bjmd", "cat"], default="bjmd",
                   help="'cat' fits all sources merged column-wise with one noise level")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--keep-best", type=int, default=1)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", parents=[common], help="score a fit against label matrices")
    p.add_argument("fit_dir")
    p.add_argument("--manifest", default=None, help="take label files from this manifest")
    p.add_argument("--labels", nargs="+", default=None, help="label CSV per source")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="noise-level sweep over the last source")
    p.add_argument("base_spec", nargs="?", help="YAML generator spec (default: small-scale preset)")
    p.add_argument("--sigma3", type=float, nargs="+", default=None)
    p.add_argument("--engines", nargs="+", choices=["map", "advi"], default=["map"])
    p.add_argument("--variants", nargs="+", choices=["bjmd", "cat"], default=["bjmd", "cat"])
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--keep-best", type=int, default=5)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("select", parents=[common], help="keep features whose variance exceeds the fitted noise")
    p.add_argument("manifest")
    p.add_argument("fit_dir")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--select-mode", choices=["any", "all"], default="any")
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, BJMDError, OSError) as exc:
        print(f"bjmd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
