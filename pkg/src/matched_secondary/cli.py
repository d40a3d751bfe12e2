"""Command-line entry point: ``fit``, ``simulate`` and ``summarize``.

Exit codes: 0 success, 1 input error, 2 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import CONFIG_DIR_ENV, METHODS, AnalysisConfig, load_analysis_config, load_simulation_settings
from .estimation import FitOptions, fit
from .exceptions import ConvergenceError, InvalidInputError, MatchedSecondaryError
from .ingest import ingest_csv, read_dataset, write_dataset
from .naive import NAIVE_METHODS, fit_naive
from .profile import KnownRates
from .simulation import (
    COMPARISON_METHODS,
    ReplicateSummary,
    SimConfig,
    format_value,
    generate_population,
    read_records,
    replicate_rng,
    run_replicates,
    sample_matched_cc,
    summarize,
)

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE = 0, 1, 2
Z975 = 1.959963984540054
logger = logging.getLogger("matched_secondary")


def _methods(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in names if m not in METHODS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown method(s) {unknown}; choose from {', '.join(METHODS)}")
    return names


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _clean(obj):
    """Replace non-finite floats with the literal ``"NA"`` so reports are strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "NA"
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _dump_json(obj, fh):
    json.dump(_clean(json.loads(json.dumps(obj, default=_json_default))), fh, indent=2, sort_keys=False)
    fh.write("\n")


def _open_out(path):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


# ---------------------------------------------------------------- fit


def naive_block(data, method):
    res = fit_naive(data, method)
    names = [f"x{j}" for j in range(1, data.q + 1)]
    return {
        "method": method,
        "converged": bool(res.converged),
        "parameters": [
            {
                "name": n,
                "estimate": float(b),
                "se": float(s),
                "ci95": [float(b - Z975 * s), float(b + Z975 * s)],
            }
            for n, b, s in zip(names, res.coef, res.se)
        ],
    }


def proposed_block(data, method, rates, init):
    options = FitOptions(variant=method, init=init)
    res = fit(data, options, KnownRates(rates) if method == "PM2" else None)
    block = {"method": method}
    block.update(res.to_dict())
    block["converged"] = bool(res.converged and res.covariance_available)
    return block


def run_fit(data, methods, rates=None, init="naive-warm-start"):
    """Fit every requested method; returns the list of result blocks."""
    blocks = []
    for m in methods:
        try:
            if m in NAIVE_METHODS:
                blocks.append(naive_block(data, m))
            else:
                blocks.append(proposed_block(data, m, rates, init))
        except ConvergenceError as exc:
            blocks.append({"method": m, "converged": False, "message": str(exc)})
    return blocks


def _text_report(report):
    lines = [f"matched-secondary {report['version']}"]
    ing = report.get("ingestion")
    if ing:
        lines.append(f"rows read {ing['rows_read']}, dropped {ing['rows_dropped']}")
        for s in ing["strata"]:
            lines.append(f"  stratum {s['stratum']} [{s['label']}]: {s['cases']} cases, {s['controls']} controls")
    for b in report["results"]:
        lines.append("")
        lines.append(f"== {b['method']} (converged: {'yes' if b['converged'] else 'no'})")
        for p in b.get("parameters", []):
            lines.append(
                f"  {p['name']:<12} {format_value(p['estimate']):>14} se {format_value(p['se']):>12} "
                f"ci [{format_value(p['ci95'][0])}, {format_value(p['ci95'][1])}]"
            )
        if "loglik" in b:
            lines.append(f"  loglik {format_value(b['loglik'])}, iterations {b['iterations']}, max|grad| {b['grad_norm']:.3g}")
        if "stratum_rates" in b:
            lines.append("  stratum rates " + ", ".join(format_value(v) for v in b["stratum_rates"]))
        if b.get("message"):
            lines.append(f"  {b['message']}")
    return "\n".join(lines) + "\n"


def cmd_fit(args):
    if args.dataset:
        data = read_dataset(args.dataset)
        ingestion = None
        resolved = {"dataset": str(args.dataset)}
        methods = args.methods or list(METHODS if args.rates else [m for m in METHODS if m != "PM2"])
        rates = args.rates
        init = args.init or "naive-warm-start"
        fmt = args.format or "json"
    else:
        if not args.config:
            raise InvalidInputError("fit needs --config or --dataset")
        cfg = load_analysis_config(args.config)
        overrides = {}
        if args.methods:
            overrides["methods"] = tuple(args.methods)
        if args.rates:
            overrides["rates"] = tuple(args.rates)
        if args.init:
            overrides["init"] = args.init
        if args.format:
            overrides["format"] = args.format
        if args.output:
            overrides["output"] = args.output
        cfg = AnalysisConfig(**{**cfg.__dict__, **overrides})
        data, report = ingest_csv(cfg.input, cfg)
        ingestion = report.to_dict()
        resolved = cfg.to_dict()
        methods, rates, init, fmt = cfg.methods, cfg.rates, cfg.init, cfg.format
        args.output = cfg.output
    if "PM2" in methods:
        if rates is None:
            raise InvalidInputError(f"PM2 needs {data.K} known stratum disease rates (--rates)")
        if len(rates) != data.K:
            raise InvalidInputError(f"expected {data.K} stratum disease rates (one per stratum), got {len(rates)}")
    blocks = run_fit(data, methods, rates, init)
    report = {
        "tool": "matched-secondary",
        "version": __version__,
        "config": resolved,
        "ingestion": ingestion,
        "strata": [{"stratum": k + 1, "label": str(data.stratum_labels[k])} for k in range(data.K)],
        "results": blocks,
    }
    fh, close = _open_out(args.output)
    try:
        if fmt == "text":
            fh.write(_text_report(report))
        else:
            _dump_json(report, fh)
    finally:
        if close:
            fh.close()
    return EXIT_OK if all(b["converged"] for b in blocks) else EXIT_CONVERGENCE


# ---------------------------------------------------------------- simulate


def sim_config_from_args(args):
    values = load_simulation_settings(args.config) if args.config else {}
    cfg = SimConfig.from_dict(values)
    overrides = {}
    for attr, name in (
        ("n_pop", "n_pop"),
        ("n_cases", "n_cases"),
        ("n_controls", "n_controls"),
        ("replicates", "n_replicates"),
        ("seed", "seed"),
    ):
        v = getattr(args, attr)
        if v is not None:
            overrides[name] = v
    if args.rate is not None:
        overrides["disease_rate"] = args.rate
        overrides["gamma0"] = None
    return replace(cfg, **overrides) if overrides else cfg


def cmd_simulate(args):
    cfg = sim_config_from_args(args)
    methods = args.methods or list(COMPARISON_METHODS)
    population = generate_population(cfg)
    if args.dump_dataset:
        data = sample_matched_cc(population, cfg.n_cases, cfg.n_controls, replicate_rng(cfg, 0))
        with open(args.dump_dataset, "w", encoding="utf-8", newline="") as fh:
            write_dataset(data, fh)
    summary = run_replicates(cfg, methods, workers=args.workers, population=population)
    fh, close = _open_out(args.output)
    try:
        summary.to_csv(fh)
    finally:
        if close:
            fh.close()
    if args.replicates_out:
        with open(args.replicates_out, "w", encoding="utf-8", newline="") as fh:
            summary.records_to_csv(fh)
    report_path = args.report or (f"{args.output}.json" if args.output and args.output != "-" else None)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            _dump_json(
                {
                    "tool": "matched-secondary",
                    "version": __version__,
                    "config": cfg.to_dict(),
                    "methods": list(methods),
                    "gamma0": population.gamma0.tolist(),
                    "population_stratum_rates": population.stratum_rates.tolist(),
                    "truth": summary.truth,
                },
                fh,
            )
    if not args.quiet and args.output and args.output != "-":
        print(summary.table(), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- summarize


def cmd_summarize(args):
    with open(args.replicates, encoding="utf-8", newline="") as fh:
        records = read_records(fh)
    if not records:
        raise InvalidInputError(f"{args.replicates} holds no replicate records")
    truth = args.truth if args.truth is not None else SimConfig().beta1[0]
    methods = args.methods or list(dict.fromkeys(r.method for r in records))
    summary = ReplicateSummary(SimConfig(), truth, summarize(records, truth, methods), records)
    fh, close = _open_out(args.output)
    try:
        summary.to_csv(fh)
    finally:
        if close:
            fh.close()
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="matched-secondary",
        description="Secondary-outcome analysis of matched case-control data.",
        epilog=f"Relative config paths are also looked up in ${CONFIG_DIR_ENV}.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the selected methods to one dataset")
    p.add_argument("--config", help="analysis YAML (column mapping, derived variables, methods)")
    p.add_argument("--dataset", help="dataset CSV in the d,z,y,x1.. layout written by simulate --dump-dataset")
    p.add_argument("--methods", type=_methods, help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--rates", type=_floats, help="known stratum disease rates for PM2, comma-separated")
    p.add_argument("--init", choices=["naive-warm-start", "zeros"])
    p.add_argument("--format", choices=["json", "text"])
    p.add_argument("--output", "-o", help="report path (default stdout)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="Monte Carlo study of the matched case-control design")
    p.add_argument("--config", help="simulation YAML; flags below override it")
    p.add_argument("--rate", type=float, help="overall population disease rate")
    p.add_argument("--n-pop", type=int)
    p.add_argument("--n-cases", type=int)
    p.add_argument("--n-controls", type=int)
    p.add_argument("--replicates", "-R", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--methods", type=_methods, help="comma-separated; default the seven comparison methods")
    p.add_argument("--output", "-o", help="summary CSV path (default stdout)")
    p.add_argument("--replicates-out", help="per-replicate long-format CSV")
    p.add_argument("--dump-dataset", help="write the first replicate's dataset as CSV")
    p.add_argument("--report", help="run report JSON (default <output>.json)")
    p.add_argument("--quiet", "-q", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("summarize", help="aggregate a per-replicate CSV into the summary table")
    p.add_argument("replicates", help="CSV written by simulate --replicates-out")
    p.add_argument("--truth", type=float, help="true coefficient (default log 2)")
    p.add_argument("--methods", type=_methods)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except MatchedSecondaryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
