"""Command-line front end.

Subcommands: analyze (dataset -> report.json), simulate (scenario ->
metrics.csv + raw_replicates.csv, optionally tipping.csv), sensitivity
(report or inline analysis -> tipping.csv + sensitivity_grid.csv).

Exit codes: 0 success, 2 validation/configuration failure, 3 numerical
failure, 4 replication failure rate above tolerance. All error text
goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .config import (ConfigError, parse_analysis_config,
                     parse_scenario_config, parse_sensitivity_settings,
                     load_json)
from .data import DataValidationError
from .estimator import DomainError
from .nuisance import (NonconvergenceError, RankDeficiencyError,
                       SeparationError)
from .pipeline import (analyze_dataset, components_from_dict,
                       sensitivity_block)
from .simulation import (ReplicationFailureError, check_failure_rates,
                         run_replications, sensitivity_replication,
                         summarize_metrics)
from .variance import NumericalError

VALIDATION_EXIT = 2
NUMERICAL_EXIT = 3
FAILURE_RATE_EXIT = 4

_ERROR_CLASSES = (
    # (exception, module label, exit code); order matters for subclasses
    (ConfigError, "config", VALIDATION_EXIT),
    (DataValidationError, "data", VALIDATION_EXIT),
    (ReplicationFailureError, "simulation", FAILURE_RATE_EXIT),
    (DomainError, "estimator", NUMERICAL_EXIT),
    (RankDeficiencyError, "nuisance", NUMERICAL_EXIT),
    (SeparationError, "nuisance", NUMERICAL_EXIT),
    (NonconvergenceError, "nuisance", NUMERICAL_EXIT),
    (NumericalError, "variance", NUMERICAL_EXIT),
    (np.linalg.LinAlgError, "variance", NUMERICAL_EXIT),
    (ValueError, "input", VALIDATION_EXIT),
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool) or isinstance(value, np.bool_):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return ""
        return repr(v)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in header])


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _outdir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_analyze(args) -> int:
    cfg = parse_analysis_config(load_json(args.config),
                                base_dir=os.path.dirname(os.path.abspath(args.config)))
    doc = analyze_dataset(cfg)
    out = _outdir(args)
    path = os.path.join(out, "report.json")
    _write_json(path, doc)
    est = doc["estimate"]
    print(f"wrote {path}")
    print(f"{est['estimator']} {est['scale']} estimate {est['effect']:.6g} "
          f"(se {est['se']:.6g}, {100 * est['level']:.0f}% CI "
          f"[{est['lower']:.6g}, {est['upper']:.6g}], df {est['df']})")
    return 0


_METRIC_COLUMNS = ("estimator", "m", "p_m", "sampling", "replicates",
                   "failures", "failure_rate", "bias", "ese", "ase", "cp",
                   "mc_se_bias", "mc_se_ese", "mc_se_ase", "mc_se_cp",
                   "status")

_RAW_COLUMNS = ("replicate", "estimator", "estimate", "se", "df", "lower",
                "upper", "covered", "failed", "error", "warning")


def cmd_simulate(args) -> int:
    doc = parse_scenario_config(load_json(args.scenario))
    scn = doc.scenario
    records, metrics = run_replications(scn, doc.seed, doc.replicates,
                                        doc.estimators, threads=args.threads,
                                        level=doc.level)
    out = _outdir(args)
    if doc.include_not_implemented_marker:
        metrics = list(metrics) + [{
            "estimator": "dr-aug-gee", "m": scn.m, "p_m": scn.p_m,
            "sampling": scn.sampling, "replicates": 0, "failures": 0,
            "failure_rate": 0.0, "status": "not_implemented",
        }]
    _write_csv(os.path.join(out, "metrics.csv"), _METRIC_COLUMNS, metrics)
    _write_csv(os.path.join(out, "raw_replicates.csv"), _RAW_COLUMNS, records)
    print(f"wrote {os.path.join(out, 'metrics.csv')}")
    print(f"wrote {os.path.join(out, 'raw_replicates.csv')}")

    if doc.sensitivity is not None:
        rows = sensitivity_replication(
            scn, doc.seed, doc.replicates, configs=doc.sensitivity["estimators"],
            delta_grid=doc.sensitivity["delta_grid"], level=doc.level,
            threads=args.threads)
        agg = _aggregate_tipping(rows, doc.sensitivity["delta_grid"],
                                 doc.sensitivity["estimators"], scn)
        _write_csv(os.path.join(out, "tipping.csv"),
                   ("estimator", "m", "p_m", "sampling", "delta",
                    "mean_tipping", "se_tipping", "replicates", "infinite"),
                   agg)
        print(f"wrote {os.path.join(out, 'tipping.csv')}")

    check_failure_rates(metrics[:len(doc.estimators)])
    return 0


def _aggregate_tipping(rows, delta_grid, configs, scn):
    agg = []
    for cfg in configs:
        sub = [r for r in rows if r["estimator"] == cfg.name and not r["failed"]]
        for dd in delta_grid:
            key = f"tipping_delta_{dd:g}"
            vals = np.array([r[key] for r in sub], dtype=float)
            finite = vals[np.isfinite(vals)]
            entry = {"estimator": cfg.name, "m": scn.m, "p_m": scn.p_m,
                     "sampling": scn.sampling, "delta": dd,
                     "replicates": len(finite),
                     "infinite": int(len(vals) - len(finite))}
            if len(finite) >= 2:
                entry["mean_tipping"] = float(finite.mean())
                entry["se_tipping"] = float(finite.std(ddof=1) / math.sqrt(len(finite)))
            agg.append(entry)
    return agg


_TIPPING_COLUMNS = ("delta", "gamma_tipping", "finite", "note")
_GRID_COLUMNS = ("delta_diff", "gamma1", "gamma0", "bias",
                 "corrected_estimate", "lower", "upper", "significant")


def cmd_sensitivity(args) -> int:
    doc = load_json(args.config) if args.config else {}
    report_path = args.report or doc.get("report")
    settings = parse_sensitivity_settings(doc.get("sensitivity"))
    if report_path is not None:
        report = load_json(report_path)
        block = _sensitivity_from_report(report, settings)
    else:
        inline = {k: v for k, v in doc.items() if k != "report"}
        if "data" not in inline:
            raise ConfigError(
                "sensitivity needs a prior report (--report) or inline "
                "analysis settings with a 'data' path")
        cfg = parse_analysis_config(
            inline, base_dir=os.path.dirname(os.path.abspath(args.config)))
        if cfg.scale != "difference":
            raise ConfigError("sensitivity analysis is defined on the "
                              f"difference scale; got scale '{cfg.scale}'")
        if cfg.sensitivity is None:
            cfg.sensitivity = settings
        analysis = analyze_dataset(cfg)
        block = analysis["sensitivity"]
    out = _outdir(args)
    tip_rows = [{"delta": t["delta"],
                 "gamma_tipping": (t["gamma_tipping"] if t["finite"]
                                   else float("inf")),
                 "finite": t["finite"], "note": t.get("note", "")}
                for t in block["tipping"]]
    _write_csv(os.path.join(out, "tipping.csv"), _TIPPING_COLUMNS, tip_rows)
    _write_csv(os.path.join(out, "sensitivity_grid.csv"), _GRID_COLUMNS,
               block["grid"])
    print(f"wrote {os.path.join(out, 'tipping.csv')}")
    print(f"wrote {os.path.join(out, 'sensitivity_grid.csv')}")
    return 0


def _sensitivity_from_report(report: dict, settings) -> dict:
    est = report.get("estimate")
    if not est:
        raise ConfigError("report document lacks an 'estimate' block")
    scale = est.get("scale", "difference")
    if scale != "difference":
        raise ConfigError("sensitivity analysis is defined on the "
                          f"difference scale; the report uses '{scale}'")
    comps_doc = (report.get("dataset", {}).get("bias_components")
                 or report.get("bias_components"))
    if not comps_doc:
        raise ConfigError("report document lacks bias components")
    comps = components_from_dict(comps_doc)
    effect = float(est["effect"])
    se = float(est["se"])
    df = est.get("df")
    level = float(est.get("level", 0.95))
    return sensitivity_block(effect, se, df, comps, settings, level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crtdr",
        description="Doubly robust cluster-average treatment effects "
                    "with missing data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analyze a trial dataset")
    p.add_argument("--config", required=True, help="analysis config JSON")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    p.add_argument("--scenario", required=True, help="scenario config JSON")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sensitivity", help="tipping-point sensitivity analysis")
    p.add_argument("--config", default=None, help="sensitivity config JSON")
    p.add_argument("--report", default=None, help="prior analysis report JSON")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_sensitivity)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(cls for cls, _, _ in _ERROR_CLASSES) as err:
        for cls, label, code in _ERROR_CLASSES:
            if isinstance(err, cls):
                print(f"error [{label}] {err}", file=sys.stderr)
                return code
    except OSError as err:
        print(f"error [io] {err}", file=sys.stderr)
        return VALIDATION_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
