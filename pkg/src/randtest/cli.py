"""Command-line surface: CSV in, deterministic JSON report out.

Subcommands:

- analyze: estimate and randomization-test one statistic on a CSV dataset,
  optionally inverting the test into a confidence interval;
- permlm: the linear-model permutation schemes on the same data format;
- simulate: run a built-in or declarative scenario and report rejection
  rates with 20-bin p-value histograms.

Exit codes: 0 ok, 1 domain error (structured JSON error object on stdout),
2 usage error. Reports serialize floats with 17 significant digits so they
round-trip losslessly; a timestamp field is the only nondeterministic part.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import sys

import numpy as np

from . import __version__
from .designs import (
    ClusterDesign,
    CompleteDesign,
    DesignSpec,
    RerandomizedDesign,
    StratifiedDesign,
)
from .engine import frt_p_value, invert_ci, wald_ci
from .errors import InvariantViolation, ParseError, RandtestError
from .estimators import (
    Dataset,
    StatisticSpec,
    cluster_collapse,
    estimate,
    estimate_stratified,
)
from .permlm import PermLmSpec, perm_lm_p_value
from .simulate import (
    BUILTIN_SCENARIOS,
    builtin_scenario,
    config_from_dict,
    config_to_dict,
    p_histogram,
    run_scenario,
)

_DESIGN_CHOICES = ("complete", "stratified", "cluster", "rem")


# -- JSON ---------------------------------------------------------------------


def _dump(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return format(x, ".17g")
        # JSON has no non-finite numbers; sentinel statistics become strings.
        return '"inf"' if x > 0 else ('"-inf"' if x < 0 else '"nan"')
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        items = (json.dumps(str(k), ensure_ascii=False) + ":" + _dump(v) for k, v in obj.items())
        return "{" + ",".join(items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_dump(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def json_bytes(obj) -> bytes:
    """Deterministic UTF-8 JSON, newline-terminated."""
    return (_dump(obj) + "\n").encode("utf-8")


# -- CSV ----------------------------------------------------------------------


def load_csv(path: str) -> Dataset:
    """Dataset from a headed CSV with columns y, z, x1..xJ, stratum, cluster.

    Covariate columns must be numbered contiguously from x1. Cell errors
    report 1-based file row and the offending column name.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", row=0, column="") from None
        rows = [[cell.strip() for cell in row] for row in reader]

    index = {name: i for i, name in enumerate(header)}
    if len(index) != len(header):
        raise ParseError("duplicate column names in header", row=1, column="")
    for required in ("y", "z"):
        if required not in index:
            raise ParseError(f"missing required column {required!r}", row=1, column=required)
    x_names = sorted((n for n in index if n.startswith("x")), key=lambda n: (len(n), n))
    expected = [f"x{k}" for k in range(1, len(x_names) + 1)]
    if x_names != expected:
        raise ParseError(
            f"covariate columns must be x1..xJ contiguous, got {x_names}", row=1, column=""
        )
    known = {"y", "z", "stratum", "cluster", *expected}
    unknown = [n for n in header if n not in known]
    if unknown:
        raise ParseError(f"unrecognized columns {unknown}", row=1, column=unknown[0])

    n = len(rows)
    if n == 0:
        raise ParseError("no data rows", row=1, column="")

    def cell(row_idx: int, name: str) -> str:
        row = rows[row_idx]
        pos = index[name]
        if pos >= len(row) or row[pos] == "":
            raise ParseError("missing value", row=row_idx + 2, column=name)
        return row[pos]

    def real(row_idx: int, name: str) -> float:
        text = cell(row_idx, name)
        try:
            return float(text)
        except ValueError:
            raise ParseError(f"not a number: {text!r}", row=row_idx + 2, column=name) from None

    y = np.array([real(i, "y") for i in range(n)])
    z = np.empty(n, dtype=np.int64)
    for i in range(n):
        value = real(i, "z")
        if value not in (0.0, 1.0):
            raise ParseError(f"z must be 0 or 1, got {value!r}", row=i + 2, column="z")
        z[i] = int(value)
    x = None
    if expected:
        x = np.column_stack([[real(i, name) for i in range(n)] for name in expected])
    strata = np.array([cell(i, "stratum") for i in range(n)]) if "stratum" in index else None
    clusters = np.array([cell(i, "cluster") for i in range(n)]) if "cluster" in index else None
    return Dataset(y, z, x, strata=strata, clusters=clusters)


# -- report pieces -------------------------------------------------------------


def _describe_design(design: DesignSpec, rem_cols=None) -> dict:
    if isinstance(design, CompleteDesign):
        return {"kind": "complete", "n": design.n_units, "n1": design.n_treated}
    if isinstance(design, ClusterDesign):
        return {
            "kind": "cluster",
            "clusters": design.n_clusters,
            "treated_clusters": design.n_treated_clusters,
        }
    if isinstance(design, StratifiedDesign):
        return {"kind": "stratified", "sizes": [list(s) for s in design.sizes]}
    return {
        "kind": "rem",
        "n": design.base.n_units,
        "n1": design.base.n_treated,
        "threshold": design.threshold,
        "columns": rem_cols,
    }


def _replicate_histogram(replicates: np.ndarray) -> dict:
    finite = replicates[np.isfinite(replicates)]
    if finite.size:
        counts, edges = np.histogram(finite, bins=20)
    else:
        counts, edges = np.zeros(20, dtype=np.int64), np.linspace(0.0, 1.0, 21)
    return {
        "bin_edges": edges,
        "counts": counts,
        "nonfinite": int(replicates.size - finite.size),
    }


def _base_report(command: str) -> dict:
    return {
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "command": command,
    }


def _triple_dict(triple) -> dict:
    return {
        "tau_hat": triple.tau_hat,
        "se_classic": triple.se_classic,
        "se_robust": triple.se_robust,
    }


def _build_design(args, data: Dataset) -> tuple[DesignSpec, list[str] | None]:
    if args.design == "complete":
        return CompleteDesign(data.n, data.n1), None
    if args.design == "stratified":
        if data.strata is None:
            raise InvariantViolation("--design stratified needs a stratum column")
        return StratifiedDesign.from_observed(data.strata, data.z), None
    if args.design == "cluster":
        collapsed = cluster_collapse(data)
        return ClusterDesign(collapsed.n, collapsed.n1), None
    if args.rem_a is None:
        raise InvariantViolation("--design rem needs --rem-a")
    if data.j < 1:
        raise InvariantViolation("--design rem needs covariate columns")
    names = [f"x{k}" for k in range(1, data.j + 1)]
    if args.rem_cols:
        chosen = [c.strip() for c in args.rem_cols.split(",") if c.strip()]
        bad = [c for c in chosen if c not in names]
        if bad:
            raise InvariantViolation(f"--rem-cols names not in the data: {bad}")
        cols = [names.index(c) for c in chosen]
    else:
        chosen, cols = names, list(range(data.j))
    design = RerandomizedDesign(
        CompleteDesign(data.n, data.n1), float(args.rem_a), data.x[:, cols]
    )
    return design, chosen


def _analysis_triple(data: Dataset, adjustment: str, design: DesignSpec):
    if isinstance(design, ClusterDesign):
        return estimate(cluster_collapse(data), adjustment)
    if isinstance(design, StratifiedDesign):
        return estimate_stratified(data, adjustment)
    return estimate(data, adjustment)


# -- subcommands ----------------------------------------------------------------


def _cmd_analyze(args) -> dict:
    data = load_csv(args.data)
    spec = StatisticSpec(args.stat, args.student)
    design, rem_cols = _build_design(args, data)
    triple = _analysis_triple(data, spec.adjustment, design)
    result = frt_p_value(
        data, spec, design, r=args.reps, seed=args.seed, exact=args.exact, sided=args.sided
    )
    report = _base_report("analyze")
    report.update(
        {
            "data": {
                "path": args.data,
                "n": data.n,
                "n1": data.n1,
                "j": data.j,
                "strata": None if data.strata is None else int(data.strata.max()) + 1,
                "clusters": None if data.clusters is None else int(data.clusters.max()) + 1,
            },
            "spec": {"adjustment": spec.adjustment, "studentization": spec.studentization},
            "design": _describe_design(design, rem_cols),
            "seed": args.seed,
            "sided": args.sided,
            "mode": result.mode,
            "replicates": int(result.replicates.shape[0]),
            "t_obs": result.t_obs,
            "p_value": result.p_value,
            "mc_se": result.mc_se,
            "estimate": _triple_dict(triple),
            "replicate_histogram": _replicate_histogram(result.replicates),
        }
    )
    if args.ci:
        ci = invert_ci(
            data,
            spec,
            args.alpha,
            design,
            r=args.reps,
            seed=args.seed,
            exact=args.exact,
            sided=args.sided,
        )
        report["ci"] = {
            "lower": ci.lower,
            "upper": ci.upper,
            "alpha": ci.alpha,
            "grid": {"lo": ci.grid[0], "hi": ci.grid[1], "step": ci.grid[2]},
            "wald": list(ci.wald_init),
        }
    else:
        try:
            report["wald"] = list(wald_ci(triple, args.alpha))
        except RandtestError:
            report["wald"] = None
    return report


def _cmd_permlm(args) -> dict:
    data = load_csv(args.data)
    spec = PermLmSpec(args.scheme, args.student)
    result = perm_lm_p_value(data, spec, r=args.reps, seed=args.seed, sided=args.sided)
    report = _base_report("permlm")
    report.update(
        {
            "data": {"path": args.data, "n": data.n, "n1": data.n1, "j": data.j},
            "spec": {"scheme": spec.scheme, "studentization": spec.studentization},
            "seed": args.seed,
            "sided": args.sided,
            "mode": result.mode,
            "replicates": int(result.replicates.shape[0]),
            "t_obs": result.t_obs,
            "p_value": result.p_value,
            "mc_se": result.mc_se,
            "estimate": _triple_dict(estimate(data, "f")),
            "replicate_histogram": _replicate_histogram(result.replicates),
        }
    )
    return report


def _cmd_simulate(args) -> dict:
    if args.scenario in BUILTIN_SCENARIOS:
        cfg = builtin_scenario(args.scenario)
    else:
        try:
            with open(args.scenario, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad scenario config: {exc}", row=exc.lineno, column="") from None
        cfg = config_from_dict(raw)
    overrides = {}
    for name in ("reps", "permutations", "alpha"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if overrides:
        import dataclasses

        cfg = dataclasses.replace(cfg, **overrides)

    outcome = run_scenario(cfg)
    report = _base_report("simulate")
    report.update(
        {
            "scenario": config_to_dict(cfg),
            "reps": outcome.table.reps,
            "alpha": outcome.table.alpha,
            "rates": dict(zip(outcome.table.labels, outcome.table.rates)),
            "mc_se": dict(zip(outcome.table.labels, outcome.table.mc_se)),
            "p_histograms": {
                label: p_histogram(outcome.p_values[:, j])
                for j, label in enumerate(outcome.table.labels)
            },
        }
    )
    if args.full_p:
        report["p_values"] = outcome.p_values
    return report


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="randtest",
        description="Randomization tests for treatment effects, with covariate adjustment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="test one statistic on a CSV dataset")
    analyze.add_argument("data", help="CSV file with columns y, z, x1..xJ, stratum, cluster")
    analyze.add_argument("--stat", choices=("n", "r", "f", "l"), default="n")
    analyze.add_argument("--student", choices=("none", "classic", "robust"), default="robust")
    analyze.add_argument("--design", choices=_DESIGN_CHOICES, default="complete")
    analyze.add_argument("--rem-a", type=float, default=None, help="balance threshold")
    analyze.add_argument("--rem-cols", default=None, help="comma-separated covariate names")
    analyze.add_argument("--reps", type=int, default=1000)
    analyze.add_argument("--seed", type=int, default=0)
    analyze.add_argument("--exact", action="store_true", help="enumerate the assignment space")
    analyze.add_argument("--sided", choices=("one", "two"), default="two")
    analyze.add_argument("--ci", action="store_true", help="invert the test into an interval")
    analyze.add_argument("--alpha", type=float, default=0.05)
    analyze.set_defaults(func=_cmd_analyze)

    permlm = sub.add_parser("permlm", help="linear-model permutation tests")
    permlm.add_argument("data")
    permlm.add_argument("--scheme", choices=("fl", "kennedy", "terbraak", "manly"), default="fl")
    permlm.add_argument("--student", choices=("none", "classic", "robust"), default="none")
    permlm.add_argument("--reps", type=int, default=1000)
    permlm.add_argument("--seed", type=int, default=0)
    permlm.add_argument("--sided", choices=("one", "two"), default="two")
    permlm.set_defaults(func=_cmd_permlm)

    simulate = sub.add_parser("simulate", help="run a rejection-rate scenario")
    simulate.add_argument("scenario", help=f"built-in ({', '.join(BUILTIN_SCENARIOS)}) or JSON file")
    simulate.add_argument("--reps", type=int, default=None)
    simulate.add_argument("--permutations", type=int, default=None)
    simulate.add_argument("--alpha", type=float, default=None)
    simulate.add_argument("--full-p", action="store_true", help="include the raw p-value matrix")
    simulate.set_defaults(func=_cmd_simulate)
    return parser


def _error_payload(exc: Exception) -> dict:
    detail = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("row", "column", "tries", "acceptance_rate", "nearest", "max_p"):
        if hasattr(exc, attr):
            detail[attr] = getattr(exc, attr)
    return {"version": __version__, "error": detail}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", 0) < 0:
        parser.error("--seed must be non-negative")
    try:
        report = args.func(args)
    except (RandtestError, OSError) as exc:
        sys.stdout.buffer.write(json_bytes(_error_payload(exc)))
        sys.stdout.buffer.flush()
        return 1
    sys.stdout.buffer.write(json_bytes(report))
    sys.stdout.buffer.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
