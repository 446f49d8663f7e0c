"""``phasecosinor`` command line: simulate | fit | adjust | evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Set ``COSINOR_LOG`` (DEBUG, INFO, WARNING, ...) for diagnostics on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import simgen
from .evaluation import gamma_fit, gene_filter, pair_tables, read_gene_list, scatter_rows
from .exceptions import (
    CosinorError,
    DegenerateCovariate,
    EmptyAfterFilter,
    InsufficientData,
    NoUsableGenes,
    NotConvergedWarning,
)
from .io import (
    REPORT_COLUMNS,
    DataError,
    fmt,
    read_expression_file,
    read_report,
    report_row,
    write_expression_file,
    write_rows,
    write_translations,
)
from .lmm import EmConfig, em_fit
from .phase_adjust import AdjustConfig, run_adjustment

logger = logging.getLogger("phasecosinor")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (DataError, EmptyAfterFilter, InsufficientData, NoUsableGenes, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _em_flags(p):
    g = p.add_argument_group("EM")
    g.add_argument("--psi", choices=("full", "diagonal"), default="full", help="random-effect covariance structure")
    g.add_argument("--max-iter", type=int, default=500, help="EM iteration cap")
    g.add_argument("--tol", type=float, default=1e-8, help="convergence tolerance on the log-likelihood")
    g.add_argument("--no-accelerate", action="store_true", help="plain EM without SQUAREM extrapolation")


def _adjust_flags(p):
    p.add_argument("--step6-weights", choices=("text", "pseudocode"), default="text", help="gene weights when pooling offsets")
    p.add_argument("--degenerate-policy", choices=("cap", "exclude"), default="cap", help="handling of genes whose offsets agree exactly")
    p.add_argument("--realign", action="store_true", help="report refit phases on the untranslated scale")
    p.add_argument("--variance-form", choices=("tangential", "delta"), default="tangential", help="phase uncertainty used by the shrinkage weights")


def build_parser() -> argparse.ArgumentParser:
    hf = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="phasecosinor", description=__doc__.splitlines()[0], formatter_class=hf)
    parser.add_argument("--config", help="JSON file of defaults; flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="Monte Carlo campaign or synthetic panel", formatter_class=hf)
    p.add_argument("--setting", type=int, choices=range(1, 7), help="simulation setting (1-6)")
    p.add_argument("--theta1", type=float, default=None, help="override the preset population amplitude (0.3)")
    p.add_argument("--trials", type=int, default=2000, help="Monte Carlo trials")
    p.add_argument("--seed", type=int, default=0, help="campaign seed")
    p.add_argument("--frameworks", default="1,2,3", help="comma separated subset of 1,2,3")
    p.add_argument("--chunk", type=int, default=500, help="trials fitted per batch")
    p.add_argument("--export", help="also write trial 0 of the setting as an expression file")
    p.add_argument("--panel", type=int, default=0, help="write an N-gene panel with known offsets instead of a campaign")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    _em_flags(p)
    _adjust_flags(p)

    p = sub.add_parser("fit", help="per-gene mixed cosinor fits", formatter_class=hf)
    p.add_argument("input", help="long-format expression CSV")
    p.add_argument("--ict", action="store_true", help="shift times by ict_offset_hours before fitting")
    p.add_argument("--genes", help="restrict to the gene ids listed in this file")
    p.add_argument("--out", default="-", help="fit report ('-' for stdout)")
    _em_flags(p)

    p = sub.add_parser("adjust", help="estimate time translations and refit", formatter_class=hf)
    p.add_argument("input", help="long-format expression CSV")
    p.add_argument("--genes", help="restrict to the gene ids listed in this file")
    p.add_argument("--out", default="-", help="refit report ('-' for stdout)")
    p.add_argument("--translations", help="per-individual translation table (default: next to --out)")
    _em_flags(p)
    _adjust_flags(p)

    p = sub.add_parser("evaluate", help="no-intercept regression of a reference report on another", formatter_class=hf)
    p.add_argument("fits_a", help="report from the framework being assessed (covariate)")
    p.add_argument("fits_b", help="reference report (response)")
    p.add_argument("--genes", help="gold-standard gene list")
    p.add_argument("--centered-r2", action="store_true", help="use the centred total sum of squares")
    p.add_argument("--scatter", help="prefix for per-quantity scatter data files")
    p.add_argument("--out", default="-", help="gamma and R^2 table ('-' for stdout)")
    parser._subparsers_map = sub.choices
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` replace defaults but not flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sub = parser._subparsers_map[args.command]
        known = {a.dest: a for a in sub._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
        for k, v in cfg.items():
            act = known[k]
            if act.choices is not None and v not in act.choices:
                raise UsageError(f"config value {v!r} for {k} not in {list(act.choices)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def em_config(args) -> EmConfig:
    if args.max_iter < 0 or not args.tol > 0:
        raise UsageError("--max-iter must be >= 0 and --tol > 0")
    return EmConfig(
        max_iter=args.max_iter,
        tol=args.tol,
        psi_structure=args.psi,
        accelerate=not args.no_accelerate,
    )


def adjust_config(args) -> AdjustConfig:
    return AdjustConfig(
        em=em_config(args),
        step6_weights=args.step6_weights,
        degenerate_policy=args.degenerate_policy,
        realign=args.realign,
        variance_form=args.variance_form,
    )


def _emit(rows, path, columns=None):
    """Write dict rows as CSV to ``path`` or to stdout for ``-``."""
    rows = list(rows)
    columns = list(columns or (rows[0] if rows else []))
    if path in (None, "-"):
        _write_stream(rows, columns, sys.stdout)
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            _write_stream(rows, columns, fh)


def _write_stream(rows, columns, stream):
    if not columns:
        return
    w = csv.DictWriter(stream, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: fmt(r.get(k, "")) for k in columns})


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    if args.panel:
        if args.panel < 1:
            raise UsageError("--panel must be positive")
        panel = simgen.generate_panel(n_genes=args.panel, seed=args.seed)
        offsets = dict(zip(panel.data.individual_ids, panel.ict_offset_hours))
        if args.out in (None, "-"):
            raise UsageError("--panel needs --out")
        write_expression_file(panel.data, args.out, ict_offsets=offsets)
        return EXIT_OK
    if args.setting is None:
        raise UsageError("simulate needs --setting (1-6) or --panel")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    try:
        frameworks = [int(f) for f in str(args.frameworks).split(",") if f.strip()]
    except ValueError:
        raise UsageError("--frameworks must be a comma separated list") from None
    if not frameworks or not set(frameworks) <= {1, 2, 3}:
        raise UsageError("--frameworks must be drawn from 1,2,3")
    setting = simgen.get_setting(args.setting, theta1=args.theta1)
    if args.export:
        trial = simgen.generate_trial(setting, args.seed, 0)
        gm = trial.gene_matrix("offset", gene_id=f"setting{setting.id}")
        offsets = dict(zip(gm.individual_ids, trial.c2 / simgen.OMEGA))
        write_expression_file(gm, args.export, ict_offsets=offsets)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotConvergedWarning)
        table = simgen.run_campaign(
            setting,
            args.trials,
            frameworks=frameworks,
            seed=args.seed,
            em_config=em_config(args),
            adjust_config=adjust_config(args),
            chunk=max(1, args.chunk),
        )
    _emit(table.rows(), args.out)
    return EXIT_OK


def _load(path, genes=None, require_ict=False):
    data = read_expression_file(path, require_ict=require_ict)
    if data.dropped_rows:
        print(f"dropped {data.dropped_rows} row(s) with missing expression", file=sys.stderr)
    for ind, why in data.excluded_individuals.items():
        print(f"individual {ind} excluded: {why}", file=sys.stderr)
    matrix = data.matrix
    if matrix is not None and genes:
        keep = gene_filter({g: None for g in matrix.gene_ids}, read_gene_list(genes))
        matrix = matrix.subset(list(keep))
    return data, matrix


def fit_rows(matrix, config: EmConfig, shifts=None) -> list[dict]:
    rows = []
    for gene in matrix.gene_ids:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NotConvergedWarning)
            try:
                fit = em_fit(matrix.series(gene, shifts), config)
            except CosinorError as exc:
                row = report_row(gene, None, str(exc))
                row["status"] = "failed"
                rows.append(row)
                continue
        msg = "; ".join(str(w.message) for w in caught if issubclass(w.category, NotConvergedWarning))
        rows.append(report_row(gene, fit, msg))
    return rows


def cmd_fit(args) -> int:
    data, matrix = _load(args.input, args.genes, require_ict=args.ict)
    rows = []
    if matrix is not None:
        shifts = [data.ict_offsets[i] for i in matrix.individual_ids] if args.ict else None
        rows = fit_rows(matrix, em_config(args), shifts)
    rows += [report_row(g, None, why) for g, why in data.excluded_genes.items()]
    _emit(rows, args.out, REPORT_COLUMNS)
    n_ok = sum(r["status"] == "ok" for r in rows)
    if n_ok == 0:
        if any(r["status"] == "failed" for r in rows):
            print("no gene could be fitted", file=sys.stderr)
            return EXIT_NUMERIC
        print("no usable gene in the input", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_adjust(args) -> int:
    data, matrix = _load(args.input, args.genes)
    if matrix is None:
        raise NoUsableGenes("no usable gene in the input")
    result = run_adjustment(matrix, adjust_config(args))
    rows = []
    for g in matrix.gene_ids:
        fit = result.refits.get(g)
        if fit is None:
            row = report_row(g, None, result.failures.get(g, "refit failed"))
            row["status"] = "failed"
        else:
            row = report_row(g, fit, result.failures.get(g, ""))
        rows.append(row)
    rows += [report_row(g, None, why) for g, why in data.excluded_genes.items()]
    _emit(rows, args.out, REPORT_COLUMNS)

    target = args.translations
    if target is None and args.out not in (None, "-"):
        out = Path(args.out)
        target = str(out.with_name(out.stem + "_translations.csv"))
    if target is None:
        sys.stdout.write("\n")
        adj = result.adjustment
        _emit([{"individual_id": i, "d_tilde_hours": float(d)} for i, d in zip(adj.individual_ids, adj.d_tilde)], "-")
    else:
        write_translations(result.adjustment, target)
    return EXIT_OK if any(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def evaluate_reports(a: dict, b: dict, genes=None, centered_r2=False):
    """Per-quantity (gamma, R^2, pairs) for report ``b`` regressed on ``a``."""
    if genes is not None:
        a = gene_filter(a, genes)
        b = gene_filter(b, genes)
    out = {}
    for q in ("amplitude", "tau"):
        pairs = pair_tables({g: r[q] for g, r in a.items()}, {g: r[q] for g, r in b.items()})
        gamma, r2 = gamma_fit(pairs, centered_r2=centered_r2)
        out[q] = (gamma, r2, pairs)
    return out


def cmd_evaluate(args) -> int:
    a, b = read_report(args.fits_a), read_report(args.fits_b)
    genes = read_gene_list(args.genes) if args.genes else None
    res = evaluate_reports(a, b, genes, args.centered_r2)
    rows = [
        {"quantity": q, "n_genes": len(pairs.x), "gamma": gamma, "r2": r2}
        for q, (gamma, r2, pairs) in res.items()
    ]
    _emit(rows, args.out)
    if args.scatter:
        for q, (gamma, _, pairs) in res.items():
            write_rows(scatter_rows(pairs, gamma), f"{args.scatter}_{q}.csv")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "adjust": cmd_adjust, "evaluate": cmd_evaluate}


def _setup_logging():
    level = os.environ.get("COSINOR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CosinorError, ArithmeticError, DegenerateCovariate) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
