"""Long-format expression files and per-gene fit reports."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .exceptions import CosinorError
from .lmm import MixedFit, wald_test
from .phase_adjust import GeneMatrix

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("individual_id", "gene_id", "time_hours", "expression")
ICT_COLUMN = "ict_offset_hours"
REPORT_COLUMNS = (
    "gene_id",
    "status",
    "mu0",
    "beta1",
    "beta2",
    "amplitude",
    "phase",
    "tau",
    "p_value",
    "sigma2",
    "loglik",
    "iterations",
    "converged",
    "message",
)


class DataError(CosinorError):
    """Input file is unreadable or structurally inconsistent."""


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


@dataclass
class ExpressionData:
    matrix: Optional[GeneMatrix]
    ict_offsets: Optional[dict] = None
    dropped_rows: int = 0
    excluded_genes: dict = field(default_factory=dict)  # gene -> reason
    excluded_individuals: dict = field(default_factory=dict)


def read_expression_file(path, require_ict: bool = False) -> ExpressionData:
    """Parse a long-format CSV into a :class:`GeneMatrix`.

    Rows with missing expression are dropped; a gene that then lacks a value
    at any of an individual's sample times is excluded as a whole.  With
    ``require_ict``, individuals without an ``ict_offset_hours`` value are
    excluded.
    """
    try:
        df = pd.read_csv(
            path, dtype={"individual_id": str, "gene_id": str}, keep_default_na=True, float_precision="round_trip"
        )
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    try:
        df["time_hours"] = pd.to_numeric(df["time_hours"], errors="raise").astype(float)
        df["expression"] = pd.to_numeric(df["expression"], errors="coerce")
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric time_hours") from exc
    if not np.all(np.isfinite(df["time_hours"])):
        raise DataError(f"{path}: time_hours must be finite")

    ict = None
    excluded_ind = {}
    if ICT_COLUMN in df.columns:
        offsets = df.groupby("individual_id", sort=False)[ICT_COLUMN].first()
        ict = {i: float(v) for i, v in offsets.items() if pd.notna(v)}
        if require_ict:
            lost = [i for i in offsets.index if i not in ict]
            for i in lost:
                excluded_ind[i] = "missing ict_offset_hours"
            df = df[df["individual_id"].isin(list(ict))]
    elif require_ict:
        raise DataError(f"{path}: no {ICT_COLUMN} column")

    # the schedule of each individual is the multiset of its sample times
    df = df.copy()
    df["_dup"] = df.groupby(["individual_id", "gene_id", "time_hours"], sort=False).cumcount()
    grid = (
        df[["individual_id", "time_hours", "_dup"]]
        .drop_duplicates()
        .sort_values(["time_hours", "_dup"], kind="mergesort")
    )
    individuals = list(dict.fromkeys(df["individual_id"]))
    schedules = {i: g[["time_hours", "_dup"]].to_numpy() for i, g in grid.groupby("individual_id", sort=False)}

    n_missing = int(df["expression"].isna().sum())
    present = df[df["expression"].notna()]
    excluded = {}
    values = {}
    genes = list(dict.fromkeys(df["gene_id"]))
    by_gene = dict(tuple(present.groupby("gene_id", sort=False)))
    for gene in genes:
        rows = by_gene.get(gene)
        if rows is None:
            excluded[gene] = "all expression values missing"
            continue
        per_ind = []
        ok = True
        indexed = rows.set_index(["individual_id", "time_hours", "_dup"])["expression"]
        for ind in individuals:
            keys = [(ind, t, int(d)) for t, d in schedules[ind]]
            try:
                vals = indexed.loc[keys].to_numpy(dtype=float)
            except KeyError:
                ok = False
                break
            per_ind.append(vals)
        if not ok:
            excluded[gene] = "missing expression measurements"
            continue
        values[gene] = per_ind
    if n_missing:
        logger.info("dropped %d row(s) with missing expression", n_missing)
    matrix = None
    if values and individuals:
        times = [schedules[i][:, 0].astype(float) for i in individuals]
        matrix = GeneMatrix(individuals, times, values)
    return ExpressionData(matrix, ict, n_missing, excluded, excluded_ind)


def write_expression_file(matrix: GeneMatrix, path, ict_offsets: Optional[Mapping] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(REQUIRED_COLUMNS) + ([ICT_COLUMN] if ict_offsets is not None else [])
        writer.writerow(header)
        for gene, rows in matrix.values.items():
            for ind, t, y in zip(matrix.individual_ids, matrix.times, rows):
                for tj, yj in zip(t, y):
                    row = [ind, gene, fmt(float(tj)), fmt(float(yj))]
                    if ict_offsets is not None:
                        row.append(fmt(float(ict_offsets[ind])))
                    writer.writerow(row)


def report_row(gene, fit: Optional[MixedFit], message: str = "") -> dict:
    row = {c: "" for c in REPORT_COLUMNS}
    row["gene_id"] = gene
    if fit is None:
        row["status"] = "excluded"
        row["message"] = message
        return row
    wald = wald_test(fit)
    row.update(
        status="ok",
        mu0=fit.fixed.mu0,
        beta1=fit.fixed.beta1,
        beta2=fit.fixed.beta2,
        amplitude=fit.amplitude,
        phase=fit.phase,
        tau=wald.tau,
        p_value=wald.p_value,
        sigma2=fit.sigma2_hat,
        loglik=fit.loglik,
        iterations=fit.iterations,
        converged=int(fit.converged),
        message=message,
    )
    return row


def write_report(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: fmt(v) for k, v in row.items()})


def read_report(path) -> dict:
    """Per-gene rows with status ``ok``, numeric columns as floats."""
    try:
        df = pd.read_csv(path, dtype={"gene_id": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    if "gene_id" not in df.columns or "status" not in df.columns:
        raise DataError(f"{path} is not a fit report")
    out = {}
    for rec in df[df["status"] == "ok"].to_dict("records"):
        out[rec["gene_id"]] = {
            k: (float(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v)
            for k, v in rec.items()
        }
    return out


def write_translations(adjustment, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["individual_id", "d_tilde_hours"])
        for ind, d in zip(adjustment.individual_ids, adjustment.d_tilde):
            writer.writerow([ind, fmt(float(d))])


def write_rows(rows, path, delimiter=",") -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: fmt(v) for k, v in row.items()})


def is_finite_number(value) -> bool:
    return isinstance(value, float) and math.isfinite(value)
