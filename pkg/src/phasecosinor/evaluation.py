"""Through-origin regression of reference quantities on estimated ones.

The reference (response) is a per-gene quantity from fits on internal time;
the covariate is the same quantity from a framework that only saw clock
time.  A slope near one means the framework reproduces the reference.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DegenerateCovariate, EmptyAfterFilter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairedQuantities:
    x: np.ndarray
    y: np.ndarray
    gene_ids: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.shape != y.shape:
            raise ValueError("x and y differ in length")
        if x.size < 2:
            raise ValueError("need at least two pairs")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("paired quantities must be finite")
        ids = tuple(self.gene_ids) if len(self.gene_ids) else tuple(range(x.size))
        if len(ids) != x.size:
            raise ValueError("gene_ids do not match the number of pairs")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "gene_ids", ids)


def gamma_fit(pairs: PairedQuantities, centered_r2: bool = False) -> tuple[float, float]:
    """Slope and R^2 of ``y ~ gamma * x`` with no intercept.

    R^2 uses the uncentred total sum of squares unless ``centered_r2``.
    """
    x, y = pairs.x, pairs.y
    sxx = math.fsum(x * x)
    if not sxx > 0:
        raise DegenerateCovariate("covariate is identically zero")
    gamma = math.fsum(x * y) / sxx
    rss = math.fsum((y - gamma * x) ** 2)
    tss = math.fsum((y - y.mean()) ** 2) if centered_r2 else math.fsum(y * y)
    r2 = 1.0 - rss / tss if tss > 0 else (1.0 if rss == 0 else -math.inf)
    return gamma, r2


def gene_filter(quantities: Mapping[Hashable, object], gene_list: Iterable[Hashable]) -> dict:
    """Keep the genes named in ``gene_list``, preserving input order."""
    keep = set(gene_list)
    out = {g: v for g, v in quantities.items() if g in keep}
    if not out:
        raise EmptyAfterFilter("no gene survives the gold-standard filter")
    unknown = keep - set(quantities)
    if unknown:
        logger.warning("%d listed gene(s) not present in the table", len(unknown))
    return out


def read_gene_list(path) -> list[str]:
    """One gene id per line; blank lines and ``#`` comments are ignored."""
    genes = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            genes.append(line)
    return genes


def pair_tables(
    estimated: Mapping[Hashable, float], reference: Mapping[Hashable, float]
) -> PairedQuantities:
    """Align two per-gene tables on their shared ids (estimated -> x)."""
    shared = [g for g in estimated if g in reference]
    dropped = (len(estimated) - len(shared)) + (len(reference) - len(shared))
    if dropped:
        logger.warning("gene sets differ; using the %d shared genes", len(shared))
    return PairedQuantities(
        np.array([estimated[g] for g in shared]),
        np.array([reference[g] for g in shared]),
        tuple(shared),
    )


def scatter_rows(pairs: PairedQuantities, gamma: float) -> Sequence[dict]:
    return [
        {"gene_id": g, "x": float(x), "y": float(y), "fitted": gamma * float(x)}
        for g, x, y in zip(pairs.gene_ids, pairs.x, pairs.y)
    ]
