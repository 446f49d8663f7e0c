"""Two-stage time translation that removes phase-variation attenuation.

For every gene a population mixed model and per-individual OLS cosinor fits
are estimated.  Individual phases are shrunk toward the population phase
with inverse-variance weights, the resulting per-gene offsets are averaged
across genes (weighted by inverse circular variance), each individual's
sample times are shifted by that average, and the mixed model is refit.

The array core (:func:`adjust_arrays`) carries a leading batch axis so the
simulation harness can push thousands of independent trials through in one
call; :func:`run_adjustment` is the single-dataset entry point.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from . import circstat
from .core import (
    TWO_PI,
    CosinorParams,
    FitCovariance,
    LongitudinalSeries,
    wrap_angle,
    wrap_positive,
)
from .exceptions import (
    AdjustmentWarning,
    DegenerateAmplitude,
    NonPositiveVariance,
    NoUsableGenes,
    ResultantDegenerate,
    ZeroCircularVarianceWarning,
)
from .lmm import BatchFit, EmConfig, MixedFit, SuffStats, _fit_from_batch, em_batch, ols_batch

logger = logging.getLogger(__name__)

HOURS_PER_RADIAN = 12.0 / math.pi
WEIGHT_CAP = 1e6
RESULTANT_EPS = 1e-12


@dataclass(frozen=True)
class AdjustConfig:
    em: EmConfig = EmConfig()
    step6_weights: str = "text"
    degenerate_policy: str = "cap"
    realign: bool = False
    variance_form: str = "tangential"

    def __post_init__(self):
        if self.variance_form not in ("tangential", "delta"):
            raise ValueError("variance_form must be 'tangential' or 'delta'")
        if self.step6_weights not in ("text", "pseudocode"):
            raise ValueError("step6_weights must be 'text' or 'pseudocode'")
        if self.degenerate_policy not in ("cap", "exclude"):
            raise ValueError("degenerate_policy must be 'cap' or 'exclude'")


@dataclass
class GeneMatrix:
    """G genes read out on one sampling schedule shared by M individuals."""

    individual_ids: list
    times: list  # per individual, 1-D arrays
    values: dict  # gene id -> list of per-individual 1-D arrays

    def __post_init__(self):
        self.individual_ids = list(self.individual_ids)
        self.times = [np.asarray(t, dtype=float).ravel() for t in self.times]
        if len(self.times) != len(self.individual_ids):
            raise ValueError("one time vector per individual is required")
        for gene, rows in self.values.items():
            if len(rows) != len(self.times):
                raise ValueError(f"gene {gene!r} does not cover every individual")
            rows = [np.asarray(r, dtype=float).ravel() for r in rows]
            for t, r in zip(self.times, rows):
                if t.shape != r.shape:
                    raise ValueError(f"gene {gene!r}: values do not match the time grid")
            self.values[gene] = rows

    @property
    def gene_ids(self) -> list:
        return list(self.values)

    @property
    def M(self) -> int:
        return len(self.individual_ids)

    def series(self, gene: Hashable, shifts: Optional[Sequence[float]] = None) -> list:
        shifts = np.zeros(self.M) if shifts is None else shifts
        return [
            LongitudinalSeries(i, t + d, y)
            for i, t, d, y in zip(self.individual_ids, self.times, shifts, self.values[gene])
        ]

    def padded(self):
        """Arrays ``times (M, n)``, ``values (G, M, n)`` and ``mask (M, n)``."""
        n_max = max(t.size for t in self.times)
        times = np.zeros((self.M, n_max))
        mask = np.zeros((self.M, n_max), dtype=bool)
        values = np.zeros((len(self.values), self.M, n_max))
        for i, t in enumerate(self.times):
            times[i, : t.size] = t
            mask[i, : t.size] = True
        for g, rows in enumerate(self.values.values()):
            for i, r in enumerate(rows):
                values[g, i, : r.size] = r
        return times, values, mask

    def subset(self, genes: Sequence[Hashable]) -> "GeneMatrix":
        return GeneMatrix(self.individual_ids, self.times, {g: self.values[g] for g in genes})


@dataclass
class PhaseAdjustment:
    gene_ids: list
    individual_ids: list
    d_hat: np.ndarray  # (G, M) radians in [0, 2 pi); nan where unusable
    omega: np.ndarray  # (G,)
    d_tilde: np.ndarray  # (M,) hours
    excluded_genes: list = field(default_factory=list)  # (gene, reason)
    weights: Optional[np.ndarray] = None  # (G, M) shrinkage weights

    def translation(self, individual) -> float:
        return float(self.d_tilde[self.individual_ids.index(individual)])


# ---------------------------------------------------------------------------
# scalar operations


def shrinkage_weight(var_pop: float, var_ind: float) -> float:
    """Weight on the individual phase: (1/var_ind) / (1/var_pop + 1/var_ind)."""
    if not (var_pop > 0 and var_ind > 0) or not (math.isfinite(var_pop) and math.isfinite(var_ind)):
        raise NonPositiveVariance(f"variances must be finite and > 0 ({var_pop}, {var_ind})")
    return (1.0 / var_ind) / (1.0 / var_pop + 1.0 / var_ind)


def per_gene_offset(theta_pop: float, theta_ind: float, w: float) -> float:
    """Weighted circular mean of the two phases, minus theta_pop, in [0, 2 pi)."""
    s = w * math.sin(theta_ind) + (1.0 - w) * math.sin(theta_pop)
    c = w * math.cos(theta_ind) + (1.0 - w) * math.cos(theta_pop)
    if abs(s) < RESULTANT_EPS and abs(c) < RESULTANT_EPS:
        raise ResultantDegenerate("phases are antipodal with equal weight")
    return wrap_positive(math.atan2(s, c) - theta_pop)


def aggregate_translation(d_hat_row: Sequence[float], omegas: Sequence[float]) -> float:
    """Inverse-circular-variance weighted circular mean of offsets, in hours.

    Genes with ``1 - omega < 1e-6`` get their weight capped at 1e6.
    """
    d_hat_row = np.asarray(d_hat_row, dtype=float)
    omegas = np.asarray(omegas, dtype=float)
    if d_hat_row.size == 0:
        raise NoUsableGenes("no gene contributes to the translation")
    weights = _inverse_circular_variance(omegas)
    mean = circstat.circular_mean(circstat.AngleSample(d_hat_row, weights))
    return HOURS_PER_RADIAN * mean


def _inverse_circular_variance(omegas: np.ndarray) -> np.ndarray:
    cv = 1.0 - np.asarray(omegas, dtype=float)
    if np.any(cv < 1.0 / WEIGHT_CAP):
        warnings.warn(
            "circular variance below 1e-6; weight capped at 1e6",
            ZeroCircularVarianceWarning,
            stacklevel=3,
        )
    with np.errstate(divide="ignore"):
        return np.minimum(1.0 / np.maximum(cv, 0.0), WEIGHT_CAP)


def realign_population_phase(original: MixedFit, refit: MixedFit) -> MixedFit:
    """Rotate the refit's (beta1, beta2) so its phase matches ``original``.

    The covariance block is rotated with the coefficients, so amplitude and
    the Wald statistic are unchanged.
    """
    if original.fixed.phase_degenerate or refit.fixed.phase_degenerate:
        raise DegenerateAmplitude("cannot realign a zero-amplitude fit")
    delta = original.phase - refit.phase
    beta, cov = rotate_phase(refit.fixed.as_array(), refit.fixed_cov.sigma, delta)
    fixed = CosinorParams.from_array(beta)
    return MixedFit(
        fixed=fixed,
        psi_hat=refit.psi_hat,
        sigma2_hat=refit.sigma2_hat,
        fixed_cov=FitCovariance(cov),
        loglik=refit.loglik,
        iterations=refit.iterations,
        converged=refit.converged,
        phase_degenerate=fixed.phase_degenerate,
        loglik_trace=refit.loglik_trace,
    )


def rotate_phase(beta: np.ndarray, cov: np.ndarray, delta) -> tuple[np.ndarray, np.ndarray]:
    """Add ``delta`` to the phase of (mu0, beta1, beta2); vectorised over leading axes.

    With z = beta2 - i beta1 = amplitude * exp(i phase), the rotation is
    z -> z exp(i delta).
    """
    delta = np.asarray(delta, dtype=float)
    c, s = np.cos(delta), np.sin(delta)
    rot = np.zeros(delta.shape + (3, 3))
    rot[..., 0, 0] = 1.0
    rot[..., 1, 1] = c
    rot[..., 1, 2] = -s
    rot[..., 2, 1] = s
    rot[..., 2, 2] = c
    new_beta = np.einsum("...ab,...b->...a", rot, beta)
    new_cov = rot @ cov @ np.swapaxes(rot, -1, -2)
    return new_beta, 0.5 * (new_cov + np.swapaxes(new_cov, -1, -2))


# ---------------------------------------------------------------------------
# batched core


def _phase_and_variance(beta: np.ndarray, cov: np.ndarray, form: str = "tangential"):
    """Phase and its variance; nan where amplitude is zero.

    ``form="tangential"`` matches :func:`core.tangential_variance` and
    ``"delta"`` matches :func:`core.phase_variance`.
    """
    b1, b2 = beta[..., 1], beta[..., 2]
    r2 = b1 * b1 + b2 * b2
    ok = r2 > 0
    safe = np.where(ok, r2 * r2 if form == "delta" else r2, 1.0)
    var = (cov[..., 1, 1] * b2 * b2 + cov[..., 2, 2] * b1 * b1 - 2.0 * cov[..., 1, 2] * b1 * b2) / safe
    phase = wrap_angle(np.arctan2(-b1, b2))
    return np.where(ok, phase, np.nan), np.where(ok, np.maximum(var, 0.0), np.nan), ok


def _weights(var_pop: np.ndarray, var_ind: np.ndarray) -> np.ndarray:
    # vp / (vp + vi) equals the inverse-variance form and has the right limits at 0
    total = var_pop + var_ind
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(total > 0, var_pop / np.where(total > 0, total, 1.0), 0.5)
    return w


@dataclass
class BatchAdjustment:
    """Arrays from :func:`adjust_arrays`; shapes use B batch, G genes, M individuals."""

    step1: BatchFit  # flattened over (B, G)
    refit: BatchFit  # flattened over (B, G)
    theta_pop: np.ndarray  # (B, G)
    var_pop: np.ndarray
    theta_ind: np.ndarray  # (B, G, M)
    var_ind: np.ndarray
    weights: np.ndarray  # (B, G, M)
    d_hat: np.ndarray  # (B, G, M)
    usable: np.ndarray  # (B, G, M) contributes to step 6
    gene_ok: np.ndarray  # (B, G)
    gene_reason: np.ndarray  # (B, G) object
    omega: np.ndarray  # (B, G)
    d_tilde: np.ndarray  # (B, M)
    translation_ok: np.ndarray  # (B, M)


def adjust_arrays(
    times: np.ndarray,
    values: np.ndarray,
    mask: Optional[np.ndarray] = None,
    config: AdjustConfig = AdjustConfig(),
    step1: Optional[BatchFit] = None,
) -> BatchAdjustment:
    """Run all seven steps on padded arrays.

    ``times`` and ``mask`` have shape (B, M, n); ``values`` has shape
    (B, G, M, n).  ``step1`` may carry precomputed population fits
    (flattened over (B, G)) of the untranslated data.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    B, G, M, n = values.shape
    if mask is None:
        mask = np.ones(times.shape, dtype=bool)
    t_b = np.broadcast_to(times[:, None], values.shape)
    m_b = np.broadcast_to(mask[:, None], values.shape)
    st = SuffStats.from_arrays(t_b.reshape(B * G, M, n), values.reshape(B * G, M, n), m_b.reshape(B * G, M, n))

    # steps 1-2
    if step1 is None:
        step1 = em_batch(st, config.em)
    theta_pop, var_pop, amp_ok = _phase_and_variance(step1.beta, step1.fixed_cov, config.variance_form)
    theta_pop, var_pop = theta_pop.reshape(B, G), var_pop.reshape(B, G)
    gene_ok = (amp_ok & ~step1.singular).reshape(B, G)
    reason = np.full((B, G), "", dtype=object)
    reason[~amp_ok.reshape(B, G)] = "population amplitude is zero"
    reason[step1.singular.reshape(B, G)] = "singular information matrix"

    # steps 3-4
    ind_beta, ind_cov, _, ind_ok = ols_batch(st)
    theta_ind, var_ind, ind_amp = _phase_and_variance(ind_beta, ind_cov, config.variance_form)
    theta_ind = theta_ind.reshape(B, G, M)
    var_ind = var_ind.reshape(B, G, M)
    ind_ok = (ind_ok & ind_amp).reshape(B, G, M)

    # step 5
    w = _weights(var_pop[..., None], var_ind)
    tp = np.where(gene_ok, theta_pop, 0.0)[..., None]
    ti = np.where(ind_ok, theta_ind, 0.0)
    s = w * np.sin(ti) + (1.0 - w) * np.sin(tp)
    c = w * np.cos(ti) + (1.0 - w) * np.cos(tp)
    pair_ok = ~((np.abs(s) < RESULTANT_EPS) & (np.abs(c) < RESULTANT_EPS))
    d_hat = wrap_positive(np.arctan2(s, c) - tp)
    usable = gene_ok[..., None] & ind_ok & pair_ok & np.isfinite(w)

    # omega over the individuals with a usable phase estimate
    cnt = ind_ok.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sbar = np.where(ind_ok, np.sin(ti), 0.0).sum(axis=-1) / cnt
        cbar = np.where(ind_ok, np.cos(ti), 0.0).sum(axis=-1) / cnt
    omega = np.minimum(np.hypot(sbar, cbar), 1.0)
    no_ind = gene_ok & (cnt == 0)
    reason[no_ind] = "no individual with a usable phase estimate"
    gene_ok = gene_ok & ~no_ind

    # step 6
    if config.step6_weights == "text":
        cv = 1.0 - omega
        degenerate = gene_ok & (cv < 1.0 / WEIGHT_CAP)
        if degenerate.any():
            if config.degenerate_policy == "exclude":
                reason[degenerate] = "circular variance below 1e-6"
                gene_ok = gene_ok & ~degenerate
            else:
                warnings.warn(
                    f"{int(degenerate.sum())} gene(s) with circular variance below 1e-6; "
                    "weight capped at 1e6",
                    ZeroCircularVarianceWarning,
                    stacklevel=2,
                )
        with np.errstate(divide="ignore"):
            gw = np.minimum(1.0 / np.maximum(cv, 0.0), WEIGHT_CAP)
        agg_w = np.broadcast_to(gw[..., None], (B, G, M))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            agg_w = np.minimum(1.0 / np.maximum(var_ind, 0.0), WEIGHT_CAP)
    usable = usable & gene_ok[..., None] & np.isfinite(agg_w)
    aw = np.where(usable, agg_w, 0.0)
    total = aw.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ssum = (aw * np.sin(np.where(usable, d_hat, 0.0))).sum(axis=1) / total
        csum = (aw * np.cos(np.where(usable, d_hat, 0.0))).sum(axis=1) / total
    translation_ok = (total > 0) & ~((np.abs(ssum) < RESULTANT_EPS) & (np.abs(csum) < RESULTANT_EPS))
    d_tilde = np.where(translation_ok, HOURS_PER_RADIAN * np.arctan2(ssum, csum), 0.0)

    # step 7
    new_times = times + d_tilde[..., None]
    t2 = np.broadcast_to(new_times[:, None], values.shape)
    st2 = SuffStats.from_arrays(t2.reshape(B * G, M, n), values.reshape(B * G, M, n), m_b.reshape(B * G, M, n))
    refit = em_batch(st2, config.em)

    return BatchAdjustment(
        step1=step1,
        refit=refit,
        theta_pop=theta_pop,
        var_pop=var_pop,
        theta_ind=theta_ind,
        var_ind=var_ind,
        weights=w,
        d_hat=np.where(usable, d_hat, np.nan),
        usable=usable,
        gene_ok=gene_ok,
        gene_reason=reason,
        omega=omega,
        d_tilde=d_tilde,
        translation_ok=translation_ok,
    )


@dataclass
class AdjustmentResult:
    adjustment: PhaseAdjustment
    original: dict  # gene -> MixedFit or None
    refits: dict  # gene -> MixedFit or None
    failures: dict = field(default_factory=dict)  # gene -> message


def run_adjustment(data: GeneMatrix, config: AdjustConfig = AdjustConfig()) -> AdjustmentResult:
    """Estimate per-individual time translations and refit every gene."""
    if data.M < 2:
        raise ValueError("adjustment needs at least 2 individuals")
    if not data.values:
        raise NoUsableGenes("no genes supplied")
    times, values, mask = data.padded()
    res = adjust_arrays(times[None], values[None], mask[None], config)
    genes = data.gene_ids

    excluded = [(g, res.gene_reason[0, k]) for k, g in enumerate(genes) if not res.gene_ok[0, k]]
    if len(excluded) == len(genes):
        raise NoUsableGenes("every gene failed the population or individual fits")
    for g, why in excluded:
        warnings.warn(f"gene {g!r} excluded from the translation: {why}", AdjustmentWarning, stacklevel=2)
    lost = ~res.translation_ok[0]
    if lost.any():
        ids = [data.individual_ids[i] for i in np.flatnonzero(lost)]
        warnings.warn(f"no usable offset for individuals {ids}; translation set to 0", AdjustmentWarning, stacklevel=2)

    original, refits, failures = {}, {}, {}
    for k, g in enumerate(genes):
        original[g] = None if res.step1.singular[k] else _fit_from_batch(res.step1, k)
        if res.refit.singular[k]:
            refits[g] = None
            failures[g] = "singular information matrix in the refit"
            continue
        fit = _fit_from_batch(res.refit, k)
        if config.realign and original[g] is not None:
            try:
                fit = realign_population_phase(original[g], fit)
            except DegenerateAmplitude as exc:
                failures[g] = str(exc)
        refits[g] = fit

    adjustment = PhaseAdjustment(
        gene_ids=genes,
        individual_ids=list(data.individual_ids),
        d_hat=res.d_hat[0],
        omega=res.omega[0],
        d_tilde=res.d_tilde[0],
        excluded_genes=excluded,
        weights=res.weights[0],
    )
    logger.info("translations (h): %s", np.array2string(adjustment.d_tilde, precision=3))
    return AdjustmentResult(adjustment=adjustment, original=original, refits=refits, failures=failures)
