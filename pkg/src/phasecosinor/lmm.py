"""Linear mixed-effects cosinor model.

The model for individual i is ``y_i = W_i beta + W_i b_i + e_i`` with
``b_i ~ N(0, psi)`` and ``e_i ~ N(0, sigma2 I)``, where row j of ``W_i`` is
``[1, sin(pi x_ij / 12), cos(pi x_ij / 12)]``.

Everything in the EM loop is computed from per-individual sufficient
statistics (``W'W``, ``W'y``, ``y'y``, ``n``) using the push-through identity
``W' V^-1 = (sigma2 I + W'W psi)^-1 W'``, so no n x n matrix is ever formed.
The loop is vectorised over a leading batch axis; a batch element can be a
gene, a simulation trial, or both.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import (
    OMEGA,
    CosinorParams,
    FitCovariance,
    LongitudinalSeries,
    RandomEffectSpec,
)
from .exceptions import (
    InsufficientData,
    NotConvergedWarning,
    NotEquispaced,
    RankDeficient,
    SingularBlock,
    SingularInformation,
    TooFewSamples,
)

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12
PSI_FLOOR = 1e-6
MAX_STEP = 1e6
LOG_2PI = math.log(2.0 * math.pi)


def design_matrix(times) -> np.ndarray:
    """Cosinor design matrix with columns [1, sin, cos]; works on any leading shape."""
    x = OMEGA * np.asarray(times, dtype=float)
    return np.stack([np.ones_like(x), np.sin(x), np.cos(x)], axis=-1)


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-8
    param_tol: float = 1e-8
    psi_structure: str = "full"
    init_psi: Optional[np.ndarray] = None
    init_sigma2: Optional[float] = None
    accelerate: bool = True
    record_history: bool = False

    def __post_init__(self):
        if self.psi_structure not in ("full", "diagonal"):
            raise ValueError("psi_structure must be 'full' or 'diagonal'")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")

    @property
    def diagonal(self) -> bool:
        return self.psi_structure == "diagonal"


@dataclass
class MixedFit:
    fixed: CosinorParams
    psi_hat: np.ndarray
    sigma2_hat: float
    fixed_cov: FitCovariance
    loglik: float
    iterations: int
    converged: bool
    phase_degenerate: bool
    loglik_trace: list = field(default_factory=list, repr=False)
    history: Optional[dict] = field(default=None, repr=False)

    @property
    def amplitude(self) -> float:
        return self.fixed.amplitude

    @property
    def phase(self) -> float:
        return self.fixed.phase


@dataclass(frozen=True)
class IndividualFit:
    params: CosinorParams
    cov: FitCovariance
    residual_var: float
    n: int


@dataclass(frozen=True)
class WaldResult:
    tau: float
    df: int
    p_value: float


# ---------------------------------------------------------------------------
# dense helpers


def _solve_spd(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with a pseudo-inverse fallback; raises above COND_LIMIT."""
    if np.linalg.cond(mat) > COND_LIMIT:
        raise SingularInformation(
            f"information matrix condition number exceeds {COND_LIMIT:g}"
        )
    try:
        chol = np.linalg.cholesky(mat)
        tmp = np.linalg.solve(chol, rhs)
        return np.linalg.solve(chol.T, tmp)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(mat) @ rhs


def gls_fixed_effects(
    data: Sequence[tuple[np.ndarray, np.ndarray]], v_inv: Sequence[np.ndarray]
) -> tuple[CosinorParams, FitCovariance]:
    """Generalised least squares for known per-individual V^-1.

    ``data`` holds ``(W_i, y_i)`` pairs, ``v_inv`` the matching ``V_i^-1``.
    """
    if len(data) != len(v_inv):
        raise ValueError("data and v_inv differ in length")
    info = np.zeros((3, 3))
    rhs = np.zeros(3)
    for (w, y), vi in zip(data, v_inv):
        w = np.asarray(w, dtype=float)
        y = np.asarray(y, dtype=float)
        vi = np.asarray(vi, dtype=float)
        if w.shape[1] != 3 or w.shape[0] != y.size or vi.shape != (y.size, y.size):
            raise ValueError("inconsistent per-individual dimensions")
        wv = w.T @ vi
        info += wv @ w
        rhs += wv @ y
    info = 0.5 * (info + info.T)
    beta = _solve_spd(info, rhs)
    cov = _solve_spd(info, np.eye(3))
    return CosinorParams.from_array(beta), FitCovariance(0.5 * (cov + cov.T))


def equispaced_v_inverse(n: int, spec: RandomEffectSpec, times=None) -> np.ndarray:
    """Closed-form ``(sigma2 I + W diag(psi) W')^-1`` on the equispaced grid.

    Valid only for ``times = 24 (j - 1) / n`` and diagonal psi.
    """
    if n < 3:
        raise ValueError("closed form needs n >= 3")
    if not spec.is_diagonal:
        raise ValueError("closed form needs a diagonal psi")
    grid = 24.0 * np.arange(n) / n
    if times is not None:
        times = np.asarray(times, dtype=float)
        if times.shape != grid.shape or np.max(np.abs(times - grid)) > 1e-9:
            raise NotEquispaced("times are not the grid 24(j-1)/n")
    psi1, psi2, psi3 = np.diag(spec.psi)
    s2 = spec.sigma2
    s = np.sin(OMEGA * grid)
    c = np.cos(OMEGA * grid)
    out = np.eye(n) / s2
    out -= psi1 / (s2 * (n * psi1 + s2))
    out -= 2.0 * psi2 / (s2 * (n * psi2 + 2.0 * s2)) * np.outer(s, s)
    out -= 2.0 * psi3 / (s2 * (n * psi3 + 2.0 * s2)) * np.outer(c, c)
    return out


def marginal_covariance(times, spec: RandomEffectSpec) -> np.ndarray:
    w = design_matrix(times)
    return spec.sigma2 * np.eye(w.shape[0]) + w @ spec.psi @ w.T


# ---------------------------------------------------------------------------
# sufficient statistics and the batched EM core


@dataclass
class SuffStats:
    """Per-individual sufficient statistics, shape (..., M, ...)."""

    wtw: np.ndarray  # (..., M, 3, 3)
    wty: np.ndarray  # (..., M, 3)
    yty: np.ndarray  # (..., M)
    n: np.ndarray  # (..., M)

    @classmethod
    def from_arrays(cls, times, values, mask=None) -> "SuffStats":
        """Build from padded arrays of shape (..., M, n_max); ``mask`` marks real samples."""
        w = design_matrix(times)
        y = np.asarray(values, dtype=float)
        if mask is None:
            mask = np.ones(y.shape, dtype=bool)
        m = mask.astype(float)
        w = w * m[..., None]
        y = np.where(mask, y, 0.0)
        return cls(
            wtw=np.einsum("...ja,...jb->...ab", w, w),
            wty=np.einsum("...ja,...j->...a", w, y),
            yty=np.einsum("...j,...j->...", y, y),
            n=m.sum(axis=-1),
        )

    @classmethod
    def from_series(cls, data: Sequence[LongitudinalSeries]) -> "SuffStats":
        n_max = max(s.n for s in data)
        times = np.zeros((len(data), n_max))
        values = np.zeros((len(data), n_max))
        mask = np.zeros((len(data), n_max), dtype=bool)
        for i, s in enumerate(data):
            times[i, : s.n] = s.times
            values[i, : s.n] = s.values
            mask[i, : s.n] = True
        return cls.from_arrays(times, values, mask)


@dataclass
class BatchFit:
    """Result arrays of the batched EM; leading axis is the batch."""

    beta: np.ndarray
    fixed_cov: np.ndarray
    psi: np.ndarray
    sigma2: np.ndarray
    loglik: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    singular: np.ndarray
    loglik_trace: list = field(default_factory=list, repr=False)
    beta_trace: list = field(default_factory=list, repr=False)

    def tau(self) -> np.ndarray:
        return wald_tau(self.beta, self.fixed_cov)

    def amplitude(self) -> np.ndarray:
        return np.hypot(self.beta[..., 1], self.beta[..., 2])


def ols_batch(st: SuffStats):
    """Per-individual OLS from sufficient statistics.

    Returns (beta, cov, residual_var, ok) with ``ok`` False where n < 4 or
    W'W is rank deficient.
    """
    wtw, wty = st.wtw, st.wty
    eig = np.linalg.eigvalsh(wtw)
    full_rank = eig[..., 0] > eig[..., -1] / COND_LIMIT
    ok = full_rank & (st.n >= 4)
    safe = np.where(full_rank[..., None, None], wtw, np.eye(3))
    inv = np.linalg.inv(safe)
    beta = np.einsum("...ab,...b->...a", inv, wty)
    rss = st.yty - np.einsum("...a,...a->...", beta, wty)
    dof = np.maximum(st.n - 3, 1)
    resid = np.maximum(rss, 0.0) / dof
    cov = resid[..., None, None] * inv
    return beta, cov, resid, ok


def _init_params(st: SuffStats, diagonal: bool):
    """Pooled OLS residual variance and between-individual coefficient covariance."""
    pooled_a = st.wtw.sum(axis=-3)
    pooled_b = st.wty.sum(axis=-2)
    pooled_yy = st.yty.sum(axis=-1)
    n_tot = st.n.sum(axis=-1)
    beta = np.linalg.solve(pooled_a, pooled_b[..., None])[..., 0]
    rss = pooled_yy - np.einsum("...a,...a->...", beta, pooled_b)
    sigma2 = np.maximum(rss, 0.0) / np.maximum(n_tot - 3, 1)

    ind_beta, _, _, ok = ols_batch(st)
    w = ok.astype(float)
    cnt = w.sum(axis=-1)
    mean = np.einsum("...m,...ma->...a", w, ind_beta) / np.maximum(cnt, 1)[..., None]
    dev = (ind_beta - mean[..., None, :]) * w[..., None]
    psi = np.einsum("...ma,...mb->...ab", dev, dev) / np.maximum(cnt - 1, 1)[..., None, None]
    psi = np.where((cnt >= 2)[..., None, None], psi, 0.0)
    if diagonal:
        psi = psi * np.eye(3)
    idx = np.arange(3)
    psi[..., idx, idx] = np.maximum(psi[..., idx, idx], PSI_FLOOR)
    return psi, sigma2


def _psd_clip(psi: np.ndarray) -> np.ndarray:
    psi = 0.5 * (psi + np.swapaxes(psi, -1, -2))
    vals, vecs = np.linalg.eigh(psi)
    if np.all(vals >= 0):
        return psi
    vals = np.maximum(vals, 0.0)
    return np.einsum("...ab,...b,...cb->...ac", vecs, vals, vecs)


def _gls_step(st: SuffStats, psi: np.ndarray, sigma2: np.ndarray):
    """GLS fixed effects and profile log-likelihood at (psi, sigma2)."""
    a = st.wtw
    eye = np.eye(3)
    k = sigma2[..., None, None, None] * eye + a @ psi[..., None, :, :]
    try:
        kinv = np.linalg.inv(k)
    except np.linalg.LinAlgError:
        kinv = np.linalg.pinv(k)
    info = (kinv @ a).sum(axis=-3)
    info = 0.5 * (info + np.swapaxes(info, -1, -2))
    rhs = np.einsum("...mab,...mb->...a", kinv, st.wty)
    eig = np.linalg.eigvalsh(info)
    singular = ~(eig[..., 0] > eig[..., -1] / COND_LIMIT)
    safe_info = np.where(singular[..., None, None], eye, info)
    cov = np.linalg.inv(safe_info)
    cov = np.where(singular[..., None, None], np.linalg.pinv(info), cov)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    beta = np.einsum("...ab,...b->...a", cov, rhs)

    wr = st.wty - np.einsum("...mab,...b->...ma", a, beta)
    rr = st.yty - 2.0 * np.einsum("...a,...ma->...m", beta, st.wty) + np.einsum(
        "...a,...mab,...b->...m", beta, a, beta
    )
    psi_kinv_wr = np.einsum("...ab,...mbc,...mc->...ma", psi, kinv, wr)
    quad = (rr - np.einsum("...ma,...ma->...m", wr, psi_kinv_wr)) / sigma2[..., None]
    _, logdet_k = np.linalg.slogdet(k)
    logdet_v = (st.n - 3.0) * np.log(sigma2)[..., None] + logdet_k
    ll = -0.5 * (st.n * LOG_2PI + logdet_v + quad).sum(axis=-1)
    return beta, cov, ll, singular, kinv, wr, rr, psi_kinv_wr


def _em_map(st: SuffStats, psi, sigma2, gls, diagonal: bool, sigma2_floor):
    """One EM update of (psi, sigma2) with beta profiled out by GLS."""
    _, _, _, _, kinv, wr, rr, bhat = gls
    a = st.wtw
    # posterior of b_i: mean psi K^-1 W'r, covariance psi - psi K^-1 A psi
    post_cov = psi[:, None] - psi[:, None] @ kinv @ a @ psi[:, None]
    second = np.einsum("bma,bmc->bmac", bhat, bhat) + post_cov
    new_psi = second.mean(axis=1)
    if diagonal:
        new_psi = new_psi * np.eye(3)
    new_psi = _psd_clip(new_psi)
    resid = (
        rr
        - 2.0 * np.einsum("bma,bma->bm", bhat, wr)
        + np.einsum("bma,bmac,bmc->bm", bhat, a, bhat)
        + np.einsum("bmac,bmca->bm", a, post_cov)
    )
    new_sigma2 = np.maximum(resid.sum(axis=1) / st.n.sum(axis=-1), sigma2_floor)
    return new_psi, new_sigma2


def _pack(psi, sigma2):
    return np.concatenate([psi.reshape(psi.shape[0], -1), sigma2[:, None]], axis=1)


def _unpack(theta, diagonal, sigma2_floor):
    psi = _psd_clip(theta[:, :9].reshape(-1, 3, 3))
    if diagonal:
        psi = psi * np.eye(3)
    return psi, np.maximum(theta[:, 9], sigma2_floor)


def _select(mask, new, old):
    return tuple(
        np.where(mask.reshape((-1,) + (1,) * (n.ndim - 1)), n, o) for n, o in zip(new, old)
    )


def em_batch(
    st: SuffStats,
    config: EmConfig = EmConfig(),
    psi0: Optional[np.ndarray] = None,
    sigma2_0: Optional[np.ndarray] = None,
) -> BatchFit:
    """Maximum-likelihood EM over a batch of independent datasets.

    ``st`` arrays carry shape (B, M, ...).  Each batch element stops on its
    own once ``|delta loglik| < tol`` or the relative parameter change drops
    below ``param_tol``; frozen elements are carried along unchanged.

    With ``config.accelerate`` the EM map is extrapolated SQUAREM-style; an
    extrapolated point is kept only if its log-likelihood is at least that of
    two plain EM steps, so the trace stays nondecreasing.  ``iterations``
    counts EM map evaluations in both modes.
    """
    batch = st.n.shape[0]
    n_tot = st.n.sum(axis=-1)
    diagonal = config.diagonal
    if psi0 is None or sigma2_0 is None:
        p_init, s_init = _init_params(st, diagonal)
    psi = p_init if psi0 is None else np.broadcast_to(np.asarray(psi0, float), (batch, 3, 3)).copy()
    sigma2 = s_init if sigma2_0 is None else np.broadcast_to(np.asarray(sigma2_0, float), (batch,)).copy()
    if diagonal:
        psi = psi * np.eye(3)
    scale = np.maximum(st.yty.sum(axis=-1) / np.maximum(n_tot, 1), 1.0)
    sigma2_floor = 1e-14 * scale
    sigma2 = np.maximum(sigma2, sigma2_floor)

    active = np.ones(batch, dtype=bool)
    converged = np.zeros(batch, dtype=bool)
    iterations = np.zeros(batch, dtype=int)
    ll_trace, beta_trace = [], []

    gls = _gls_step(st, psi, sigma2)

    def record():
        if config.record_history:
            ll_trace.append(gls[2].copy())
            beta_trace.append(gls[0].copy())

    record()
    while True:
        active &= iterations < config.max_iter
        if not active.any():
            break
        remaining = config.max_iter - iterations
        psi1, s1 = _em_map(st, psi, sigma2, gls, diagonal, sigma2_floor)
        gls1 = _gls_step(st, psi1, s1)
        n_maps = np.ones(batch, dtype=int)
        new_psi, new_s2, new_gls = psi1, s1, gls1

        use_sq = active & (remaining >= 3) if config.accelerate else np.zeros(batch, bool)
        if use_sq.any():
            psi2, s2 = _em_map(st, psi1, s1, gls1, diagonal, sigma2_floor)
            gls2 = _gls_step(st, psi2, s2)
            t0, t1, t2 = _pack(psi, sigma2), _pack(psi1, s1), _pack(psi2, s2)
            r = t1 - t0
            v = t2 - t1 - r
            nr = np.linalg.norm(r, axis=1)
            nv = np.linalg.norm(v, axis=1)
            alpha = np.where(nv > 0, -nr / np.where(nv > 0, nv, 1.0), -1.0)
            alpha = np.clip(alpha, -MAX_STEP, -1.0)
            tx = t0 - 2.0 * alpha[:, None] * r + (alpha**2)[:, None] * v
            tx = np.where(np.isfinite(tx).all(axis=1, keepdims=True), tx, t2)
            px, sx = _unpack(tx, diagonal, sigma2_floor)
            glsx = _gls_step(st, px, sx)
            bad = ~np.isfinite(glsx[2]) | ~np.isfinite(glsx[7]).all(axis=(1, 2))
            if bad.any():
                px, sx = _select(bad, (psi2, s2), (px, sx))
                glsx = _select(bad, gls2, glsx)
            psi3, s3 = _em_map(st, px, sx, glsx, diagonal, sigma2_floor)
            gls3 = _gls_step(st, psi3, s3)
            good = np.isfinite(gls3[2]) & (gls3[2] >= gls2[2]) & ~gls3[3]
            # two plain steps are always safe; the extrapolated one only if it helps
            sq_psi, sq_s2 = _select(good, (psi3, s3), (psi2, s2))
            sq_gls = _select(good, gls3, gls2)
            new_psi, new_s2 = _select(use_sq, (sq_psi, sq_s2), (psi1, s1))
            new_gls = _select(use_sq, sq_gls, gls1)
            n_maps = np.where(use_sq, np.where(good, 3, 2), 1)

        rel = np.max(np.abs(_pack(new_psi, new_s2) - _pack(psi, sigma2)), axis=1) / np.maximum(
            np.max(np.abs(_pack(psi, sigma2)), axis=1), 1e-300
        )
        dll = np.abs(new_gls[2] - gls[2])
        psi, sigma2 = _select(active, (new_psi, new_s2), (psi, sigma2))
        gls = _select(active, new_gls, gls)
        iterations += np.where(active, n_maps, 0)
        record()
        done = active & ((dll < config.tol) | (rel < config.param_tol))
        converged |= done
        active &= ~done

    beta, cov, ll, singular = gls[0], gls[1], gls[2], gls[3]
    return BatchFit(
        beta=beta,
        fixed_cov=cov,
        psi=psi,
        sigma2=sigma2,
        loglik=ll,
        iterations=iterations,
        converged=converged,
        singular=singular,
        loglik_trace=ll_trace,
        beta_trace=beta_trace,
    )


def _fit_from_batch(res: BatchFit, k: int) -> MixedFit:
    fixed = CosinorParams.from_array(res.beta[k])
    trace = [float(t[k]) for t in res.loglik_trace]
    history = None
    if res.beta_trace:
        history = {"beta": [t[k].copy() for t in res.beta_trace], "loglik": trace}
    return MixedFit(
        fixed=fixed,
        psi_hat=res.psi[k].copy(),
        sigma2_hat=float(res.sigma2[k]),
        fixed_cov=FitCovariance(res.fixed_cov[k]),
        loglik=float(res.loglik[k]),
        iterations=int(res.iterations[k]),
        converged=bool(res.converged[k]),
        phase_degenerate=fixed.phase_degenerate,
        loglik_trace=trace,
        history=history,
    )


def _check_data(data: Sequence[LongitudinalSeries]) -> None:
    if len(data) < 2:
        raise InsufficientData("em_fit needs at least 2 individuals")
    if sum(s.n for s in data) < 10:
        raise InsufficientData("em_fit needs at least 10 observations in total")


def em_fit(data: Sequence[LongitudinalSeries], config: EmConfig = EmConfig()) -> MixedFit:
    """Fit the mixed cosinor model by maximum likelihood (EM)."""
    _check_data(data)
    st = SuffStats.from_series(data)
    st = SuffStats(st.wtw[None], st.wty[None], st.yty[None], st.n[None])
    res = em_batch(
        st,
        config,
        psi0=config.init_psi,
        sigma2_0=config.init_sigma2,
    )
    if res.singular[0]:
        raise SingularInformation("summed information matrix is singular")
    fit = _fit_from_batch(res, 0)
    if not fit.converged and config.max_iter > 0:
        warnings.warn(
            f"EM stopped after {fit.iterations} iterations without converging",
            NotConvergedWarning,
            stacklevel=2,
        )
    logger.debug("em_fit: %d iterations, loglik %.10g", fit.iterations, fit.loglik)
    return fit


def individual_cosinor(series: LongitudinalSeries) -> IndividualFit:
    """Ordinary least-squares cosinor fit on one individual's samples."""
    if series.n < 4:
        raise TooFewSamples(f"need at least 4 samples, got {series.n}")
    w = design_matrix(series.times)
    wtw = w.T @ w
    eig = np.linalg.eigvalsh(wtw)
    if not eig[0] > eig[-1] / COND_LIMIT:
        raise RankDeficient("design matrix does not have full column rank")
    beta, *_ = np.linalg.lstsq(w, series.values, rcond=None)
    resid = series.values - w @ beta
    residual_var = float(resid @ resid) / (series.n - 3)
    cov = residual_var * np.linalg.inv(wtw)
    return IndividualFit(
        params=CosinorParams.from_array(beta),
        cov=FitCovariance(0.5 * (cov + cov.T)),
        residual_var=residual_var,
        n=series.n,
    )


def wald_tau(beta: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Wald statistic for beta1 = beta2 = 0; vectorised over leading axes."""
    b = beta[..., 1:]
    block = cov[..., 1:, 1:]
    sol = np.linalg.solve(block, b[..., None])[..., 0]
    return np.einsum("...a,...a->...", b, sol)


def wald_test(fit: MixedFit) -> WaldResult:
    beta = fit.fixed.as_array()
    block = fit.fixed_cov.sigma[1:, 1:]
    if np.linalg.cond(block) > COND_LIMIT:
        raise SingularBlock("(beta1, beta2) covariance block is singular")
    tau = float(max(wald_tau(beta, fit.fixed_cov.sigma), 0.0))
    return WaldResult(tau=tau, df=2, p_value=float(stats.chi2.sf(tau, 2)))
