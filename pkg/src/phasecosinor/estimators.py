"""scikit-learn style wrappers around the mixed cosinor fit and the time translation.

Both estimators take sample times as ``X`` and individual labels through the
``groups`` argument of ``fit``, mirroring how grouped cross-validation
passes them.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .core import LongitudinalSeries
from .lmm import EmConfig, em_fit, wald_test
from .phase_adjust import AdjustConfig, GeneMatrix, run_adjustment


def _check_times(X) -> np.ndarray:
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"X must hold one column of sample times, got {X.shape[1]}")
        X = X[:, 0]
    return X


def _group_order(groups) -> tuple[np.ndarray, list]:
    groups = np.asarray(groups)
    if groups.ndim != 1:
        raise ValueError("groups must be one-dimensional")
    _, first = np.unique(groups, return_index=True)
    labels = [groups[i] for i in np.sort(first)]
    return groups, labels


def _to_series(t, y, groups) -> list[LongitudinalSeries]:
    groups, labels = _group_order(groups)
    return [LongitudinalSeries(lab, t[groups == lab], y[groups == lab]) for lab in labels]


class _EmParams:
    def _em_config(self) -> EmConfig:
        return EmConfig(max_iter=self.max_iter, tol=self.tol, psi_structure=self.psi, accelerate=self.accelerate)


class MixedCosinorRegressor(_EmParams, RegressorMixin, BaseEstimator):
    """Population cosinor curve with per-individual random effects.

    Attributes after ``fit``: ``coef_`` (mesor, sine and cosine weights),
    ``amplitude_``, ``phase_``, ``psi_``, ``sigma2_``, ``fixed_cov_``,
    ``loglik_``, ``n_iter_``, ``converged_`` and the full ``fit_`` record.
    """

    def __init__(self, psi="full", max_iter=500, tol=1e-8, accelerate=True):
        self.psi = psi
        self.max_iter = max_iter
        self.tol = tol
        self.accelerate = accelerate

    def fit(self, X, y, groups):
        t = _check_times(X)
        y = check_array(y, ensure_2d=False, dtype=float)
        check_consistent_length(t, y, groups)
        fit = em_fit(_to_series(t, y, groups), self._em_config())
        self.fit_ = fit
        self.coef_ = fit.fixed.as_array()
        self.amplitude_ = fit.amplitude
        self.phase_ = fit.phase
        self.psi_ = fit.psi_hat
        self.sigma2_ = fit.sigma2_hat
        self.fixed_cov_ = fit.fixed_cov.sigma
        self.loglik_ = fit.loglik
        self.n_iter_ = fit.iterations
        self.converged_ = fit.converged
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self.fit_.fixed.evaluate(_check_times(X))

    def wald_test(self):
        """Wald test of no rhythm (both trigonometric weights zero)."""
        check_is_fitted(self, "coef_")
        return wald_test(self.fit_)


class PhaseShiftAligner(_EmParams, TransformerMixin, BaseEstimator):
    """Learn one clock-time translation per individual from many genes.

    ``fit(X, Y, groups)`` takes sample times ``X`` (n,), expression ``Y``
    (n, genes) and individual labels; ``transform(X, groups)`` returns the
    translated times.  Every individual must share its schedule across
    genes, which holds automatically for a column-per-gene ``Y``.
    """

    def __init__(
        self,
        step6_weights="text",
        degenerate_policy="cap",
        variance_form="tangential",
        psi="full",
        max_iter=500,
        tol=1e-8,
        accelerate=True,
    ):
        self.step6_weights = step6_weights
        self.degenerate_policy = degenerate_policy
        self.variance_form = variance_form
        self.psi = psi
        self.max_iter = max_iter
        self.tol = tol
        self.accelerate = accelerate

    def fit(self, X, Y, groups):
        t = _check_times(X)
        Y = check_array(Y, ensure_2d=False, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        check_consistent_length(t, Y, groups)
        groups, labels = _group_order(groups)
        rows = [groups == lab for lab in labels]
        gene_ids = [f"gene{k}" for k in range(Y.shape[1])]
        data = GeneMatrix(
            labels,
            [t[r] for r in rows],
            {g: [Y[r, k] for r in rows] for k, g in enumerate(gene_ids)},
        )
        config = AdjustConfig(
            em=self._em_config(),
            step6_weights=self.step6_weights,
            degenerate_policy=self.degenerate_policy,
            variance_form=self.variance_form,
        )
        self.result_ = run_adjustment(data, config)
        self.individual_ids_ = labels
        self.d_tilde_ = np.asarray(self.result_.adjustment.d_tilde, dtype=float)
        self.translations_ = dict(zip(labels, self.d_tilde_))
        return self

    def transform(self, X, groups):
        check_is_fitted(self, "d_tilde_")
        t = _check_times(X)
        check_consistent_length(t, groups)
        try:
            shift = np.array([self.translations_[g] for g in np.asarray(groups)], dtype=float)
        except KeyError as exc:
            raise ValueError(f"individual {exc.args[0]!r} was not seen during fit") from None
        return t + shift

    def fit_transform(self, X, Y, groups):
        return self.fit(X, Y, groups).transform(X, groups)
