import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from phasecosinor.core import OMEGA, CosinorParams, FitCovariance, LongitudinalSeries, RandomEffectSpec
from phasecosinor.exceptions import (
    InsufficientData,
    NotConvergedWarning,
    NotEquispaced,
    RankDeficient,
    SingularBlock,
    SingularInformation,
    TooFewSamples,
)
from phasecosinor.lmm import (
    EmConfig,
    MixedFit,
    SuffStats,
    design_matrix,
    em_batch,
    em_fit,
    gls_fixed_effects,
    individual_cosinor,
    equispaced_v_inverse,
    marginal_covariance,
    wald_tau,
    wald_test,
)


def simulate(rng, M=10, n=12, psi=(1.0, 0.02, 0.02), sigma2=0.25, beta=(6.0, -0.2, 0.3), interval=2.0):
    times = interval * np.arange(1, n + 1)
    out = []
    for i in range(M):
        b = np.array(beta) + rng.normal(0, np.sqrt(psi))
        y = design_matrix(times) @ b + rng.normal(0, math.sqrt(sigma2), n)
        out.append(LongitudinalSeries(i, times, y))
    return out


def gls_at(data, psi, sigma2):
    spec = RandomEffectSpec(psi, sigma2)
    pairs = [(design_matrix(s.times), s.values) for s in data]
    v_inv = [np.linalg.inv(marginal_covariance(s.times, spec)) for s in data]
    return gls_fixed_effects(pairs, v_inv)


class TestDesignAndGls:
    def test_design_matrix_columns(self):
        w = design_matrix([0.0, 6.0, 12.0, 18.0])
        np.testing.assert_allclose(w, [[1, 0, 1], [1, 1, 0], [1, 0, -1], [1, -1, 0]], atol=1e-15)

    def test_orthogonal_grid_information(self):
        w = design_matrix([0.0, 6.0, 12.0, 18.0])
        np.testing.assert_allclose(w.T @ w, np.diag([4.0, 2.0, 2.0]), atol=1e-14)

    def test_gls_with_white_noise_is_pooled_ols(self, rng):
        data = simulate(rng)
        p, cov = gls_at(data, np.zeros(3), 0.25)
        w = np.vstack([design_matrix(s.times) for s in data])
        y = np.concatenate([s.values for s in data])
        ols, *_ = np.linalg.lstsq(w, y, rcond=None)
        np.testing.assert_allclose(p.as_array(), ols, atol=1e-12)
        np.testing.assert_allclose(cov.sigma, 0.25 * np.linalg.inv(w.T @ w), atol=1e-14)

    def test_gls_noiseless_recovery(self, rng):
        times = 3.0 * np.arange(1, 9)
        truth = np.array([6.0, 0.0, 0.5])
        data = [LongitudinalSeries(i, times, design_matrix(times) @ truth) for i in range(3)]
        p, _ = gls_at(data, [0.7, 0.2, 0.1], 0.3)
        np.testing.assert_allclose(p.as_array(), truth, atol=1e-10)

    def test_gls_shift_invariance(self, rng):
        data = simulate(rng)
        shifted = [LongitudinalSeries(s.individual_id, s.times, s.values + 3.7) for s in data]
        a, ca = gls_at(data, [1.0, 0.1, 0.05], 0.3)
        b, cb = gls_at(shifted, [1.0, 0.1, 0.05], 0.3)
        assert b.mu0 == pytest.approx(a.mu0 + 3.7, abs=1e-10)
        assert b.beta1 == pytest.approx(a.beta1, abs=1e-10)
        assert b.beta2 == pytest.approx(a.beta2, abs=1e-10)
        np.testing.assert_allclose(cb.sigma, ca.sigma, atol=1e-10)

    def test_gls_singular(self):
        times = np.zeros(4)
        w = design_matrix(times)
        with pytest.raises(SingularInformation):
            gls_fixed_effects([(w, np.ones(4))], [np.eye(4)])

    def test_gls_dimension_mismatch(self):
        w = design_matrix(np.arange(4.0))
        with pytest.raises(ValueError):
            gls_fixed_effects([(w, np.ones(4))], [np.eye(3)])


class TestEquispacedInverse:
    def test_zero_psi_is_scaled_identity(self):
        out = equispaced_v_inverse(7, RandomEffectSpec(np.zeros(3), 0.4))
        np.testing.assert_allclose(out, np.eye(7) / 0.4, atol=1e-15)

    def test_hand_evaluated_entry(self):
        out = equispaced_v_inverse(4, RandomEffectSpec(np.ones(3), 1.0))
        assert out[0, 0] == pytest.approx(1 - 1 / 5 - 2 / 6, abs=1e-12)
        assert out[0, 0] == pytest.approx(0.46666667, abs=1e-8)

    @given(
        st.integers(3, 48),
        st.floats(0.01, 10),
        st.tuples(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5)),
    )
    def test_matches_dense_inverse(self, n, sigma2, psi):
        spec = RandomEffectSpec(np.array(psi), sigma2)
        times = 24.0 * np.arange(n) / n
        v = marginal_covariance(times, spec)
        out = equispaced_v_inverse(n, spec, times)
        np.testing.assert_allclose(v @ out, np.eye(n), atol=1e-10)
        np.testing.assert_allclose(out, np.linalg.inv(v), atol=1e-9, rtol=0)

    def test_rejects_off_grid_times(self):
        times = 24.0 * np.arange(6) / 6
        times[2] += 1e-6
        with pytest.raises(NotEquispaced):
            equispaced_v_inverse(6, RandomEffectSpec(np.ones(3), 1.0), times)

    def test_rejects_full_psi_and_small_n(self):
        full = np.array([[1.0, 0.2, 0], [0.2, 1.0, 0], [0, 0, 1.0]])
        with pytest.raises(ValueError):
            equispaced_v_inverse(6, RandomEffectSpec(full, 1.0))
        with pytest.raises(ValueError):
            equispaced_v_inverse(2, RandomEffectSpec(np.ones(3), 1.0))


def _dense_loglik(data, beta, psi, sigma2):
    spec = RandomEffectSpec(psi, sigma2)
    ll = 0.0
    for s in data:
        v = marginal_covariance(s.times, spec)
        r = s.values - design_matrix(s.times) @ beta
        ll += stats.multivariate_normal(np.zeros(s.n), v).logpdf(r)
    return ll


class TestEm:
    def test_loglik_trace_nondecreasing_and_matches_dense(self, rng):
        data = simulate(rng)
        fit = em_fit(data, EmConfig(record_history=True, accelerate=True))
        trace = np.array(fit.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-10)
        dense = _dense_loglik(data, fit.fixed.as_array(), fit.psi_hat, fit.sigma2_hat)
        assert fit.loglik == pytest.approx(dense, abs=1e-8)

    def test_plain_em_trace_nondecreasing(self, rng):
        data = simulate(rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            fit = em_fit(data, EmConfig(record_history=True, accelerate=False, max_iter=200))
        assert np.all(np.diff(fit.loglik_trace) >= -1e-10)

    def test_fixed_effects_solve_gls_at_estimate(self, rng):
        data = simulate(rng)
        fit = em_fit(data)
        p, cov = gls_at(data, fit.psi_hat, fit.sigma2_hat)
        np.testing.assert_allclose(fit.fixed.as_array(), p.as_array(), atol=1e-8)
        np.testing.assert_allclose(fit.fixed_cov.sigma, cov.sigma, atol=1e-10)

    def test_zero_iterations_is_gls_at_start(self, rng):
        data = simulate(rng)
        psi, s2 = np.diag([1.0, 0.02, 0.02]), 0.25
        fit = em_fit(data, EmConfig(max_iter=0, init_psi=psi, init_sigma2=s2, record_history=True))
        p, cov = gls_at(data, psi, s2)
        np.testing.assert_allclose(fit.fixed.as_array(), p.as_array(), atol=1e-12)
        np.testing.assert_allclose(fit.history["beta"][0], p.as_array(), atol=1e-12)
        assert fit.iterations == 0

    def test_maximum_not_beaten_by_perturbation(self, rng):
        data = simulate(rng)
        fit = em_fit(data, EmConfig(tol=1e-11, param_tol=1e-10, max_iter=5000))
        best = _dense_loglik(data, fit.fixed.as_array(), fit.psi_hat, fit.sigma2_hat)
        for _ in range(20):
            d = rng.normal(0, 0.02, (3, 3))
            psi = fit.psi_hat + d @ d.T * 0.1
            beta = gls_at(data, psi, fit.sigma2_hat)[0].as_array()
            assert _dense_loglik(data, beta, psi, fit.sigma2_hat * rng.uniform(0.95, 1.05)) <= best + 1e-8

    def test_matches_statsmodels_ml(self, rng):
        sm = pytest.importorskip("statsmodels.formula.api")
        import pandas as pd

        data = simulate(rng, psi=(1.0, 0.05, 0.05))
        fit = em_fit(data, EmConfig(psi_structure="full", tol=1e-12, param_tol=1e-12, max_iter=5000))
        rows = [
            {"g": s.individual_id, "y": y, "s": math.sin(OMEGA * t), "c": math.cos(OMEGA * t)}
            for s in data
            for t, y in zip(s.times, s.values)
        ]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ref = sm.mixedlm("y ~ s + c", pd.DataFrame(rows), groups="g", re_formula="~ s + c").fit(reml=False)
        assert fit.loglik >= ref.llf - 1e-6
        np.testing.assert_allclose(fit.fixed.as_array(), ref.fe_params.to_numpy(), atol=2e-3)

    def test_diagonal_structure(self, rng):
        fit = em_fit(simulate(rng), EmConfig(psi_structure="diagonal"))
        off = fit.psi_hat - np.diag(np.diag(fit.psi_hat))
        assert np.all(off == 0.0)
        assert np.all(np.diag(fit.psi_hat) >= 0)

    def test_psi_is_psd_and_cov_symmetric(self, rng):
        fit = em_fit(simulate(rng, psi=(0.5, 0.0, 0.0)))
        assert np.linalg.eigvalsh(fit.psi_hat).min() >= -1e-12
        assert np.allclose(fit.fixed_cov.sigma, fit.fixed_cov.sigma.T)
        assert np.linalg.eigvalsh(fit.fixed_cov.sigma).min() > 0

    def test_zero_random_effects_recovered(self):
        rng = np.random.default_rng(11)
        R, M, n = 200, 10, 48
        t = np.broadcast_to(24 * np.arange(n) / n, (R, M, n))
        y = 6 + 0.5 * np.cos(OMEGA * t) + 0.5 * rng.standard_normal((R, M, n))
        res = em_batch(SuffStats.from_arrays(t, y))
        se = lambda x: x.std(ddof=1) / math.sqrt(R)
        for a, b in [(0, 1), (0, 2), (1, 2)]:
            assert abs(res.psi[:, a, b].mean()) < 3 * se(res.psi[:, a, b])
        # diagonal entries sit on the boundary; they must be small next to
        # the per-individual OLS sampling variance 2 sigma^2 / n
        assert np.all(res.psi[:, [0, 1, 2], [0, 1, 2]].mean(axis=0) < 0.25 * 2 * 0.25 / n)
        assert abs(res.sigma2.mean() / 0.25 - 1) < 0.05

    def test_batch_matches_single_fits(self, rng):
        sets = [simulate(rng) for _ in range(3)]
        st_ = [SuffStats.from_series(d) for d in sets]
        stacked = SuffStats(*(np.stack([getattr(s, f) for s in st_]) for f in ("wtw", "wty", "yty", "n")))
        res = em_batch(stacked)
        for k, d in enumerate(sets):
            single = em_fit(d)
            np.testing.assert_allclose(res.beta[k], single.fixed.as_array(), atol=1e-10)

    def test_insufficient_data(self, rng):
        data = simulate(rng, M=1)
        with pytest.raises(InsufficientData):
            em_fit(data)
        small = simulate(rng, M=2, n=4)
        with pytest.raises(InsufficientData):
            em_fit(small)

    def test_not_converged_warning_keeps_best_iterate(self, rng):
        data = simulate(rng)
        with pytest.warns(NotConvergedWarning):
            fit = em_fit(data, EmConfig(max_iter=1, accelerate=False))
        assert not fit.converged
        assert fit.iterations == 1
        assert isinstance(fit, MixedFit)

    def test_unequal_lengths_supported(self, rng):
        data = simulate(rng)
        data[0] = LongitudinalSeries(0, data[0].times[:5], data[0].values[:5])
        fit = em_fit(data)
        p, _ = gls_at(data, fit.psi_hat, fit.sigma2_hat)
        np.testing.assert_allclose(fit.fixed.as_array(), p.as_array(), atol=1e-8)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EmConfig(psi_structure="banded")
        with pytest.raises(ValueError):
            EmConfig(max_iter=-1)


class TestIndividual:
    def test_noiseless_recovery(self):
        t = 2.0 * np.arange(1, 13)
        truth = np.array([6.0, -0.3, 0.4])
        fit = individual_cosinor(LongitudinalSeries("a", t, design_matrix(t) @ truth))
        np.testing.assert_allclose(fit.params.as_array(), truth, atol=1e-10)
        assert fit.residual_var == pytest.approx(0.0, abs=1e-20)

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            individual_cosinor(LongitudinalSeries("a", [0.0, 8.0, 16.0], [1.0, 2.0, 3.0]))

    def test_rank_deficient(self):
        with pytest.raises(RankDeficient):
            individual_cosinor(LongitudinalSeries("a", [5.0] * 6, np.arange(6.0)))
        # 0 and 12 h give sin = 0 at both times
        with pytest.raises(RankDeficient):
            individual_cosinor(LongitudinalSeries("a", [0.0, 12.0, 24.0, 36.0], np.arange(4.0)))

    def test_equispaced_covariance(self, rng):
        t = 4.0 * np.arange(6)
        y = 6 + rng.normal(0, 0.5, 6)
        fit = individual_cosinor(LongitudinalSeries("a", t, y))
        np.testing.assert_allclose(fit.cov.sigma, fit.residual_var * np.diag([1 / 6, 1 / 3, 1 / 3]), atol=1e-12)
        w = design_matrix(t)
        rss = np.sum((y - w @ fit.params.as_array()) ** 2)
        assert fit.residual_var == pytest.approx(rss / 3)


def _fit(beta, cov):
    return MixedFit(CosinorParams(*beta), np.zeros((3, 3)), 1.0, FitCovariance(cov), 0.0, 0, True, False)


class TestWald:
    def test_zero_coefficients(self):
        res = wald_test(_fit((1.0, 0.0, 0.0), np.eye(3)))
        assert res.tau == 0.0 and res.p_value == 1.0 and res.df == 2

    def test_closed_form_without_random_effects(self):
        M, n, theta1, s2 = 10, 12, 0.5, 0.25
        t = 2.0 * np.arange(1, n + 1)
        w = design_matrix(t)
        cov = s2 * np.linalg.inv(M * w.T @ w)
        res = wald_test(_fit((6.0, 0.0, theta1), cov))
        assert res.tau == pytest.approx(M * n * theta1**2 / (2 * s2), abs=1e-8)
        assert res.tau == pytest.approx(60.0, abs=1e-8)

    def test_expected_tau_display_with_unit_characteristic(self):
        M, n, s2 = 10, 12, 0.25
        psi = np.array([1.0, 0.05, 0.08])
        b1, b2 = -0.2, 0.35
        v_inv = equispaced_v_inverse(n, RandomEffectSpec(psi, s2))
        w = design_matrix(24.0 * np.arange(n) / n)
        cov = np.linalg.inv(M * w.T @ v_inv @ w)
        tau = wald_test(_fit((6.0, b1, b2), 0.5 * (cov + cov.T))).tau
        coef = lambda p: 1 / s2 - n * p / (s2 * (n * p + 2 * s2))
        display = M * n / 2 * (coef(psi[1]) * b1**2 + coef(psi[2]) * b2**2)
        assert tau == pytest.approx(display, rel=1e-10, abs=1e-8)

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(1.01, 20))
    def test_scaling_multiplies_tau_by_square(self, b1, b2, c):
        cov = np.array([[1.0, 0.1, 0.0], [0.1, 0.5, 0.2], [0.0, 0.2, 0.7]])
        base = wald_tau(np.array([0.0, b1, b2]), cov)
        scaled = wald_tau(np.array([0.0, c * b1, c * b2]), cov)
        assert scaled == pytest.approx(c * c * base, rel=1e-12, abs=1e-300)

    @given(st.floats(0, 200))
    def test_p_value_is_chi2_two_tail(self, tau):
        s = math.sqrt(tau)
        res = wald_test(_fit((0.0, 0.0, s), np.eye(3)))
        # the chi-square(2) upper tail is exp(-x / 2)
        assert res.p_value == pytest.approx(math.exp(-tau / 2), rel=1e-10, abs=1e-300)

    def test_singular_block(self):
        cov = np.diag([1.0, 1.0, 0.0])
        with pytest.raises(SingularBlock):
            wald_test(_fit((0.0, 1.0, 1.0), cov))


def test_symmetric_random_effects_are_uncorrelated_with_phase_terms():
    from phasecosinor.simgen import TruncNormal

    rng = np.random.default_rng(5)
    N = 1_000_000
    c1 = TruncNormal(0.0, 0.5, -0.3, 0.3).sample(rng, N)
    c2 = TruncNormal(0.0, math.pi**2 / 36, -math.pi, math.pi).sample(rng, N)
    for x in (c1 * np.sin(c2), c1 * np.cos(c2)):
        assert abs(x.mean()) < 4 * x.std(ddof=1) / math.sqrt(N)
