import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phasecosinor.circstat import circular_mean
from phasecosinor.core import OMEGA, CosinorParams, FitCovariance, wrap_angle, wrap_positive
from phasecosinor.exceptions import (
    AdjustmentWarning,
    DegenerateAmplitude,
    NonPositiveVariance,
    NoUsableGenes,
    ResultantDegenerate,
    ZeroCircularVarianceWarning,
)
from phasecosinor.lmm import EmConfig, MixedFit, em_fit, wald_test
from phasecosinor.phase_adjust import (
    HOURS_PER_RADIAN,
    AdjustConfig,
    GeneMatrix,
    aggregate_translation,
    adjust_arrays,
    per_gene_offset,
    realign_population_phase,
    rotate_phase,
    run_adjustment,
    shrinkage_weight,
)


def make_panel(rng, offsets, G=4, n=12, noise=0.3, amps=None, phases=None, interval=2.0):
    M = len(offsets)
    times = interval * np.arange(1, n + 1)
    amps = rng.uniform(0.6, 1.2, G) if amps is None else amps
    phases = rng.uniform(-math.pi, math.pi, G) if phases is None else phases
    values = {}
    for g in range(G):
        rows = []
        for i in range(M):
            y = 6 + rng.normal(0, 0.5) + amps[g] * np.cos(OMEGA * times + phases[g] + offsets[i])
            rows.append(y + noise * rng.standard_normal(n))
        values[f"g{g}"] = rows
    return GeneMatrix(list(range(M)), [times.copy() for _ in range(M)], values)


class TestShrinkageWeight:
    def test_examples(self):
        assert shrinkage_weight(2.0, 2.0) == pytest.approx(0.5)
        assert shrinkage_weight(1.0, 4.0) == pytest.approx(0.2)
        assert shrinkage_weight(1.0, 1e-300) == pytest.approx(1.0)

    @pytest.mark.parametrize("vp, vi", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0), (np.inf, 1.0), (1.0, np.nan)])
    def test_rejects_bad_variances(self, vp, vi):
        with pytest.raises(NonPositiveVariance):
            shrinkage_weight(vp, vi)

    @given(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6))
    def test_in_unit_interval_and_monotone(self, vp, vi):
        w = shrinkage_weight(vp, vi)
        assert 0 < w < 1
        assert shrinkage_weight(vp, vi / 2) >= w


class TestPerGeneOffset:
    def test_examples(self):
        assert per_gene_offset(0.7, 0.7, 0.3) == pytest.approx(0.0, abs=1e-15)
        assert per_gene_offset(0.2, 0.5, 1.0) == pytest.approx(0.3, abs=1e-12)
        assert per_gene_offset(0.0, math.pi / 2, 0.5) == pytest.approx(math.pi / 4, abs=1e-15)

    def test_antipodal_equal_weight(self):
        with pytest.raises(ResultantDegenerate):
            per_gene_offset(0.0, math.pi, 0.5)

    def test_range(self):
        out = per_gene_offset(0.5, 0.2, 0.9)
        assert 0 <= out < 2 * math.pi
        assert out == pytest.approx(2 * math.pi - 0.27, abs=2e-3)

    @given(st.floats(-math.pi, math.pi), st.floats(-0.1, 0.1), st.floats(0, 1))
    def test_small_angle_reduction_third_order(self, theta_pop, delta, w):
        got = per_gene_offset(theta_pop, theta_pop + delta, w)
        linear = wrap_positive(w * delta)
        err = abs(wrap_angle(got - linear))
        # the first neglected term is w (1 - w) (1 - 2 w) delta^3 / 6
        bound = w * (1 - w) * abs(1 - 2 * w) * abs(delta) ** 3 / 6
        assert err <= bound * 1.05 + 1e-13
        if abs(delta) <= 0.039:
            assert err < 1e-6


class TestAggregateTranslation:
    def test_examples(self):
        assert aggregate_translation([0.0], [0.5]) == pytest.approx(0.0, abs=1e-15)
        assert aggregate_translation([math.pi / 2], [0.5]) == pytest.approx(6.0, abs=1e-12)
        got = aggregate_translation([0.2, 0.4], [0.8, 0.8])
        assert got == pytest.approx(HOURS_PER_RADIAN * circular_mean([0.2, 0.4]), abs=1e-12)
        assert got == pytest.approx(1.14591559, abs=1e-8)

    def test_weights_follow_inverse_circular_variance(self):
        got = aggregate_translation([0.0, 1.0], [0.5, 0.75])  # weights 2 and 4
        expected = HOURS_PER_RADIAN * math.atan2(4 * math.sin(1.0), 2 + 4 * math.cos(1.0))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_zero_circular_variance_is_capped(self):
        with pytest.warns(ZeroCircularVarianceWarning):
            got = aggregate_translation([0.3, 1.0], [1.0, 0.0])
        # weight 1e6 against weight 1
        assert got == pytest.approx(HOURS_PER_RADIAN * 0.3, abs=1e-5)

    def test_no_genes(self):
        with pytest.raises(NoUsableGenes):
            aggregate_translation([], [])


def _fit(beta, cov):
    return MixedFit(CosinorParams(*beta), np.eye(3), 0.3, FitCovariance(cov), -10.0, 5, True, False)


class TestRealign:
    def test_identity_when_aligned(self):
        cov = np.diag([0.1, 0.02, 0.03])
        f = _fit((6.0, -0.2, 0.3), cov)
        out = realign_population_phase(f, f)
        np.testing.assert_allclose(out.fixed.as_array(), f.fixed.as_array(), atol=1e-15)

    def test_rotation_restores_phase_and_keeps_amplitude(self):
        original = _fit((6.0, -0.2, 0.3), np.diag([0.1, 0.02, 0.03]))
        b1, b2 = -0.5 * math.sin(original.phase + math.pi / 6), 0.5 * math.cos(original.phase + math.pi / 6)
        refit = _fit((6.1, b1, b2), np.diag([0.1, 0.02, 0.03]))
        out = realign_population_phase(original, refit)
        assert out.phase == pytest.approx(original.phase, abs=1e-12)
        assert out.amplitude == pytest.approx(0.5, abs=1e-12)
        assert out.fixed.mu0 == 6.1

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-4, 4), st.floats(-0.9, 0.9))
    def test_wald_statistic_invariant(self, b1, b2, phase, rho):
        if math.hypot(b1, b2) < 1e-3:
            return
        cov = np.array([[0.2, 0.01, 0.02], [0.01, 0.05, rho * 0.04], [0.02, rho * 0.04, 0.08]])
        refit = _fit((1.0, b1, b2), cov)
        original = _fit((1.0, -math.sin(phase), math.cos(phase)), cov)
        out = realign_population_phase(original, refit)
        assert wald_test(out).tau == pytest.approx(wald_test(refit).tau, rel=1e-9)
        assert out.amplitude == pytest.approx(refit.amplitude, rel=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateAmplitude):
            realign_population_phase(_fit((0, 0, 0), np.eye(3)), _fit((0, 1, 0), np.eye(3)))

    def test_rotate_phase_adds_angle(self):
        beta, _ = rotate_phase(np.array([0.0, -0.3, 0.4]), np.eye(3), 0.25)
        p = CosinorParams(*beta)
        assert p.phase == pytest.approx(math.atan2(0.3, 0.4) + 0.25, abs=1e-12)


class TestRunAdjustment:
    def test_noiseless_offsets_recovered(self):
        offsets = np.array([-0.6, -0.3, 0.0, 0.3, 0.6])
        data = make_panel(np.random.default_rng(3), offsets, G=1, noise=0.0, amps=[0.8], phases=[0.4])
        for gene, rows in data.values.items():
            data.values[gene] = [r - r.mean() + 6.0 for r in rows]
        res = run_adjustment(data)
        expected = HOURS_PER_RADIAN * offsets
        diff = np.mod(res.adjustment.d_tilde - expected + 12, 24) - 12
        assert np.max(np.abs(diff)) < 0.1

    def test_no_offsets_gives_small_translations(self):
        rng = np.random.default_rng(8)
        data = make_panel(rng, np.zeros(10), G=6, noise=0.3)
        res = run_adjustment(data)
        assert np.max(np.abs(res.adjustment.d_tilde)) < 0.5
        for g in data.gene_ids:
            assert res.refits[g].amplitude == pytest.approx(res.original[g].amplitude, abs=0.05)

    def test_relative_offsets_recovered_with_noise(self):
        rng = np.random.default_rng(21)
        offsets = rng.uniform(-0.8, 0.8, 10)
        data = make_panel(rng, offsets, G=20, noise=0.2)
        res = run_adjustment(data)
        truth = HOURS_PER_RADIAN * offsets
        d = res.adjustment.d_tilde
        # shrinkage toward the population phase attenuates but keeps the order
        assert np.corrcoef(d, truth)[0, 1] > 0.97
        slope = np.polyfit(truth, d, 1)[0]
        assert 0.3 < slope < 1.0

    def test_common_time_shift_leaves_translations_unchanged(self):
        rng = np.random.default_rng(4)
        data = make_panel(rng, rng.uniform(-0.6, 0.6, 8), G=5)
        shifted = GeneMatrix(data.individual_ids, [t + 3.0 for t in data.times], dict(data.values))
        a, b = run_adjustment(data), run_adjustment(shifted)
        np.testing.assert_allclose(b.adjustment.d_tilde, a.adjustment.d_tilde, atol=1e-8)
        for g in data.gene_ids:
            assert b.refits[g].amplitude == pytest.approx(a.refits[g].amplitude, abs=1e-6)

    def test_gene_permutation_invariance(self):
        rng = np.random.default_rng(9)
        data = make_panel(rng, rng.uniform(-0.6, 0.6, 8), G=5)
        genes = data.gene_ids[::-1]
        a, b = run_adjustment(data), run_adjustment(data.subset(genes))
        np.testing.assert_allclose(a.adjustment.d_tilde, b.adjustment.d_tilde, atol=1e-12)
        for g in genes:
            np.testing.assert_allclose(a.refits[g].fixed.as_array(), b.refits[g].fixed.as_array(), atol=1e-12)

    def test_refit_equals_em_on_translated_times(self):
        rng = np.random.default_rng(12)
        data = make_panel(rng, rng.uniform(-0.6, 0.6, 6), G=2)
        res = run_adjustment(data)
        for g in data.gene_ids:
            direct = em_fit(data.series(g, res.adjustment.d_tilde))
            np.testing.assert_allclose(res.refits[g].fixed.as_array(), direct.fixed.as_array(), atol=1e-9)

    def test_realign_config(self):
        rng = np.random.default_rng(13)
        data = make_panel(rng, rng.uniform(-0.6, 0.6, 6), G=2)
        plain = run_adjustment(data)
        res = run_adjustment(data, AdjustConfig(realign=True))
        for g in data.gene_ids:
            assert res.refits[g].phase == pytest.approx(res.original[g].phase, abs=1e-10)
            assert res.refits[g].amplitude == pytest.approx(plain.refits[g].amplitude, rel=1e-12)

    def test_flat_gene_is_capped_by_default(self):
        rng = np.random.default_rng(14)
        data = make_panel(rng, rng.uniform(-0.6, 0.6, 6), G=3)
        flat = dict(data.values)
        flat["flat"] = [np.full(12, 6.0) for _ in range(6)]
        with pytest.warns(ZeroCircularVarianceWarning):
            res = run_adjustment(GeneMatrix(data.individual_ids, data.times, flat))
        assert res.adjustment.excluded_genes == []

    def test_excluded_gene_does_not_contribute(self):
        rng = np.random.default_rng(14)
        data = make_panel(rng, rng.uniform(-0.6, 0.6, 6), G=3)
        flat = dict(data.values)
        flat["flat"] = [np.full(12, 6.0) for _ in range(6)]
        config = AdjustConfig(degenerate_policy="exclude")
        with pytest.warns(AdjustmentWarning):
            res = run_adjustment(GeneMatrix(data.individual_ids, data.times, flat), config)
        base = run_adjustment(data, config)
        assert [g for g, _ in res.adjustment.excluded_genes] == ["flat"]
        np.testing.assert_allclose(res.adjustment.d_tilde, base.adjustment.d_tilde, atol=1e-12)

    def test_all_genes_excluded(self):
        flat = {"a": [np.full(12, 6.0) for _ in range(4)]}
        data = GeneMatrix(list(range(4)), [2.0 * np.arange(1, 13)] * 4, flat)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(NoUsableGenes):
                run_adjustment(data, AdjustConfig(degenerate_policy="exclude"))

    def test_needs_two_individuals(self):
        data = make_panel(np.random.default_rng(1), [0.0], G=1)
        with pytest.raises(ValueError):
            run_adjustment(data)

    def test_short_individual_is_skipped(self):
        rng = np.random.default_rng(15)
        data = make_panel(rng, rng.uniform(-0.5, 0.5, 6), G=3)
        times = list(data.times)
        times[0] = times[0][:3]
        values = {g: [r[:3] if i == 0 else r for i, r in enumerate(rows)] for g, rows in data.values.items()}
        with pytest.warns(AdjustmentWarning):
            res = run_adjustment(GeneMatrix(data.individual_ids, times, values))
        assert res.adjustment.d_tilde[0] == 0.0
        assert np.all(np.isnan(res.adjustment.d_hat[:, 0]))

    def test_pseudocode_weights_option(self):
        rng = np.random.default_rng(16)
        data = make_panel(rng, rng.uniform(-0.6, 0.6, 6), G=4)
        a = run_adjustment(data, AdjustConfig(step6_weights="pseudocode"))
        b = run_adjustment(data)
        assert np.all(np.isfinite(a.adjustment.d_tilde))
        assert not np.allclose(a.adjustment.d_tilde, b.adjustment.d_tilde)

    def test_batched_equals_single(self):
        rng = np.random.default_rng(17)
        panels = [make_panel(rng, rng.uniform(-0.6, 0.6, 5), G=2) for _ in range(3)]
        arrays = [p.padded() for p in panels]
        res = adjust_arrays(np.stack([a[0] for a in arrays]), np.stack([a[1] for a in arrays]), np.stack([a[2] for a in arrays]))
        for k, p in enumerate(panels):
            single = run_adjustment(p)
            np.testing.assert_allclose(res.d_tilde[k], single.adjustment.d_tilde, atol=1e-10)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdjustConfig(step6_weights="other")
        with pytest.raises(ValueError):
            AdjustConfig(degenerate_policy="other")
        with pytest.raises(ValueError):
            AdjustConfig(variance_form="other")
