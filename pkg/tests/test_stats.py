import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from ruleout.stats import (
    BootstrapSpec, NotApplicable, PairedCounts, bootstrap_ci, bootstrap_distribution,
    cdr_noninferiority, clopper_pearson, noninferiority_paired, one_sided_bound,
    pvalue_ci_inversion, pvalue_from_distribution, sensitivity_noninferiority,
)
from ruleout.workflow import SimTable


def naive_percentile(x, seed, n_resamples, level=0.95):
    """Independent percentile bootstrap following the (seed, b) stream protocol."""
    values = []
    for b in range(n_resamples):
        rng = np.random.default_rng([seed, b])
        values.append(np.mean(x[rng.integers(0, len(x), len(x))]))
    a = (1 - level) / 2
    return np.quantile(values, [a, 1 - a])


class TestBootstrapCI:
    def test_constant_statistic(self):
        lo, hi = bootstrap_ci(lambda d: 3.0, np.arange(10), BootstrapSpec(200, strata=None))
        assert lo == hi == 3.0

    def test_bernoulli_half(self):
        x = np.array([1.0] * 50 + [0.0] * 50)
        spec = BootstrapSpec(2000, seed=7, strata=None)
        lo, hi = bootstrap_ci(np.mean, x, spec)
        assert abs(lo - 0.40) <= 0.015 and abs(hi - 0.60) <= 0.015
        assert (lo, hi) == tuple(naive_percentile(x, 7, 2000))

    def test_single_stratum_matches_unstratified(self):
        x = np.random.default_rng(1).random(100)
        spec = BootstrapSpec(10_000, seed=3, strata=None)
        a = bootstrap_distribution(np.mean, x, spec).distribution
        b = bootstrap_distribution(np.mean, x, spec, strata=np.zeros(100)).distribution
        assert sps.ks_2samp(a, b).statistic < 0.05

    def test_stratified_keeps_stratum_sizes(self):
        strata = np.array([0] * 90 + [1] * 10)
        seen = []
        bootstrap_distribution(lambda d: seen.append((d >= 90).sum()) or 0.0,
                               np.arange(100), BootstrapSpec(50, strata=None), strata=strata)
        assert set(seen[1:]) == {10}

    def test_parallel_identical(self):
        x = np.random.default_rng(2).random(150)
        a = bootstrap_ci(np.mean, x, BootstrapSpec(999, seed=5, strata=None))
        b = bootstrap_ci(np.mean, x, BootstrapSpec(999, seed=5, strata=None, n_jobs=4))
        assert repr(a) == repr(b)

    def test_redraws_counted(self):
        x = np.array([0.0] * 95 + [1.0] * 5)

        def stat(d):
            if d.sum() == 0:
                raise NotApplicable("no ones")
            return float(d.mean())

        res = bootstrap_distribution(stat, x, BootstrapSpec(500, seed=1, strata=None))
        assert res.redrawn > 0 and not np.isnan(res.distribution).any()

    def test_mostly_undefined_rejected(self):
        # P(fewer than two ones in a resample) is about 0.74
        x = np.array([0.0] * 199 + [1.0])

        def stat(d):
            if d.sum() < 2:
                raise NotApplicable("too few ones")
            return 1.0

        with pytest.raises(NotApplicable):
            bootstrap_ci(stat, x, BootstrapSpec(200, seed=1, strata=None))

    def test_patient_clusters_stay_together(self):
        cols = {"patient_id": np.array(["a", "a", "b", "c", "c", "c"], dtype=object),
                "score": np.arange(6.0)}
        t = SimTable(cols)

        def stat(d):
            ids = list(d.patient_id)
            for p, k in (("a", 2), ("c", 3)):
                assert ids.count(p) % k == 0
            return 0.0

        bootstrap_distribution(stat, t, BootstrapSpec(100, unit="patient"))

    def test_bca_close_to_percentile_for_symmetric(self):
        x = np.random.default_rng(4).normal(size=200)
        p = bootstrap_ci(np.mean, x, BootstrapSpec(2000, seed=1, strata=None))
        b = bootstrap_ci(np.mean, x, BootstrapSpec(2000, seed=1, strata=None, method="bca"))
        assert abs(p[0] - b[0]) < 0.02 and abs(p[1] - b[1]) < 0.02

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            BootstrapSpec(0)
        with pytest.raises(ValueError):
            BootstrapSpec(level=1.0)


class TestPValue:
    def test_unanimous_exceedance(self):
        x = np.full(30, 2.0)
        spec = BootstrapSpec(1000, strata=None)
        assert pvalue_ci_inversion(np.mean, x, spec) == 1 / 1000

    def test_null_centered(self):
        x = np.r_[np.linspace(-1, 1, 201)]
        p = pvalue_ci_inversion(np.mean, x, BootstrapSpec(4000, seed=2, strata=None))
        assert 0.45 < p < 0.55

    def test_twenty_exam_callback_reduction(self):
        n = 20
        bad = np.array([True] * 5 + [False] * 15)
        out = np.array([True, True, False, False, False] + [False] * 15)
        cols = {"label": np.array([4] * 5 + [0] * 15), "incorrect_callback": bad,
                "prevented_callback": out, "score": np.zeros(n)}
        t = SimTable(cols)

        def reduction(d):
            den = d.incorrect_callback.sum()
            if den == 0:
                raise NotApplicable("no callbacks")
            return d.prevented_callback.sum() / den

        assert reduction(t) == 2 / 5
        spec = BootstrapSpec(2000, seed=11)
        p = pvalue_ci_inversion(reduction, t, spec)
        # oracle: stratified resamples redraw the 5 callback exams with replacement
        hits = 0
        for b in range(2000):
            rng = np.random.default_rng([11, b])
            rng.integers(0, 15, 15)  # the label-0 stratum is drawn first
            cb = rng.integers(0, 5, 5)
            hits += out[:5][cb].sum() == 0
        assert p == min(1.0, (hits + 1) / 2000)

    def test_consistent_with_one_sided_bounds(self):
        rng = np.random.default_rng(8)
        dist = rng.normal(0.05, 0.05, 200)
        for j in range(1, 201):
            alpha = j / 200
            assert (pvalue_from_distribution(dist, 0.0) <= alpha) == \
                (one_sided_bound(dist, alpha) > 0.0)
            assert (pvalue_from_distribution(dist, 0.0, "less") <= alpha) == \
                (one_sided_bound(dist, alpha, "less") < 0.0)


class TestNonInferiority:
    def test_worked_example(self):
        c = PairedCounts(n11=8, n10=2, n01=0, n00=990)
        wald = noninferiority_paired(c, 0.05, "wald")
        score = noninferiority_paired(c, 0.05)
        assert wald.difference == 0.002
        assert abs(wald.z - 33.975) < 0.01 and wald.p_value < 0.001
        assert score.p_value < 0.001 and score.non_inferior

    def test_small_margin_not_concluded(self):
        c = PairedCounts(8, 2, 0, 990)
        for method in ("score", "wald"):
            assert not noninferiority_paired(c, 0.001, method).non_inferior

    def test_no_discordance_uses_restricted_variance(self):
        r = noninferiority_paired(PairedCounts(50, 0, 0, 50), 0.05)
        assert r.difference == 0 and r.non_inferior
        with pytest.raises(NotApplicable):
            noninferiority_paired(PairedCounts(50, 0, 0, 50), 0.05, "wald")

    def test_published_zero_loss_p_value(self):
        # 101 cancers, no detection lost, 5% margin: reported p = 0.01
        r = noninferiority_paired(PairedCounts(96, 0, 0, 5), 0.05)
        assert round(r.p_value, 2) == 0.01

    def test_zero_margin(self):
        assert noninferiority_paired(PairedCounts(5, 3, 0, 92), 0.0).p_value >= 0.5
        with pytest.raises(NotApplicable):
            noninferiority_paired(PairedCounts(5, 0, 0, 95), 0.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            noninferiority_paired(PairedCounts(0, 0, 0, 0), 0.05)
        with pytest.raises(ValueError):
            PairedCounts(-1, 0, 0, 1)

    @settings(max_examples=200)
    @given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 500),
           st.floats(0.001, 0.2), st.floats(0.001, 0.2))
    def test_monotone_in_margin(self, n10, n01, n00, d1, d2):
        c = PairedCounts(10, n10, n01, n00)
        lo, hi = sorted((d1, d2))
        assert noninferiority_paired(c, hi).p_value <= noninferiority_paired(c, lo).p_value + 1e-12

    @settings(max_examples=200)
    @given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 500), st.floats(0.001, 0.2))
    def test_monotone_in_n10(self, n10, n01, n00, d):
        a = noninferiority_paired(PairedCounts(10, n10, n01, n00), d).p_value
        b = noninferiority_paired(PairedCounts(10, n10 + 1, n01, n00), d).p_value
        assert b >= a - 1e-12


def paired_table(n, lost):
    rad = np.zeros(n, dtype=bool)
    rad[: 5 * n // 1000 + lost] = True
    comb = rad.copy()
    comb[:lost] = False
    return SimTable({"radiologist_tp": rad, "combined_tp": comb, "truth": rad.copy(),
                     "score": np.zeros(n)})


class TestWorkflowTests:
    def test_cdr_loss_of_one_per_thousand(self):
        t = paired_table(100_000, 100)
        assert not cdr_noninferiority(t, 0.25).non_inferior
        assert cdr_noninferiority(t, 2.0).non_inferior

    def test_zero_loss_noninferior(self):
        t = paired_table(100_000, 0)
        assert cdr_noninferiority(t, 0.25).non_inferior

    def test_identical_workflows(self):
        assert cdr_noninferiority(paired_table(5000, 0)).difference == 0.0

    def test_sensitivity_needs_cancers(self):
        t = SimTable({"radiologist_tp": np.zeros(3, bool), "combined_tp": np.zeros(3, bool),
                      "truth": np.zeros(3, bool), "score": np.zeros(3)})
        with pytest.raises(NotApplicable):
            sensitivity_noninferiority(t)


def test_clopper_pearson():
    lo, hi = clopper_pearson(99, 100)
    assert lo < 0.99 < hi and hi < 1.0
    assert clopper_pearson(0, 10)[0] == 0.0 and clopper_pearson(10, 10)[1] == 1.0
    assert not math.isnan(lo)
