"""Acceptance criteria 1-10, one test class per criterion."""

import math
import time
from dataclasses import replace
from datetime import timedelta
from fractions import Fraction

import numpy as np
import pytest

import oracle
from helpers import D0, K, L, ev, exam, malignant
from ruleout.calibration import select_threshold, sweep_operating_points
from ruleout.cohort import (
    WINDOWS, ReaderOpinion, Role, ground_truth, radiologist_positive, split_patients,
)
from ruleout.io import IngestError, ingest_dir, write_cohort
from ruleout.metrics import METRICS, PrevalenceWeights, compute_metrics, evaluate
from ruleout.stats import (
    BootstrapSpec, NotApplicable, PairedCounts, bootstrap_ci, clopper_pearson,
    noninferiority_paired, pvalue_ci_inversion,
)
from ruleout.synth import SynthConfig, generate
from ruleout.workflow import FlowRates, as_table, flow_from_rates, simulate_cohort

NAMES = METRICS + ("specificity_gain",)
LABELS = [L.N, L.S, L.D, L.P, L.H, L.M, L.I]


def acceptance(number, title):
    return pytest.mark.acceptance(number, title)


def random_opinions(rng, when, recalled):
    day = when + timedelta(days=1)
    if rng.random() < 0.6:
        a = 0 if recalled else int(rng.choice([1, 2]))
        return [ReaderOpinion("R1", Role.SINGLE, a, day)]
    first, second = (int(rng.choice([0, 1, 2])) for _ in range(2))
    ops = [ReaderOpinion("R1", Role.FIRST, first, day),
           ReaderOpinion("R2", Role.SECOND, second, day)]
    if (first == 0) != (second == 0) and rng.random() < 0.7:
        ops.append(ReaderOpinion("A1", Role.ARBITRATION, int(rng.choice([0, 1])), day))
    return ops


def random_exam(rng, k):
    label = LABELS[rng.choice(len(LABELS), p=[.3, .15, .1, .1, .05, .2, .1])]
    events = None
    if label in (L.M, L.I):
        month = int(rng.integers(0, 30))
        events = [ev(K.BIOPSY, month), malignant(month)]
    recalled = rng.random() < (0.8 if label in (L.M, L.D, L.P, L.H) else 0.2)
    x = exam(label, exam_id=f"E{k}", patient_id=f"P{k // 2}",
             score=int(rng.integers(0, 11)) / 10, events=events)
    return replace(x, opinions=random_opinions(rng, D0, recalled))


def random_targets(rng, exams):
    present = sorted({x.exam_label for x in exams})
    raw = rng.integers(1, 20, len(present))
    fracs = [Fraction(int(r), int(raw.sum())) for r in raw]
    return {lab.name: float(f) for lab, f in zip(present, fracs)}


@acceptance(1, "oracle equivalence on 100 random cohorts of <= 20 exams")
class TestOracleEquivalence:
    def test_every_metric_matches(self):
        rng = np.random.default_rng(101)
        start = time.perf_counter()
        checked = 0
        for trial in range(100):
            exams = [random_exam(rng, k) for k in range(int(rng.integers(1, 21)))]
            threshold = int(rng.integers(0, 12)) / 10
            window = int(rng.choice([6, 12, 24]))
            targets = random_targets(rng, exams) if trial % 2 else None
            weights = None if targets is None else PrevalenceWeights(targets)
            rep = evaluate(simulate_cohort(exams, threshold, window), weights=weights)
            want = oracle.metrics(exams, threshold, window, None if targets is None else
                                  {k: Fraction(v) for k, v in targets.items()})
            for name in NAMES:
                got = rep.metrics[name].value
                if want[name] is None:
                    assert math.isnan(got), (trial, name)
                else:
                    assert abs(got - float(want[name])) <= 1e-12, (trial, name)
                    checked += 1
        assert checked > 500
        assert time.perf_counter() - start < 10


@acceptance(2, "threshold correctness on 1000 random validation sets")
class TestThresholdCorrectness:
    def test_exhaustive(self):
        rng = np.random.default_rng(202)
        start = time.perf_counter()
        for _ in range(1000):
            n_pos = int(rng.integers(10, 501))
            n_neg = int(rng.integers(0, 1000))
            grid = int(rng.choice([20, 100, 10_000]))  # coarse grids force ties
            pos = rng.integers(0, grid + 1, n_pos) / grid
            neg = rng.integers(0, grid + 1, n_neg) / grid
            target = float(rng.choice([0.9, 0.95, 0.97, 0.99, 1.0, rng.uniform(0.5, 1)]))
            t = select_threshold(np.r_[pos, neg], [True] * n_pos + [False] * n_neg, target)
            # sensitivity at every distinct candidate, compared in exact arithmetic
            cands = np.unique(np.r_[pos, neg])
            hits = n_pos - np.searchsorted(np.sort(pos), cands, side="left")
            ok = [Fraction(int(h), n_pos) >= Fraction(repr(target)) for h in hits]
            i = int(np.searchsorted(cands, t))
            assert cands[i] == t and ok[i]
            assert not any(ok[i + 1:])
        assert time.perf_counter() - start < 30


def synth_cohorts(count, n_patients=400, **kw):
    for seed in range(count):
        yield generate(SynthConfig(n_patients=n_patients, seed=1000 + seed, **kw))


@acceptance(3, "combined = radiologist x relative sensitivity")
class TestIdentity:
    def test_synthetic_cohorts(self):
        for cohort in synth_cohorts(30, double_reading=True,
                                    exams_per_patient={1: 0.6, 2: 0.4}):
            for threshold in (0.0, 0.05, 0.1, 0.3, 0.6, 1.0):
                for window in (6, 12, 24):
                    m = compute_metrics(simulate_cohort(cohort, threshold, window))
                    assert abs(m["combined_sensitivity"] - m["radiologist_sensitivity"]
                               * m["relative_sensitivity"]) <= 1e-12

    def test_random_small_cohorts(self):
        rng = np.random.default_rng(303)
        for _ in range(300):
            exams = [random_exam(rng, k) for k in range(int(rng.integers(1, 21)))]
            m = compute_metrics(simulate_cohort(exams, int(rng.integers(0, 12)) / 10))
            if math.isnan(m["relative_sensitivity"]):
                continue
            assert abs(m["combined_sensitivity"] - m["radiologist_sensitivity"]
                       * m["relative_sensitivity"]) <= 1e-12


@acceptance(4, "monotonicity over >= 50 random cohorts")
class TestMonotonicity:
    # cancer-enriched so every validation half holds cancers to calibrate on
    enriched = {"N": .5, "S": .15, "D": .1, "P": .1, "H": .03, "M": .08, "I": .04}
    cohorts = list(synth_cohorts(50, n_patients=300, exams_per_patient={1: 0.7, 2: 0.3},
                                 subclass_prevalences=enriched))

    def test_rule_out_rate_in_threshold(self):
        grid = np.linspace(0, 1, 21)
        for cohort in self.cohorts:
            rates = [compute_metrics(simulate_cohort(cohort, t))["rule_out_rate"]
                     for t in grid]
            assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_ground_truth_in_window(self):
        for k, cohort in enumerate(self.cohorts):
            region = "UK" if k % 2 else "US"
            for x in cohort:
                x = replace(x, region=region)
                truths = [ground_truth(x, w) for w in WINDOWS[region]]
                assert truths == sorted(truths)

    def test_sweep_rule_out_in_target(self):
        targets = [0.8, 0.85, 0.9, 0.93, 0.95, 0.97, 0.99, 1.0]
        for k, cohort in enumerate(self.cohorts):
            _, val, test = split_patients(cohort, (0, 0.5, 0.5), seed=k)
            rows = sweep_operating_points(
                [x.device_score for x in val], [ground_truth(x, 12) for x in val],
                [x.device_score for x in test], [ground_truth(x, 12) for x in test],
                [radiologist_positive(x) for x in test], targets)
            rates = [r.test_rule_out_rate for r in rows]
            assert [r.target for r in rows] == targets
            assert all(a >= b for a, b in zip(rates, rates[1:]))


def wustl_rates():
    n, cancers, benign = 11_592, 101, 181
    cdr = 5.55
    fp = (1 - 0.889) * (n - cancers) / n
    return FlowRates(rule_out_rate=0.416, callback_rate=fp + cdr / 1000,
                     fp_callback_rate=fp, callback_reduction=0.311,
                     biopsy_rate=benign / n + cdr / 1000, benign_biopsy_rate=benign / n,
                     biopsy_reduction=0.074, cdr_standard=cdr, cdr_ruleout=cdr)


@acceptance(5, "flow arithmetic at 10,000 exams within 0.1 points")
class TestFlowArithmetic:
    flow = flow_from_rates(wustl_rates(), 10_000)

    @pytest.mark.parametrize("name,value", [("rule_out_rate", 0.416),
                                            ("callback_reduction", 0.311),
                                            ("biopsy_reduction", 0.074)])
    def test_recomputed_percentage(self, name, value):
        got = self.flow.recomputed()[name]
        assert abs(100 * got - 100 * value) <= 0.1, f"{name}: {100 * got:.2f}%"

    def test_branches_consistent(self):
        for b in (self.flow.standard, self.flow.ruleout):
            assert b["ruled_out"] + b["no_callback"] + b["callbacks"] == 10_000
            assert b["false_positive_callbacks"] <= b["callbacks"]
            assert b["benign_biopsies"] <= b["biopsies"]


@acceptance(6, "seeded 100,000-exam end-to-end regression")
class TestEndToEnd:
    def test_regression(self):
        start = time.perf_counter()
        cohort = generate(SynthConfig(n_patients=100_000, seed=2026))
        assert len(cohort) == 100_000
        _, val, test = split_patients(cohort, (0.0, 0.1, 0.9), seed=6)
        y = [ground_truth(x, 12) for x in val]
        threshold = select_threshold([x.device_score for x in val], y, 0.99)
        table = as_table(simulate_cohort(test, threshold))
        lo, hi = clopper_pearson(int(table.combined_tp.sum()),
                                 int(table.radiologist_tp.sum()))
        assert lo <= 0.99 <= hi, (lo, hi)

        m = compute_metrics(table)
        assert 0.90 < m["auc"] < 1.0
        assert m["fp_callback_reduction"] > 0

        def reduction(d):
            den = d.incorrect_callback.sum()
            if den == 0:
                raise NotApplicable("no incorrect callbacks")
            return d.prevented_callback.sum() / den

        p = pvalue_ci_inversion(reduction, table,
                                BootstrapSpec(2000, seed=6, n_jobs=4))
        assert p < 0.05
        assert time.perf_counter() - start < 300


@acceptance(7, "paired non-inferiority worked example")
class TestNonInferiority:
    counts = PairedCounts(n11=8, n10=2, n01=0, n00=990)

    @pytest.mark.parametrize("method", ["score", "wald"])
    def test_worked_example(self, method):
        r = noninferiority_paired(self.counts, 0.05, method)
        assert r.p_value < 0.001 and r.non_inferior

    @pytest.mark.parametrize("method", ["score", "wald"])
    def test_small_margin_not_concluded(self, method):
        assert not noninferiority_paired(self.counts, 0.001, method).non_inferior

    @pytest.mark.parametrize("margin", [0.05, 0.001])
    def test_score_and_wald_agree(self, margin):
        z_score = noninferiority_paired(self.counts, margin, "score").z
        z_wald = noninferiority_paired(self.counts, margin, "wald").z
        assert abs(z_score - z_wald) < 0.05, (z_score, z_wald)


@acceptance(8, "bootstrap coverage and parallel determinism")
class TestBootstrapCalibration:
    def test_coverage(self):
        start = time.perf_counter()
        covered = 0
        for trial in range(500):
            x = (np.random.default_rng([8, trial]).random(200) < 0.3).astype(float)
            lo, hi = bootstrap_ci(np.mean, x, BootstrapSpec(1000, seed=trial, strata=None))
            covered += lo <= 0.3 <= hi
        assert covered / 500 >= 0.92, covered
        assert time.perf_counter() - start < 120

    def test_parallel_byte_identical(self):
        for trial in range(20):
            x = (np.random.default_rng([8, trial]).random(200) < 0.3).astype(float)
            seq = bootstrap_ci(np.mean, x, BootstrapSpec(1000, seed=trial, strata=None))
            par = bootstrap_ci(np.mean, x, BootstrapSpec(1000, seed=trial, strata=None,
                                                          n_jobs=4))
            assert np.array(seq).tobytes() == np.array(par).tobytes()


@acceptance(9, "prevalence adjustment identity and hand example")
class TestPrevalence:
    def test_observed_targets_change_nothing(self):
        for cohort in synth_cohorts(10, n_patients=2000):
            for threshold in (0.05, 0.2):
                sim = simulate_cohort(cohort, threshold)
                plain = compute_metrics(sim)
                weights = PrevalenceWeights.observed([x.exam_label for x in cohort])
                adjusted = compute_metrics(sim, weights)
                for name in NAMES:
                    assert abs(plain[name] - adjusted[name]) <= 1e-12, name

    def test_hand_weighted_cdr(self):
        # 6 N, 2 P, 2 M; targets N 0.90, P 0.08, M 0.02 give per-exam weights
        # N 0.9/0.6 = 1.5, P 0.08/0.2 = 0.4, M 0.02/0.2 = 0.1; total weight 10.
        # Both cancers are recalled, one scores below the threshold:
        # CDR standard = 1000 * 0.2 / 10 = 20, rule-out = 1000 * 0.1 / 10 = 10.
        exams = [exam(L.N, exam_id=f"n{k}", score=0.1) for k in range(6)]
        exams += [exam(L.P, exam_id=f"p{k}", score=0.6, assessment=0) for k in range(2)]
        exams += [exam(L.M, exam_id="m0", score=0.9, assessment=0),
                  exam(L.M, exam_id="m1", score=0.2, assessment=0)]
        weights = PrevalenceWeights({"N": 0.90, "P": 0.08, "M": 0.02})
        m = compute_metrics(simulate_cohort(exams, 0.5), weights)
        assert abs(m["cdr_radiologists"] - 20.0) <= 1e-12
        assert abs(m["cdr_combined"] - 10.0) <= 1e-12


@acceptance(10, "ingestion rejects malformed fixtures with line-accurate diagnostics")
class TestIngestion:
    cohort = generate(SynthConfig(n_patients=60, seed=10, double_reading=True,
                                  exams_per_patient={1: 0.5, 2: 0.5}))

    def export(self, path):
        write_cohort(self.cohort, path)
        return path

    @staticmethod
    def append(path, row):
        text = path.read_text()
        path.write_text(text + row + "\n")
        return text.count("\n") + 1

    @staticmethod
    def issues(path):
        with pytest.raises(IngestError) as exc:
            ingest_dir(path)
        return [str(i) for i in exc.value.issues]

    def test_round_trip(self, tmp_path):
        got = ingest_dir(self.export(tmp_path))
        assert got.exams == self.cohort and not got.warnings

    def test_orphan_rows(self, tmp_path):
        d = self.export(tmp_path)
        line = self.append(d / "opinions.csv", "NOPE,R01,first,1,2017-01-01")
        assert self.issues(d) == [f"opinions.csv:{line} [exam_id] no exam 'NOPE' in "
                                  f"exams.csv"]

    def test_out_of_range_score(self, tmp_path):
        d = self.export(tmp_path)
        f = d / "scores.csv"
        rows = f.read_text().splitlines()
        rows[7] = rows[7].split(",")[0] + ",-0.01"
        f.write_text("\n".join(rows) + "\n")
        assert self.issues(d) == ["scores.csv:8 [score] score -0.01 outside [0, 1]"]

    def test_pre_exam_event(self, tmp_path):
        d = self.export(tmp_path)
        x = self.cohort[5]
        day = x.exam_date - timedelta(days=1)
        line = self.append(d / "events.csv", f"{x.exam_id},diagnostic_exam,{day},negative")
        (msg,) = self.issues(d)
        assert msg.startswith(f"events.csv:{line} [date] diagnostic_exam dated {day}")

    def test_duplicate_ids(self, tmp_path):
        d = self.export(tmp_path)
        f = d / "exams.csv"
        dup = f.read_text().splitlines()[3]
        line = self.append(f, dup)
        (msg,) = self.issues(d)
        assert msg == (f"exams.csv:{line} [exam_id] duplicate exam_id "
                       f"'{dup.split(',')[0]}' (first on line 4)")
