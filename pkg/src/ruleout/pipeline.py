"""End-to-end run: split, calibrate, simulate, evaluate per stratum, write outputs."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import calibrate, roc_curve, sweep_operating_points
from .cohort import (
    INTERVAL_MONTHS, ValidationError, check_window, ground_truth, radiologist_positive,
    split_patients,
)
from .io import write_csv, write_json
from .metrics import (
    METRICS, MetricsReport, PrevalenceWeights, evaluate, multi_window_sensitivity,
    per_reader_metrics, prevalence_adjust,
)
from .stats import BootstrapSpec, NotApplicable
from .workflow import as_table, normalize_flow, simulate_cohort

ALL = "All"


class PipelineError(Exception):
    """Failure attributed to a pipeline stage; ``cause`` keeps the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    region: str | None = None
    prediction_windows: list | None = None
    interval_window_months: int | None = None
    target_sensitivities: list = field(default_factory=lambda: [0.99, 0.97])
    thresholds: list | None = None
    prevalence: dict | None = None
    bootstrap: BootstrapSpec | None = field(default_factory=BootstrapSpec)
    split_fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    min_pos: int = 10
    min_neg: int = 10
    volume: int = 10_000
    comparison_points: list = field(default_factory=list)
    opinion_mode: str = "final"
    sweep_targets: list | None = None
    sites: list | None = None
    scanners: list | None = None

    def __post_init__(self):
        if isinstance(self.bootstrap, dict):
            self.bootstrap = BootstrapSpec(**self.bootstrap)
        self.split_fractions = tuple(self.split_fractions)
        if self.region is not None:
            if self.region not in INTERVAL_MONTHS:
                raise ValueError(f"region must be US or UK, got {self.region!r}")
            if self.interval_window_months is None:
                self.interval_window_months = INTERVAL_MONTHS[self.region]
            if self.interval_window_months != INTERVAL_MONTHS[self.region]:
                raise ValueError(f"interval_window_months {self.interval_window_months}"
                                 f" inconsistent with region {self.region}")
            for w in self.windows:
                check_window(self.region, w)
        elif self.interval_window_months not in (None, 12, 36):
            raise ValueError("interval_window_months must be 12 or 36")
        for t in self.target_sensitivities:
            if not 0 < t <= 1:
                raise ValueError(f"target sensitivity {t} outside (0, 1]")
        if self.opinion_mode not in ("final", "first"):
            raise ValueError("opinion_mode must be 'final' or 'first'")
        if self.prevalence is not None:
            PrevalenceWeights(self.prevalence)

    @property
    def windows(self) -> list:
        if self.prediction_windows:
            return list(self.prediction_windows)
        return [self.interval_window_months or 12]

    @property
    def calibration_window(self) -> int:
        return self.windows[0]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown RunConfig keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bootstrap"] = None if self.bootstrap is None else asdict(self.bootstrap)
        d["split_fractions"] = list(self.split_fractions)
        return d


@dataclass
class RunResult:
    report: MetricsReport
    thresholds: dict  # target (or "explicit_k") -> threshold
    outputs: dict = field(default_factory=dict)  # file name -> sha256


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValidationError, NotApplicable, PipelineError):
        raise
    except ValueError as exc:
        raise PipelineError(name, exc) from exc


def _weights(cfg):
    return None if cfg.prevalence is None else PrevalenceWeights(cfg.prevalence)


def _truths(exams, window):
    return np.array([ground_truth(x, window) for x in exams], dtype=bool)


def _scores(exams):
    missing = [x.exam_id for x in exams if x.device_score is None]
    if missing:
        raise ValidationError(f"{len(missing)} exams lack a device score, "
                              f"e.g. {missing[:5]}")
    return np.array([x.device_score for x in exams])


def select_thresholds(cfg: RunConfig, cohort):
    """Thresholds keyed by target and the exams to evaluate on.

    Explicit thresholds are used verbatim on the whole cohort; otherwise they
    are calibrated on the validation split and evaluated on the test split.
    """
    if cfg.thresholds:
        return {f"explicit_{k}": float(t) for k, t in enumerate(cfg.thresholds)}, \
            None, list(cohort)
    _, val, test = split_patients(cohort, cfg.split_fractions, cfg.split_seed)
    if not val or not test:
        raise PipelineError("split", "validation or test split is empty")
    y = _truths(val, cfg.calibration_window)
    if not y.any():
        raise NotApplicable("no cancers in the validation split", count=0)
    table = calibrate(_scores(val), y, cfg.target_sensitivities)
    return {t: e.threshold for t, e in table.entries.items()}, val, test


def _strata(exams, cfg):
    sites = sorted({x.site for x in exams})
    scanners = sorted({x.scanner for x in exams})
    if cfg.sites:
        sites = [s for s in sites if s in cfg.sites]
    if cfg.scanners:
        scanners = [s for s in scanners if s in cfg.scanners]
    for site in [ALL] + sites:
        for scanner in [ALL] + scanners:
            yield site, scanner


def _select(table, site, scanner):
    mask = np.ones(len(table), dtype=bool)
    if site != ALL:
        mask &= table.site == site
    if scanner != ALL:
        mask &= table.scanner == scanner
    return table[np.nonzero(mask)[0]]


def _slim(table):
    # bootstrap resamples copy every column; keep only what metrics read
    keep = ("label", "truth", "score", "ruled_out", "original_assessment",
            "effective_assessment", "device_tp", "radiologist_tp", "combined_tp",
            "incorrect_callback", "incorrect_biopsy", "prevented_callback",
            "prevented_benign_biopsy", "patient_id", "n_biopsy")
    return type(table)({k: table.columns[k] for k in keep}, table.weight)


def _filtered(exams, cfg):
    return [x for x in exams
            if (not cfg.sites or x.site in cfg.sites)
            and (not cfg.scanners or x.scanner in cfg.scanners)]


def run_pipeline(cfg: RunConfig, cohort, out_dir=None) -> RunResult:
    """Run every stage and, with ``out_dir``, write the report files."""
    cohort = list(cohort)
    if not cohort:
        raise ValidationError("empty cohort")
    if cfg.region is not None:
        wrong = {x.region for x in cohort} - {cfg.region}
        if wrong:
            raise ValidationError(f"cohort contains regions {sorted(wrong)} but the "
                                  f"run is configured for {cfg.region}")
    for x in cohort:
        for w in cfg.windows:
            check_window(x.region, w)
    weights = _weights(cfg)
    thresholds, val, test = _stage("calibrate", select_thresholds, cfg, cohort)
    test = _filtered(test, cfg)
    if not test:
        raise ValidationError("no exams left after stratum filters")

    report = MetricsReport()
    sims = {}
    for window in cfg.windows:
        for target, thr in thresholds.items():
            sim = as_table(_stage("simulate", simulate_cohort, test, thr, window,
                                  cfg.opinion_mode))
            sims[window, target] = sim
            for site, scanner in _strata(test, cfg):
                part = _select(sim, site, scanner)
                if len(part) == 0:
                    continue
                key = {"site": site, "scanner": scanner, "window": window,
                       "target": target, "threshold": thr}
                report.strata.append(_stage("metrics", evaluate, _slim(part), key,
                                            weights, cfg.bootstrap))
    result = RunResult(report, thresholds)
    if out_dir is not None:
        result.outputs = write_outputs(cfg, result, sims, cohort, val, test, out_dir)
    return result


def _table2_rows(report):
    names = METRICS + ("specificity_gain",)
    cols = ["site", "scanner", "window", "target", "threshold", "n_exams", "n_cancers",
            "n_radiologist_tp", "n_incorrect_callback", "n_incorrect_biopsy"]
    for m in names:
        cols += [m, f"{m}_low", f"{m}_high", f"{m}_p", f"{m}_small_sample"]
    rows = []
    for s in report.strata:
        row = [s.key[k] for k in ("site", "scanner", "window", "target", "threshold")]
        row += [s.counts[k] for k in ("n_exams", "n_cancers", "n_radiologist_tp",
                                      "n_incorrect_callback", "n_incorrect_biopsy")]
        for m in names:
            e = s.metrics[m]
            row += [e.value, e.low, e.high, e.p_value, "*" if e.small_sample else ""]
        rows.append(row)
    return cols, rows


def _roc_rows(cfg, sims, test, thresholds):
    rows = []
    first = next(iter(thresholds))
    for window in cfg.windows:
        base = sims[window, first]
        for site, scanner in _strata(test, cfg):
            part = _select(base, site, scanner)
            if not part.truth.any() or part.truth.all():
                continue
            w = None if cfg.prevalence is None else \
                prevalence_adjust(part.label, PrevalenceWeights(cfg.prevalence))
            try:
                curve = roc_curve(part.score, part.truth, w)
            except ValueError:
                continue
            key = [site, scanner, window]
            rows += [key + ["curve", "", thr, tpr, fpr] for thr, tpr, fpr in curve.points]
            for target, thr in thresholds.items():
                p = _select(sims[window, target], site, scanner)
                ww = np.ones(len(p)) if w is None else w
                neg = ~p.truth
                tpr = p.device_tp.sum() / p.truth.sum()
                fpr = ww[neg & ~p.ruled_out].sum() / ww[neg].sum()
                rows.append(key + ["operating_point", str(target), thr, tpr, fpr])
            rad_tpr = part.radiologist_tp.sum() / part.truth.sum()
            neg = ~part.truth
            ww = np.ones(len(part)) if w is None else w
            rad_fpr = ww[neg & (part.original_assessment == 0)].sum() / ww[neg].sum()
            rows.append(key + ["radiologists", "standard", math.nan, rad_tpr, rad_fpr])
            for cp in cfg.comparison_points:
                rows.append(key + ["comparison", cp["name"], math.nan,
                                   float(cp["tpr"]), float(cp["fpr"])])
    return ["site", "scanner", "window", "kind", "name", "threshold", "tpr", "fpr"], rows


def write_outputs(cfg, result, sims, cohort, val, test, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = _weights(cfg)
    cw = cfg.calibration_window

    write_csv(out / "table2.csv", *_table2_rows(result.report))

    flows = {}
    for target in result.thresholds:
        sim = sims[cw, target]
        w = None if weights is None else prevalence_adjust(sim.label, weights)
        flows[str(target)] = _stage("flow", normalize_flow, sim, cfg.volume, w).to_dict()
    write_json(out / "flow.json", {"volume": cfg.volume, "window": cw, "targets": flows})

    write_csv(out / "roc_points.csv", *_roc_rows(cfg, sims, test, result.thresholds))

    sweep_cols = ["target", "threshold", "val_sensitivity", "val_rule_out_rate",
                  "test_rule_out_rate", "test_absolute_sensitivity",
                  "test_relative_sensitivity"]
    sweep = []
    if val is not None:
        vy = _truths(val, cw)
        ty = _truths(test, cw)
        rad = [radiologist_positive(x, cfg.opinion_mode) for x in test]
        sweep = _stage("sweep", sweep_operating_points, _scores(val), vy, _scores(test),
                       ty, rad, cfg.sweep_targets,
                       test_weights=None if weights is None
                       else prevalence_adjust([x.exam_label for x in test], weights))
    write_csv(out / "sweep.csv", sweep_cols,
              ([getattr(r, c) for c in sweep_cols] for r in sweep))

    reader_cols = ["target", "threshold", "reader_id", "included", "reason", "n_pos",
                   "n_neg", "sensitivity", "sensitivity_ruleout", "specificity",
                   "specificity_ruleout"]
    reader_rows, window_rows = [], []
    for target, thr in result.thresholds.items():
        sim = sims[cw, target]
        tab = per_reader_metrics(test, sim, cfg.min_pos, cfg.min_neg)
        for r in tab.rows:
            reader_rows.append([target, thr, r.reader_id, True, "", r.n_pos, r.n_neg,
                                r.sensitivity, r.sensitivity_ruleout, r.specificity,
                                r.specificity_ruleout])
        for reader, reason in tab.excluded:
            reader_rows.append([target, thr, reader, False, reason] + [math.nan] * 6)
        windows = sorted(set(cfg.windows))
        for row in multi_window_sensitivity(test, sim, windows, cfg.opinion_mode):
            window_rows.append([target, thr, row.window, row.n_cancers,
                                row.radiologist_sensitivity, row.absolute_sensitivity,
                                row.relative_sensitivity, row.combined_sensitivity])
    write_csv(out / "readers.csv", reader_cols, reader_rows)
    write_csv(out / "windows.csv", ["target", "threshold", "window", "n_cancers",
                                    "radiologist_sensitivity", "absolute_sensitivity",
                                    "relative_sensitivity", "combined_sensitivity"],
              window_rows)

    digests = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
               for p in sorted(out.iterdir()) if p.suffix in (".csv", ".json")
               and p.name != "run_manifest.json"}
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"split": cfg.split_seed,
                  "bootstrap": None if cfg.bootstrap is None else cfg.bootstrap.seed},
        "thresholds": {str(k): v for k, v in result.thresholds.items()},
        "cohort": {"n_exams": len(cohort), "n_patients": len({x.patient_id for x in cohort}),
                   "n_validation": None if val is None else len(val),
                   "n_evaluated": len(test)},
        "outputs": digests,
    }
    write_json(out / "run_manifest.json", manifest)
    return digests
