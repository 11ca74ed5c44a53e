"""Bootstrap intervals, CI-inversion p-values and paired non-inferiority tests.

Resample ``b`` always draws from ``numpy.random.default_rng([seed, b])``, so
distributions are identical whether resamples run sequentially, in
parallel, or in any order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st

from .workflow import as_table


class NotApplicable(ValueError):
    """A statistic whose denominator is empty; ``count`` is that denominator."""

    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


@dataclass(frozen=True)
class BootstrapSpec:
    n_resamples: int = 10_000
    level: float = 0.95
    strata: str | None = "label"
    unit: str = "exam"
    method: str = "percentile"
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_resamples < 1:
            raise ValueError("n_resamples must be at least 1")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.unit not in ("exam", "patient"):
            raise ValueError("unit must be 'exam' or 'patient'")
        if self.method not in ("percentile", "bca"):
            raise ValueError("method must be 'percentile' or 'bca'")


@dataclass
class BootstrapResult:
    distribution: np.ndarray  # (n_resamples,) or (n_resamples, k)
    estimate: object
    redrawn: int = 0
    undefined: object = 0


def _groups(data, spec, strata):
    """Index groups resampled independently, plus the resampling units."""
    n = len(data)
    if spec.unit == "patient":
        ids = np.asarray(_column(data, "patient_id"))
        _, inverse = np.unique(ids, return_inverse=True)
        members = [np.nonzero(inverse == k)[0] for k in range(inverse.max() + 1)]
        return [np.arange(len(members))], members
    if strata is None and spec.strata is not None and _has_column(data, spec.strata):
        strata = _column(data, spec.strata)
    if strata is None:
        return [np.arange(n)], None
    keys = np.asarray(strata)
    _, inverse = np.unique(keys, return_inverse=True)
    return [np.nonzero(inverse == k)[0] for k in range(inverse.max() + 1)], None


def _has_column(data, name):
    return hasattr(data, "columns") and name in data.columns


def _column(data, name):
    if hasattr(data, "columns"):
        return data.columns[name]
    return [getattr(x, name) for x in data]


def resample_indices(groups, members, seed, b):
    rng = np.random.default_rng([seed, b])
    parts = [g[rng.integers(0, len(g), len(g))] for g in groups if len(g)]
    idx = np.concatenate(parts) if parts else np.empty(0, dtype=int)
    if members is not None:
        idx = np.concatenate([members[i] for i in idx])
    return idx, rng


def _subset(data, idx):
    if isinstance(data, np.ndarray) or hasattr(data, "columns"):
        return data[idx]
    return [data[i] for i in idx]


def _evaluate(statistic, data):
    try:
        value = statistic(data)
    except NotApplicable:
        return math.nan
    return value


def _one(statistic, data, groups, members, seed, b, max_redraws):
    idx, rng = resample_indices(groups, members, seed, b)
    value = _evaluate(statistic, _subset(data, idx))
    if np.ndim(value) or not math.isnan(value):
        return value, 0, False
    undefined = True
    for tries in range(1, max_redraws + 1):
        # redraws continue the resample's own stream
        parts = [g[rng.integers(0, len(g), len(g))] for g in groups if len(g)]
        idx = np.concatenate(parts)
        if members is not None:
            idx = np.concatenate([members[i] for i in idx])
        value = _evaluate(statistic, _subset(data, idx))
        if not math.isnan(value):
            return value, tries, undefined
    return math.nan, max_redraws, undefined


def bootstrap_distribution(statistic, data, spec: BootstrapSpec = BootstrapSpec(),
                           strata=None, max_redraws: int = 100) -> BootstrapResult:
    """Resampled values of ``statistic`` over ``data``.

    Parameters
    ----------
    statistic : callable
        Maps a resample (same type as ``data``) to a float or a 1-D array.
        Scalar statistics that raise :class:`NotApplicable` or return NaN are
        redrawn; vector statistics keep NaN components.
    data : sequence, ndarray or SimTable
    spec : BootstrapSpec
    strata : array-like, optional
        Stratum key per item. Defaults to the ``spec.strata`` column of a
        SimTable (the outcome subclass), else no stratification.

    Returns
    -------
    BootstrapResult
    """
    groups, members = _groups(data, spec, strata)
    estimate = _evaluate(statistic, data)

    def run(chunk):
        return [_one(statistic, data, groups, members, spec.seed, b, max_redraws)
                for b in chunk]

    chunks = np.array_split(np.arange(spec.n_resamples), max(1, spec.n_jobs))
    if spec.n_jobs > 1:
        with ThreadPoolExecutor(spec.n_jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    out = [r for part in parts for r in part]
    dist = np.array([r[0] for r in out], dtype=float)
    redrawn = int(sum(r[1] for r in out))
    if dist.ndim == 1:
        undefined = int(sum(r[2] for r in out))
    else:
        undefined = np.isnan(dist).sum(axis=0)
    return BootstrapResult(dist, estimate, redrawn, undefined)


def _check_defined(result, n_resamples):
    undefined = np.max(np.atleast_1d(result.undefined))
    if undefined > n_resamples / 2:
        raise NotApplicable(f"statistic undefined on {undefined} of {n_resamples} "
                            f"resamples", count=int(undefined))


def percentile_interval(dist, level=0.95):
    alpha = 1 - level
    d = np.asarray(dist, dtype=float)
    if d.ndim == 1:
        d = d[~np.isnan(d)]
        return tuple(float(v) for v in np.quantile(d, [alpha / 2, 1 - alpha / 2]))
    return [percentile_interval(d[:, j], level) for j in range(d.shape[1])]


def _jackknife(statistic, data):
    n = len(data)
    keep = np.ones(n, dtype=bool)
    values = np.empty(n)
    for i in range(n):
        keep[i] = False
        values[i] = _evaluate(statistic, _subset(data, np.nonzero(keep)[0]))
        keep[i] = True
    return values[~np.isnan(values)]


def bca_interval(dist, estimate, jackknife_values, level=0.95):
    d = np.asarray(dist, dtype=float)
    d = d[~np.isnan(d)]
    alpha = 1 - level
    prop = np.clip(np.mean(d < estimate) + 0.5 * np.mean(d == estimate), 1e-10, 1 - 1e-10)
    z0 = _st.norm.ppf(prop)
    dev = jackknife_values.mean() - jackknife_values
    den = 6 * np.sum(dev ** 2) ** 1.5
    accel = np.sum(dev ** 3) / den if den > 0 else 0.0
    out = []
    for q in (alpha / 2, 1 - alpha / 2):
        z = _st.norm.ppf(q)
        adj = _st.norm.cdf(z0 + (z0 + z) / (1 - accel * (z0 + z)))
        out.append(float(np.quantile(d, adj)))
    return tuple(out)


def bootstrap_ci(statistic, data, spec: BootstrapSpec = BootstrapSpec(), strata=None):
    """Two-sided bootstrap interval ``(low, high)`` at ``spec.level``."""
    res = bootstrap_distribution(statistic, data, spec, strata)
    _check_defined(res, spec.n_resamples)
    if spec.method == "bca":
        return bca_interval(res.distribution, res.estimate,
                            _jackknife(statistic, data), spec.level)
    return percentile_interval(res.distribution, spec.level)


def one_sided_bound(dist, alpha, direction="greater"):
    """Lower (``greater``) or upper (``less``) bound of the one-sided (1 - alpha) CI.

    With ``B`` resamples the lower bound at ``alpha = j / B`` is the j-th
    smallest resample value.
    """
    d = np.sort(np.asarray(dist, dtype=float)[~np.isnan(dist)])
    j = min(max(int(math.ceil(alpha * len(d) - 1e-9)), 1), len(d))
    return float(d[j - 1]) if direction == "greater" else float(d[len(d) - j])


def pvalue_from_distribution(dist, null_value=0.0, direction="greater"):
    """Smallest grid alpha whose one-sided interval excludes ``null_value``."""
    d = np.asarray(dist, dtype=float)
    d = d[~np.isnan(d)]
    if len(d) == 0:
        return math.nan
    if direction == "greater":
        against = int(np.sum(d <= null_value))
    elif direction == "less":
        against = int(np.sum(d >= null_value))
    else:
        raise ValueError("direction must be 'greater' or 'less'")
    return min(1.0, (against + 1) / len(d))


def pvalue_ci_inversion(statistic, data, spec: BootstrapSpec = BootstrapSpec(),
                        null_value=0.0, direction="greater", strata=None) -> float:
    """One-sided bootstrap p-value by inverting percentile confidence bounds."""
    res = bootstrap_distribution(statistic, data, spec, strata)
    _check_defined(res, spec.n_resamples)
    return pvalue_from_distribution(res.distribution, null_value, direction)


@dataclass(frozen=True)
class PairedCounts:
    """Joint outcomes of workflows A and B on the same units (n10: A only)."""

    n11: int
    n10: int
    n01: int
    n00: int

    def __post_init__(self):
        if min(self.n11, self.n10, self.n01, self.n00) < 0:
            raise ValueError("paired counts must be non-negative")

    @property
    def n(self):
        return self.n11 + self.n10 + self.n01 + self.n00

    @classmethod
    def from_outcomes(cls, a, b):
        a = np.asarray(a, dtype=bool)
        b = np.asarray(b, dtype=bool)
        return cls(int((a & b).sum()), int((a & ~b).sum()),
                   int((~a & b).sum()), int((~a & ~b).sum()))


@dataclass(frozen=True)
class NonInferiority:
    z: float
    p_value: float
    difference: float
    margin: float
    alpha: float = 0.05
    method: str = "score"

    @property
    def non_inferior(self) -> bool:
        return self.p_value < self.alpha


def restricted_p01(counts: PairedCounts, margin: float) -> float:
    """MLE of the B-only cell probability under p10 - p01 = margin."""
    n, n10, n01 = counts.n, counts.n10, counts.n01
    b = n10 * (1 + margin) + n01 * (1 - margin) - 2 * n * margin
    c = n01 * margin * (1 - margin)
    return (b + math.sqrt(b * b + 8 * n * c)) / (4 * n)


def noninferiority_paired(counts: PairedCounts, margin: float, method: str = "score",
                          alpha: float = 0.05) -> NonInferiority:
    """Non-inferiority of B to A for paired binary outcomes.

    Tests H0: p_A - p_B >= margin against H1: p_A - p_B < margin, with the
    observed difference ``(n10 - n01) / n``.

    Parameters
    ----------
    counts : PairedCounts
    margin : float
        Non-inferiority margin on the proportion scale.
    method : {'score', 'wald'}
        ``score`` uses the variance at the restricted maximum-likelihood
        estimate under the null boundary; ``wald`` uses the unrestricted
        variance ``(p10 + p01 - d**2) / n`` and degenerates when there are no
        discordant pairs.
    alpha : float
        Level used for the ``non_inferior`` verdict.

    Returns
    -------
    NonInferiority
        ``z`` and the upper-tail normal p-value ``P(Z >= z)``.
    """
    n = counts.n
    if n <= 0:
        raise ValueError("no paired units")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    d = (counts.n10 - counts.n01) / n
    if method == "score":
        q = restricted_p01(counts, margin)
        var = (2 * q + margin - margin ** 2) / n
    elif method == "wald":
        var = ((counts.n10 + counts.n01) / n - d ** 2) / n
    else:
        raise ValueError(f"unknown method {method!r}")
    if var <= 0:
        if counts.n10 + counts.n01 == 0 and margin == 0:
            raise NotApplicable("no discordant pairs and zero margin: test undefined")
        if method == "wald":
            raise NotApplicable("Wald variance is zero without discordant pairs")
        raise NotApplicable("restricted variance is zero")
    z = (margin - d) / math.sqrt(var)
    return NonInferiority(z, float(_st.norm.sf(z)), d, margin, alpha, method)


def cdr_noninferiority(results, margin_per_1000: float = 0.25,
                       method: str = "score") -> NonInferiority:
    """Detection on every exam, standard (radiologist) vs rule-out workflow."""
    t = as_table(results)
    counts = PairedCounts.from_outcomes(t.radiologist_tp, t.combined_tp)
    return noninferiority_paired(counts, margin_per_1000 / 1000, method)


def sensitivity_noninferiority(results, margin: float = 0.05,
                               method: str = "score") -> NonInferiority:
    """Detection on the cancers only, standard vs rule-out workflow."""
    t = as_table(results)
    cancers = t.truth
    if not cancers.any():
        raise NotApplicable("no cancers", count=0)
    counts = PairedCounts.from_outcomes(t.radiologist_tp[cancers], t.combined_tp[cancers])
    return noninferiority_paired(counts, margin, method)


def clopper_pearson(k: int, n: int, level: float = 0.95):
    """Exact binomial interval."""
    alpha = 1 - level
    low = 0.0 if k == 0 else float(_st.beta.ppf(alpha / 2, k, n - k + 1))
    high = 1.0 if k == n else float(_st.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return low, high
