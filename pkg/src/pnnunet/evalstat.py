"""Confusion counts, overlap metrics, five-run means and paired t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DegenerateVariance, ShapeError

METRICS = ("dice", "jaccard", "sensitivity", "specificity")
LABEL_SETS = ("L1+L2", "L1", "L2")
FOREGROUND = (1, 2)
N_RUNS = 5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricEntry:
    dice: float
    jaccard: float
    sensitivity: float
    specificity: float

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def confusion_counts(pred: np.ndarray, truth: np.ndarray, label: int) -> ConfusionCounts:
    """One-vs-rest counts for ``label`` over every voxel."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    p = pred == label
    t = truth == label
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def metrics_from_counts(c: ConfusionCounts) -> MetricEntry:
    """Dice, Jaccard, TPR and TNR.

    A label that is neither present nor predicted scores 1 on the overlap
    metrics and on sensitivity; ``tn + fp == 0`` gives specificity 1.
    """
    union = c.tp + c.fp + c.fn
    dice = 1.0 if union == 0 else 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    jaccard = 1.0 if union == 0 else c.tp / union
    sens = 1.0 if c.tp + c.fn == 0 else c.tp / (c.tp + c.fn)
    spec = 1.0 if c.tn + c.fp == 0 else c.tn / (c.tn + c.fp)
    return MetricEntry(dice, jaccard, sens, spec)


@dataclass(frozen=True)
class MetricReport:
    """Per-volume scores for L1, L2 and their mean (L1+L2)."""

    volume: str
    seed: int
    entries: Mapping[str, MetricEntry]

    def value(self, label_set: str, metric: str) -> float:
        return getattr(self.entries[label_set], metric)


def volume_report(pred: np.ndarray, truth: np.ndarray, volume: str = "", seed: int = 0) -> MetricReport:
    per = {f"L{l}": metrics_from_counts(confusion_counts(pred, truth, l)) for l in FOREGROUND}
    pooled = MetricEntry(*(0.5 * (getattr(per["L1"], m) + getattr(per["L2"], m)) for m in METRICS))
    return MetricReport(volume, seed, {"L1+L2": pooled, **per})


# ---------------------------------------------------------------------------
# five-run aggregation


def round6(x: float) -> str:
    """Six-decimal rendering with halves rounded up, as in the published tables."""
    d = Decimal(repr(round(float(x), 12)))
    return str(d.quantize(Decimal("0.000001"), rounding=ROUND_HALF_UP))


def aggregate_runs(per_seed: Mapping[str, Sequence[float]], runs: int = N_RUNS) -> dict[str, float]:
    """Mean over seeds for L1 and L2; L1+L2 is the mean of those two means."""
    out = {}
    for label in ("L1", "L2"):
        if label not in per_seed:
            raise DataError(f"missing label {label}")
        values = list(per_seed[label])
        if len(values) != runs:
            raise DataError(f"{label}: expected {runs} per-seed values, got {len(values)}")
        out[label] = math.fsum(values) / runs
    out["L1+L2"] = pooled_mean(out["L1"], out["L2"])
    return out


def pooled_mean(l1: float, l2: float) -> float:
    return (l1 + l2) / 2


# ---------------------------------------------------------------------------
# Student t


def _betacf(a: float, b: float, x: float, max_iter: int = 10000, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|), evaluated directly to avoid cancellation in the tails."""
    if df < 1:
        raise ConfigError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0:
        return 1.0
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: float) -> float:
    if df < 1:
        raise ConfigError(f"degrees of freedom must be >= 1, got {df}")
    tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    mean_a: float
    mean_b: float
    n: int


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided one-sample t-test on the paired differences ``a - b`` (mu = 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("paired samples must be 1D and of equal length")
    n = a.size
    if n < 2:
        raise ConfigError("paired t-test needs at least two pairs")
    d = a - b
    mean = math.fsum(d) / n
    var = math.fsum((d - mean) ** 2) / (n - 1)
    sd = math.sqrt(var)
    if sd == 0.0:
        if mean != 0.0:
            raise DegenerateVariance("all paired differences are equal and nonzero")
        t = 0.0
    else:
        t = mean / (sd / math.sqrt(n))
    return TTestResult(t, n - 1, t_two_sided_p(t, n - 1), float(a.mean()), float(b.mean()), n)


def significance_marker(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
