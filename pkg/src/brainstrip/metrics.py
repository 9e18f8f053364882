"""Overlap metrics, paired t-test and cohort summaries."""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from brainstrip.volume import Volume3D


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SegMetrics:
    """Dice, sensitivity and specificity; ``None`` marks an undefined value
    (zero denominator), which is deliberately distinct from 0."""

    dice: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    infinite: bool = False


@dataclass(frozen=True)
class SummaryStat:
    mean: float
    std: float
    n: int
    n_undefined: int = 0


def _mask_array(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, Volume3D) else m)


def confusion_counts(pred, truth) -> ConfusionCounts:
    """Voxel tallies of ``pred`` against ``truth`` (BinaryMask volumes or arrays)."""
    if isinstance(pred, Volume3D) and isinstance(truth, Volume3D) and not pred.same_grid(truth):
        raise MetricsError("pred and truth are on different grids")
    p = _mask_array(pred)
    g = _mask_array(truth)
    if p.shape != g.shape:
        raise MetricsError(f"shape mismatch {p.shape} vs {g.shape}")
    for name, arr in (("pred", p), ("truth", g)):
        if not np.all((arr == 0) | (arr == 1)):
            raise MetricsError(f"{name} is not binary")
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def segmentation_metrics(counts: ConfusionCounts) -> SegMetrics:
    c = counts
    return SegMetrics(
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
    )


def dice_score(pred, truth) -> Optional[float]:
    return segmentation_metrics(confusion_counts(pred, truth)).dice


# -- Student t distribution -------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, regularized_incomplete_beta(df / 2.0, 0.5, x))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError("paired samples must be 1D sequences of equal length")
    n = a.size
    if n < 2:
        raise MetricsError("paired t-test needs at least two pairs")
    # exact rational sums: t^2 = S^2 (n-1) / (n sum(d^2) - S^2), one rounding at the end
    d = [Fraction(float(x)) - Fraction(float(y)) for x, y in zip(a, b)]
    df = n - 1
    s = sum(d, Fraction(0))
    spread = n * sum((v * v for v in d), Fraction(0)) - s * s
    if spread == 0:
        if s == 0:
            return TTestResult(0.0, df, 1.0)
        return TTestResult(math.copysign(math.inf, s), df, 0.0, infinite=True)
    t = math.copysign(math.sqrt(s * s * df / spread), s)
    return TTestResult(t, df, t_two_sided_p(t, df))


# -- cohort summaries -------------------------------------------------------

METRIC_NAMES = ("dice", "sensitivity", "specificity")


def summarize_values(values: Iterable[Optional[float]]) -> SummaryStat:
    vals = list(values)
    defined = [float(v) for v in vals if v is not None]
    if not vals:
        raise MetricsError("nothing to summarize")
    if len(defined) < 2:
        raise MetricsError(f"need at least two defined values, got {len(defined)}")
    n = len(defined)
    mean = math.fsum(defined) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in defined) / (n - 1))
    return SummaryStat(mean, std, n, len(vals) - n)


def summarize_runs(scores: Sequence[SegMetrics]) -> dict[str, SummaryStat]:
    """Sample mean and (n-1) standard deviation per metric; undefined values
    are dropped and counted in ``n_undefined``."""
    if not scores:
        raise MetricsError("empty score list")
    return {name: summarize_values(getattr(s, name) for s in scores) for name in METRIC_NAMES}


# -- CSV ---------------------------------------------------------------------


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def cases_csv(rows: Iterable[tuple[str, SegMetrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id", *METRIC_NAMES])
    for case_id, m in sorted(rows, key=lambda r: r[0]):
        w.writerow([case_id, _fmt(m.dice), _fmt(m.sensitivity), _fmt(m.specificity)])
    return buf.getvalue()


def read_cases_csv(text: str) -> dict[str, SegMetrics]:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        vals = [float(row[k]) if row[k] not in ("", None) else None for k in METRIC_NAMES]
        out[row["case_id"]] = SegMetrics(*vals)
    return out


SUMMARY_HEADER = ["input", "dice_mean", "dice_std", "sens_mean", "sens_std", "spec_mean", "spec_std"]


def summary_row(label: str, summary: dict[str, SummaryStat]) -> list[str]:
    row = [label]
    for name in METRIC_NAMES:
        row += [repr(summary[name].mean), repr(summary[name].std)]
    return row
