"""Accuracy metrics, paired t-test, and misclassification maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cube import LabelMap


@dataclass
class MetricsReport:
    oa: float                     # overall accuracy, percent
    aa: float                     # mean of per-class recalls, percent
    per_class_accuracy: dict[int, float]
    oa_std: float = 0.0
    aa_std: float = 0.0
    run_count: int = 1

    def lines(self) -> list[str]:
        out = [f"OA = {self.oa:.2f}", f"AA = {self.aa:.2f}"]
        for cls in sorted(self.per_class_accuracy):
            out.append(f"class_{cls}_accuracy = {self.per_class_accuracy[cls]:.2f}")
        out.append(f"OA_std = {self.oa_std:.2f}")
        out.append(f"AA_std = {self.aa_std:.2f}")
        out.append(f"run_count = {self.run_count}")
        return out


def compute_metrics(pred: LabelMap, truth: LabelMap) -> MetricsReport:
    """OA = correct/labeled; AA = unweighted mean recall over present classes."""
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(
            f"prediction extents {pred.labels.shape} != truth extents {truth.labels.shape}"
        )
    mask = truth.labels != 0
    total = int(mask.sum())
    if total == 0:
        raise ValueError("no labeled pixels in the ground truth")
    t = truth.labels[mask].astype(np.int64)
    p = pred.labels[mask].astype(np.int64)
    correct = p == t
    per_class: dict[int, float] = {}
    for cls in np.unique(t):
        sel = t == cls
        per_class[int(cls)] = 100.0 * float(correct[sel].mean())
    oa = 100.0 * float(correct.mean())
    aa = float(np.mean(list(per_class.values())))
    return MetricsReport(oa=oa, aa=aa, per_class_accuracy=per_class)


def aggregate_runs(reports: list[MetricsReport]) -> MetricsReport:
    """Mean and sample std of OA/AA over repeated runs."""
    if not reports:
        raise ValueError("no runs to aggregate")
    oas = np.array([r.oa for r in reports])
    aas = np.array([r.aa for r in reports])
    classes = sorted({c for r in reports for c in r.per_class_accuracy})
    per_class = {
        c: float(np.mean([r.per_class_accuracy[c] for r in reports if c in r.per_class_accuracy]))
        for c in classes
    }
    ddof = 1 if len(reports) > 1 else 0
    return MetricsReport(
        oa=float(oas.mean()),
        aa=float(aas.mean()),
        per_class_accuracy=per_class,
        oa_std=float(oas.std(ddof=ddof)),
        aa_std=float(aas.std(ddof=ddof)),
        run_count=len(reports),
    )


def error_map(pred: LabelMap, truth: LabelMap) -> np.ndarray:
    """Boolean (H, W) map: True (white) at misclassified labeled pixels."""
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(
            f"prediction extents {pred.labels.shape} != truth extents {truth.labels.shape}"
        )
    return (truth.labels != 0) & (pred.labels != truth.labels)


# ---------------------------------------------------------------------------
# paired t-test (two-sided), p-value via the regularized incomplete beta
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-30
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
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
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T_df| >= |t|)."""
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(samples_a, samples_b) -> tuple[float, float, bool]:
    """Two-sided paired t-test; returns (t, p, significant at 95%).

    Zero-variance differences: p = 1 when the mean difference is zero,
    p -> 0 (t = +-inf) otherwise.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length 1-D sequences")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 paired runs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0, False
        t = math.inf if mean > 0 else -math.inf
        return t, 0.0, True
    t = mean / (sd / math.sqrt(n))
    p = student_t_sf2(t, n - 1)
    return float(t), float(p), bool(p < 0.05)
