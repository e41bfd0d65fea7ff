"""Binary forecast verification: contingency counts, CSI and friends, threshold sweeps.

Scores with a zero denominator are ``None`` and are skipped by aggregates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

SWEEP_THRESHOLDS: tuple[float, ...] = tuple(k / 10 for k in range(1, 10))
TIE_BREAK = "smallest-threshold"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    csi: Optional[float]
    f1: Optional[float]
    iou: Optional[float]
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("csi", "f1", "iou", "accuracy", "precision", "recall")}


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def csi(counts: ConfusionCounts) -> Optional[float]:
    return _ratio(counts.tp, counts.tp + counts.fn + counts.fp)


def metrics_report(counts: ConfusionCounts) -> MetricsReport:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    return MetricsReport(
        csi=csi(counts),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
        accuracy=_ratio(tp + tn, counts.total),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
    )


def predict_with_threshold(prob, p: float) -> np.ndarray:
    """Rain (1) where ``prob > p``, strictly."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {p}")
    return (np.asarray(prob) > p).astype(np.uint8)


@dataclass
class RegionSweep:
    counts: dict[float, ConfusionCounts]
    reports: dict[float, MetricsReport]
    best_threshold: Optional[float]

    @property
    def best_report(self) -> Optional[MetricsReport]:
        return None if self.best_threshold is None else self.reports[self.best_threshold]


@dataclass
class SweepResult:
    regions: dict[Hashable, RegionSweep]
    thresholds: tuple[float, ...] = SWEEP_THRESHOLDS
    tie_break: str = TIE_BREAK
    warnings: list[str] = field(default_factory=list)

    def best_thresholds(self) -> dict[Hashable, Optional[float]]:
        return {k: r.best_threshold for k, r in self.regions.items()}


def pick_best(reports: Mapping[float, MetricsReport]) -> Optional[float]:
    """Threshold with maximal CSI; ties go to the smaller threshold; undefined CSI never wins."""
    best, best_csi = None, None
    for p in sorted(reports):
        score = reports[p].csi
        if score is not None and (best_csi is None or score > best_csi):
            best, best_csi = p, score
    return best


def sweep_region(probs: Iterable[np.ndarray], truths: Iterable[np.ndarray],
                 thresholds: Sequence[float] = SWEEP_THRESHOLDS) -> RegionSweep:
    counts = {p: ConfusionCounts() for p in thresholds}
    for prob, truth in zip(probs, truths, strict=True):
        for p in thresholds:
            counts[p] = counts[p] + confusion(predict_with_threshold(prob, p), truth)
    reports = {p: metrics_report(c) for p, c in counts.items()}
    return RegionSweep(counts, reports, pick_best(reports))


def threshold_sweep(probs: Mapping[Hashable, Sequence[np.ndarray]],
                    truths: Mapping[Hashable, Sequence[np.ndarray]],
                    thresholds: Sequence[float] = SWEEP_THRESHOLDS) -> SweepResult:
    """Pooled-count sweep over ``thresholds`` for every region key."""
    result = SweepResult(regions={}, thresholds=tuple(thresholds))
    for key in probs:
        if len(probs[key]) == 0 or key not in truths or len(truths[key]) == 0:
            msg = f"region {key!r} has no samples; skipped"
            log.warning(msg)
            result.warnings.append(msg)
            continue
        result.regions[key] = sweep_region(probs[key], truths[key], thresholds)
    return result


def mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None
