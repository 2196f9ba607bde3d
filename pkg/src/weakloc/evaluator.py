"""Classification and temporal localization metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

PEAK_GT_DEFINITION = "Peak-GT: share of positives whose peak-bin center lies inside any GT interval"


@dataclass(frozen=True)
class Interval:
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.start_s > self.end_s:
            raise ValueError(f"interval start {self.start_s} exceeds end {self.end_s}")

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


def _interval(x) -> Interval:
    return x if isinstance(x, Interval) else Interval(float(x[0]), float(x[1]))


def iou(pred, gt) -> float:
    """Temporal intersection over union.

    Two zero-length intervals score 1 when they coincide and 0 otherwise.
    """
    p, g = _interval(pred), _interval(gt)
    inter = max(0.0, min(p.end_s, g.end_s) - max(p.start_s, g.start_s))
    union = p.length + g.length - inter
    if union <= 0:
        return 1.0 if (p.start_s, p.end_s) == (g.start_s, g.end_s) else 0.0
    return inter / union


def multi_gt_iou(pred, gts: Sequence) -> float:
    if not gts:
        raise ValueError("multi_gt_iou: no ground-truth intervals")
    return max(iou(pred, g) for g in gts)


@dataclass
class ClassificationCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def classification_f1(predictions: Sequence[int], labels: Sequence[int]) -> tuple[float, float, float, ClassificationCounts]:
    """Positive-class F1, precision and recall with confusion counts."""
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    p = np.asarray(predictions, dtype=int)
    y = np.asarray(labels, dtype=int)
    counts = ClassificationCounts(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
    )
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall, counts


def localization_metrics(results: Sequence[tuple[object, Sequence]], threshold: float = 0.5) -> tuple[float, float]:
    """``(precision at IoU >= threshold, mean IoU)`` over (prediction, GT list) pairs."""
    if not results:
        raise ValueError("localization_metrics: no samples")
    scores = [multi_gt_iou(pred, gts) for pred, gts in results]
    hits = sum(1 for s in scores if s >= threshold)
    return hits / len(scores), sum(scores) / len(scores)


def peak_gt(results: Sequence[tuple[float, Sequence]]) -> float:
    if not results:
        raise ValueError("peak_gt: no samples")
    hits = 0
    for t, gts in results:
        if not gts:
            raise ValueError("peak_gt: sample without ground truth")
        if any(g.start_s <= t <= g.end_s for g in map(_interval, gts)):
            hits += 1
    return hits / len(results)


@dataclass
class MetricsReport:
    cls_f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    loc_precision_at_05: float | None
    mean_iou: float | None
    peak_gt: float | None
    n_cls: int
    n_loc: int

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, title: str = "") -> str:
        def fmt(x):
            return "  n/a" if x is None else f"{x:.3f}"

        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'Cls.F1':>8} {'Loc@.5':>8} {'IoU':>8} {'Peak-GT':>8} {'N_cls':>7} {'N_loc':>7}")
        lines.append(f"{fmt(self.cls_f1):>8} {fmt(self.loc_precision_at_05):>8} {fmt(self.mean_iou):>8} "
                     f"{fmt(self.peak_gt):>8} {self.n_cls:>7} {self.n_loc:>7}")
        lines.append(f"precision={self.precision:.3f} recall={self.recall:.3f} "
                     f"TP={self.tp} FP={self.fp} FN={self.fn} TN={self.tn}")
        lines.append(PEAK_GT_DEFINITION)
        return "\n".join(lines)


def evaluate(labels: Sequence[int], predictions: Sequence[int],
             localized: Sequence[tuple[object, float, Sequence]]) -> MetricsReport:
    """Build a report from clip labels/predictions and per-positive localization.

    ``localized`` holds ``(predicted interval, peak time, GT intervals)`` for
    every ground-truth positive that carries boundaries.
    """
    f1, prec, rec, c = classification_f1(predictions, labels)
    if localized:
        p05, miou = localization_metrics([(pred, gts) for pred, _, gts in localized])
        pk = peak_gt([(t, gts) for _, t, gts in localized])
    else:
        p05 = miou = pk = None
    return MetricsReport(f1, prec, rec, c.tp, c.fp, c.fn, c.tn, p05, miou, pk, len(labels), len(localized))
