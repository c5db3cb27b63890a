"""Detection-quality evaluation: IoU, greedy matching, precision/recall/F1.

Matching is class-wise and greedy in confidence order, the usual PASCAL-style
protocol: a detection may claim at most one ground-truth box of its own class,
and each truth box may be claimed at most once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .domain import ALL_LESION_CLASSES, BBox, Detection, LesionClass

DEFAULT_IOU_THRESHOLD = 0.5


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area, in [0, 1]."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic, so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass
class MatchResult:
    """Per-class TP/FP/FN counts plus the matched (detection, truth, iou) pairs."""

    tp: dict[LesionClass, int] = field(default_factory=dict)
    fp: dict[LesionClass, int] = field(default_factory=dict)
    fn: dict[LesionClass, int] = field(default_factory=dict)
    pairs: list[tuple[Detection, Detection, float]] = field(default_factory=list)

    def merge(self, other: "MatchResult") -> "MatchResult":
        """Accumulate another image's result into this one (counts and pairs)."""
        for cls in ALL_LESION_CLASSES:
            self.tp[cls] = self.tp.get(cls, 0) + other.tp.get(cls, 0)
            self.fp[cls] = self.fp.get(cls, 0) + other.fp.get(cls, 0)
            self.fn[cls] = self.fn.get(cls, 0) + other.fn.get(cls, 0)
        self.pairs.extend(other.pairs)
        return self

    def totals(self) -> tuple[int, int, int]:
        return (
            sum(self.tp.values()),
            sum(self.fp.values()),
            sum(self.fn.values()),
        )


def match(
    detections: Sequence[Detection],
    truth: Sequence[Detection],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """Greedily match detections to same-class truth boxes.

    Detections are visited in confidence-descending order (ties keep input
    order); each claims the not-yet-claimed truth box of its class with the
    highest IoU, provided that IoU reaches the threshold. Unmatched detections
    count as FP, unclaimed truths as FN.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")

    result = MatchResult()
    for cls in ALL_LESION_CLASSES:
        result.tp[cls] = 0
        result.fp[cls] = 0
        result.fn[cls] = 0

    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    claimed = [False] * len(truth)
    for i in order:
        det = detections[i]
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(truth):
            if claimed[j] or gt.lesion_class != det.lesion_class:
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            claimed[best_j] = True
            result.tp[det.lesion_class] += 1
            result.pairs.append((det, truth[best_j], best_iou))
        else:
            result.fp[det.lesion_class] += 1
    for j, gt in enumerate(truth):
        if not claimed[j]:
            result.fn[gt.lesion_class] += 1
    return result


def match_many(
    detections_by_image: Mapping[str, Sequence[Detection]],
    truth_by_image: Mapping[str, Sequence[Detection]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """Match per image and accumulate counts over the whole set."""
    total = MatchResult()
    ids: Iterable[str] = truth_by_image.keys() | detections_by_image.keys()
    for image_id in sorted(ids):
        total.merge(
            match(
                detections_by_image.get(image_id, ()),
                truth_by_image.get(image_id, ()),
                iou_threshold,
            )
        )
    return total


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # Convention: a ratio with zero denominator is 0, so empty classes read as
    # all-zero rows rather than NaNs.
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class DetectionReport:
    """Micro-averaged and per-class precision/recall/F1 for one matching run."""

    precision: float
    recall: float
    f1: float
    per_class: dict[LesionClass, tuple[float, float, float]]
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "kind": "detection",
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "per_class": {
                cls.name.lower(): {"precision": p, "recall": r, "f1": f}
                for cls, (p, r, f) in self.per_class.items()
            },
        }

    def render_text(self) -> str:
        lines = [
            "detection evaluation",
            f"  micro precision {self.precision:.4f}  recall {self.recall:.4f}  "
            f"f1 {self.f1:.4f}  (tp={self.tp} fp={self.fp} fn={self.fn})",
        ]
        for cls, (p, r, f) in self.per_class.items():
            lines.append(f"  {cls.name.lower():<15} P {p:.4f}  R {r:.4f}  F1 {f:.4f}")
        return "\n".join(lines) + "\n"


def detection_metrics(result: MatchResult) -> DetectionReport:
    """Per-class and micro-averaged precision/recall/F1 from match counts."""
    per_class = {}
    for cls in ALL_LESION_CLASSES:
        per_class[cls] = _prf(
            result.tp.get(cls, 0), result.fp.get(cls, 0), result.fn.get(cls, 0)
        )
    tp, fp, fn = result.totals()
    precision, recall, f1 = _prf(tp, fp, fn)
    return DetectionReport(
        precision=precision,
        recall=recall,
        f1=f1,
        per_class=per_class,
        tp=tp,
        fp=fp,
        fn=fn,
    )
