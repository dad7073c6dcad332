"""Detection evaluation: image-level precision/recall/accuracy and ranked AP/mAP."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .boxes import as_array, iou_matrix
from .detector import CLASSES


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what}: zero denominator, reported as 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return 100.0 * num / den


@dataclass
class ConfusionCounts:
    """Image-level counts: positive means "defective"."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp, "precision")

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn, "recall")

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total, "accuracy")


def confusion_counts(detections: Sequence, annotations: Mapping, conf_thr: float = 0.5) -> ConfusionCounts:
    """Tally images as defective / defect-free, predicted vs ground truth.

    ``detections`` is a sequence of ``(image_id, scores_or_detections)``;
    ``annotations`` maps image id to its GT boxes. An image is predicted
    defective iff some detection scores at least ``conf_thr``.
    """
    counts = ConfusionCounts()
    seen = set()
    for image_id, dets in detections:
        if image_id in seen:
            raise ValueError(f"confusion_counts: duplicate image id {image_id!r}")
        seen.add(image_id)
        scores = [d.score if hasattr(d, "score") else float(d) for d in dets]
        predicted = any(s >= conf_thr for s in scores)
        actual = len(annotations.get(image_id, ())) > 0
        if predicted and actual:
            counts.tp += 1
        elif predicted:
            counts.fp += 1
        elif actual:
            counts.fn += 1
        else:
            counts.tn += 1
    return counts


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    num_gt: int
    tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def match_detections(dets: Sequence, gts: Mapping, iou_thr: float = 0.5) -> np.ndarray:
    """Greedy ranked matching: TP flags in descending-score order.

    ``dets`` holds ``(image_id, score, box)``; the sort is stable so equal
    scores keep insertion order. Each detection takes the highest-IoU
    still-unmatched GT box of its image when that IoU reaches ``iou_thr``.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {k: np.zeros(len(as_array(v)), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        image_id, _, box = dets[i]
        g = as_array(gts.get(image_id, np.zeros((0, 4))))
        if len(g) == 0:
            continue
        ious = iou_matrix([box], g)[0]
        ious[used[image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            used[image_id][j] = True
            tp[rank] = True
    return tp


def pr_curve(dets: Sequence, gts: Mapping, iou_thr: float = 0.5) -> PRCurve:
    num_gt = sum(len(as_array(v)) for v in gts.values())
    tp = match_detections(dets, gts, iou_thr)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    recall = ctp / num_gt if num_gt else np.zeros(len(tp))
    precision = ctp / ranks if len(tp) else np.zeros(0)
    return PRCurve(recall, precision, num_gt, tp)


def average_precision(dets: Sequence, gts: Mapping, iou_thr: float = 0.5, mode: str = "all") -> Optional[float]:
    """Area under the interpolated PR curve for one class; ``None`` when the class has no GT.

    ``mode="all"`` sums recall steps times the maximum precision at or beyond
    each step; ``mode="11point"`` averages that envelope at recall 0, 0.1, ..., 1.
    """
    curve = pr_curve(dets, gts, iou_thr)
    if curve.num_gt == 0:
        return None
    if len(curve.recall) == 0:
        return 0.0
    if mode == "11point":
        vals = []
        for t in np.linspace(0.0, 1.0, 11):
            hit = curve.precision[curve.recall >= t - 1e-12]
            vals.append(hit.max() if len(hit) else 0.0)
        return float(np.mean(vals))
    if mode != "all":
        raise ValueError(f"average_precision: unknown mode {mode!r}")
    # Recall steps by 1/num_gt at each TP, and the precision envelope only
    # changes at TP ranks, so the area is an exact rational over the TPs.
    tp_ranks = np.flatnonzero(curve.tp) + 1
    envelope = Fraction(0)
    total = Fraction(0)
    for i in range(len(tp_ranks), 0, -1):
        envelope = max(envelope, Fraction(i, int(tp_ranks[i - 1])))
        total += envelope
    return float(total / curve.num_gt)


def mean_ap(aps) -> float:
    """Unweighted mean over classes whose AP is defined (not ``None``)."""
    vals = list(aps.values()) if isinstance(aps, Mapping) else list(aps)
    defined = [v for v in vals if v is not None]
    if not defined:
        raise ValueError("mean_ap: no class has a defined AP")
    return float(np.mean(defined))


def per_class_recall(dets: Sequence, gts: Mapping, iou_thr: float = 0.5, conf_thr: float = 0.5) -> Optional[float]:
    num_gt = sum(len(as_array(v)) for v in gts.values())
    if num_gt == 0:
        return None
    kept = [d for d in dets if d[1] >= conf_thr]
    return float(match_detections(kept, gts, iou_thr).sum() / num_gt)


# ---------------------------------------------------------------- dataset-level report


@dataclass
class EvalReport:
    ap: dict
    recall: dict
    map: Optional[float]
    counts: ConfusionCounts
    conf_thr: float
    iou_thr: float
    time_per_image: Optional[float] = None

    def summary(self) -> dict:
        return {"mAP": self.map, "precision": self.counts.precision, "recall": self.counts.recall,
                "accuracy": self.counts.accuracy}


def group_by_class(detections_per_image: Iterable, annotations: Mapping):
    """Split ``(image_id, [Detection])`` and ``id -> [(box, class_name)]`` into per-class inputs."""
    dets = {c: [] for c in CLASSES}
    gts = {c: {} for c in CLASSES}
    for image_id, items in annotations.items():
        for c in CLASSES:
            gts[c][image_id] = [b for b, lab in items if lab == c]
    for image_id, items in detections_per_image:
        for d in items:
            dets[d.class_name].append((image_id, d.score, tuple(d.box)))
    return dets, gts


def evaluate(detections_per_image: Sequence, annotations: Mapping, iou_thr: float = 0.5, conf_thr: float = 0.5,
             mode: str = "all") -> EvalReport:
    """Per-class AP and recall, mAP, and image-level confusion metrics.

    AP uses every detection supplied (rank-based); recall and the image-level
    counts only use detections scoring at least ``conf_thr``.
    """
    detections_per_image = list(detections_per_image)
    dets, gts = group_by_class(detections_per_image, annotations)
    ap = {c: average_precision(dets[c], gts[c], iou_thr, mode) for c in CLASSES}
    rec = {c: per_class_recall(dets[c], gts[c], iou_thr, conf_thr) for c in CLASSES}
    defined = [v for v in ap.values() if v is not None]
    m = float(np.mean(defined)) if defined else None
    counts = confusion_counts(detections_per_image, annotations, conf_thr)
    return EvalReport(ap, rec, m, counts, conf_thr, iou_thr)


def _fmt(v) -> str:
    return "" if v is None else f"{100.0 * v:.4f}"


def write_report_csv(report: EvalReport, path) -> None:
    """Rows ``class,AP,recall`` (percent), then a summary block with mAP, precision, recall, accuracy."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        precision, recall, accuracy = report.counts.precision, report.counts.recall, report.counts.accuracy
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "AP", "recall"])
        for c in CLASSES:
            w.writerow([c, _fmt(report.ap[c]), _fmt(report.recall[c])])
        w.writerow(["summary", "mAP", "precision", "recall", "accuracy", "conf_thr", "iou_thr"])
        w.writerow(["all", _fmt(report.map), f"{precision:.4f}", f"{recall:.4f}", f"{accuracy:.4f}",
                    report.conf_thr, report.iou_thr])
        if report.time_per_image is not None:
            w.writerow(["timing", "testing_time_s_per_image"])
            w.writerow(["all", f"{report.time_per_image:.6f}"])
