"""Top-k accuracy, confusion matrix, IoU, per-class AP and mAP at IoU 0.5."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np


@dataclass
class MetricsReport:
    top1: float = 0.0
    top5: float = 0.0
    confusion: list = field(default_factory=list)
    per_class_ap: list = field(default_factory=list)  # None where undefined
    map: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores per row; ties go to the lower class index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def topk_accuracy(logits, labels, k: int) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    top = topk_indices(logits, k)
    return float(np.mean([lab in row for lab, row in zip(labels, top)]))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts indexed [true label, predicted label]."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def _score(det, class_id: int) -> float:
    s = np.asarray(det.scores)
    return float(s[class_id]) if s.ndim else float(s)


def match_detections(dets, gts, class_id: int, iou_thresh: float = 0.5):
    """Greedy matching in descending score order.

    Returns (tp flags in ranked order, number of ground-truth instances).
    """
    relevant = [g for g in gts if class_id in g.class_ids]
    order = sorted(range(len(dets)), key=lambda i: -_score(dets[i], class_id))  # stable
    used = [False] * len(relevant)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(relevant):
            if used[j] or g.clip_id != d.clip_id:
                continue
            o = iou(d.box, g.box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            used[best_j] = True
            tp[rank] = True
    return tp, len(relevant)


def average_precision(dets, gts, class_id: int, iou_thresh: float = 0.5) -> Optional[float]:
    """All-point interpolated AP; ``None`` when the class has no ground truth."""
    tp, n_gt = match_detections(dets, gts, class_id, iou_thresh)
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def per_class_ap(dets, gts, num_classes: int, iou_thresh: float = 0.5) -> list:
    return [average_precision(dets, gts, c, iou_thresh) for c in range(num_classes)]


def mean_ap(dets, gts, num_classes: int, iou_thresh: float = 0.5) -> Optional[float]:
    """Unweighted mean over classes with ground truth; undefined classes are skipped."""
    aps = per_class_ap(dets, gts, num_classes, iou_thresh)
    undefined = [c for c, a in enumerate(aps) if a is None]
    if undefined:
        warnings.warn(f"classes without ground truth excluded from mAP: {undefined}", stacklevel=2)
    defined = [a for a in aps if a is not None]
    return float(np.mean(defined)) if defined else None


def classification_report(logits, labels, num_classes: int) -> MetricsReport:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    k5 = min(5, num_classes)
    preds = topk_indices(logits, 1)[:, 0] if len(labels) else np.zeros(0, dtype=int)
    return MetricsReport(
        top1=topk_accuracy(logits, labels, 1),
        top5=topk_accuracy(logits, labels, k5),
        confusion=confusion_matrix(preds, labels, num_classes).tolist(),
    )


def write_confusion_csv(path, confusion) -> None:
    cm = np.asarray(confusion)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(i) for i in range(cm.shape[1])])
        for i, row in enumerate(cm):
            w.writerow([str(i)] + [str(int(v)) for v in row])


def write_ap_csv(path, aps) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "ap"])
        for c, a in enumerate(aps):
            w.writerow([c, "" if a is None else f"{a:.6f}"])
