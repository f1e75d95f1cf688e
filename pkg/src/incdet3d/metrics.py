"""Detection metrics: axis-aligned IoU, average precision, report assembly.

Average precision follows the all-point interpolation convention: precision
is replaced by its running maximum over recall suffixes before integrating.
Classes with no ground-truth instances in the evaluation pool are reported
as absent rather than zero and never pulled into a mean. Reports carry
percentages; raw matching works in fractions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


def iou_axis_aligned(box_a, box_b) -> float:
    """Overlap of two center+size boxes; degenerate boxes give 0."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    if a.shape != (6,) or b.shape != (6,):
        raise InputError("boxes must be 6-vectors: center xyz, size xyz")
    lo_a, hi_a = a[:3] - a[3:] * 0.5, a[:3] + a[3:] * 0.5
    lo_b, hi_b = b[:3] - b[3:] * 0.5, b[:3] + b[3:] * 0.5
    inter_lo = np.maximum(lo_a, lo_b)
    inter_hi = np.minimum(hi_a, hi_b)
    edges = np.maximum(inter_hi - inter_lo, 0.0)
    inter = float(edges[0] * edges[1] * edges[2])
    vol_a = float(np.prod(np.maximum(hi_a - lo_a, 0.0)))
    vol_b = float(np.prod(np.maximum(hi_b - lo_b, 0.0)))
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _match_class(preds, gts, iou_thr: float):
    """Greedy matching in confidence order; returns tp/fp flags per prediction.

    preds: list of (scene_id, confidence, box). gts: list of (scene_id, box).
    Each ground-truth box is matched at most once; ties in confidence keep
    insertion order, ties in overlap keep ground-truth order.
    """
    conf = np.array([p[1] for p in preds], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    matched = [False] * len(gts)
    tp = np.zeros(len(preds), dtype=np.int64)
    for rank, pi in enumerate(order):
        scene_id, _, box = preds[pi]
        best_iou, best_gi = 0.0, -1
        for gi, (g_scene, g_box) in enumerate(gts):
            if matched[gi] or g_scene != scene_id:
                continue
            v = iou_axis_aligned(box, g_box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi >= 0 and best_iou >= iou_thr:
            matched[best_gi] = True
            tp[rank] = 1
    return tp


def match_and_ap(preds, gts, iou_thr: float):
    """(AP, recall) for one class, both in [0, 1]; (None, None) with no truth.

    AP is all-point interpolated; recall is the matched fraction of ground
    truth over every retained detection.
    """
    n_gt = len(gts)
    if n_gt == 0:
        return None, None
    if len(preds) == 0:
        return 0.0, 0.0
    tp = _match_class(preds, gts, iou_thr)
    # plain python accumulation keeps this auditable against a brute-force curve
    ap = 0.0
    cum_tp = 0
    recalls, precisions = [], []
    for i, flag in enumerate(tp):
        cum_tp += int(flag)
        recalls.append(cum_tp / n_gt)
        precisions.append(cum_tp / (i + 1))
    prev_recall = 0.0
    for i in range(len(tp)):
        if tp[i] == 0:
            continue
        p_max = max(precisions[i:])
        ap += (recalls[i] - prev_recall) * p_max
        prev_recall = recalls[i]
    return ap, recalls[-1]


def evaluate_detections(preds, gts, class_ids, iou_thr: float = 0.25):
    """Per-class (AP, recall). preds: (scene_id, class, conf, box); gts: (scene_id, class, box)."""
    ap_by_class, recall_by_class = {}, {}
    for c in class_ids:
        cp = [(sid, conf, box) for sid, cls, conf, box in preds if cls == c]
        cg = [(sid, box) for sid, cls, box in gts if cls == c]
        ap_by_class[int(c)], recall_by_class[int(c)] = match_and_ap(cp, cg, iou_thr)
    return ap_by_class, recall_by_class


def _group_mean(values: dict, classes):
    vals = [values[int(c)] for c in classes
            if values.get(int(c)) is not None]
    if not vals:
        return None
    return float(sum(vals) / len(vals))


@dataclass
class MetricsReport:
    """Percent-scale evaluation summary over base and novel class groups."""

    per_class_ap: dict = field(default_factory=dict)
    per_class_recall: dict = field(default_factory=dict)
    base_map: float | None = None
    novel_map: float | None = None
    avg_map: float | None = None
    base_recall: float | None = None
    novel_recall: float | None = None
    avg_recall: float | None = None

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "per_class_recall": {str(k): v for k, v in sorted(self.per_class_recall.items())},
            "base_map": self.base_map,
            "novel_map": self.novel_map,
            "avg_map": self.avg_map,
            "base_recall": self.base_recall,
            "novel_recall": self.novel_recall,
            "avg_recall": self.avg_recall,
        }


def _avg_of_groups(base, novel):
    present = [v for v in (base, novel) if v is not None]
    if not present:
        return None
    return float(sum(present) / len(present))


def aggregate_report(per_class_ap: dict, per_class_recall: dict,
                     base_classes, novel_classes) -> MetricsReport:
    """Group means over percent-scale per-class values.

    The overall average is the mean of the two group means (not the mean over
    all classes), so unevenly sized groups weigh equally; a group with no
    present class drops out of the average entirely.
    """
    overlap = set(int(c) for c in base_classes) & set(int(c) for c in novel_classes)
    if overlap:
        raise InputError(f"classes cannot be both base and novel: {sorted(overlap)}")
    base_map = _group_mean(per_class_ap, base_classes)
    novel_map = _group_mean(per_class_ap, novel_classes)
    base_recall = _group_mean(per_class_recall, base_classes)
    novel_recall = _group_mean(per_class_recall, novel_classes)
    return MetricsReport(
        per_class_ap={int(c): per_class_ap.get(int(c)) for c in (*base_classes, *novel_classes)},
        per_class_recall={int(c): per_class_recall.get(int(c)) for c in (*base_classes, *novel_classes)},
        base_map=base_map,
        novel_map=novel_map,
        avg_map=_avg_of_groups(base_map, novel_map),
        base_recall=base_recall,
        novel_recall=novel_recall,
        avg_recall=_avg_of_groups(base_recall, novel_recall),
    )


def forgetting_delta(report_before: MetricsReport, report_after: MetricsReport) -> dict:
    """Per-class AP drop (before minus after); absent on either side is skipped."""
    out = {}
    for c, b in report_before.per_class_ap.items():
        a = report_after.per_class_ap.get(int(c))
        if b is None or a is None:
            continue
        out[int(c)] = b - a
    return out
