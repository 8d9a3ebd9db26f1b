"""Detection, localization and clustering metrics."""

from __future__ import annotations

from collections import Counter
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import Box, iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AUC_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(21))


class EmptyTable(ValueError):
    pass


# ---------------------------------------------------------------------------
# average precision


def match_detections(detections, ground_truths: Mapping, iou_thresh: float):
    """TP flags for score-sorted detections and the number of GT boxes.

    ``detections`` is a sequence of ``(scene_id, Box, score)``; ``ground_truths``
    maps scene_id to a list of Boxes (one class). Each detection claims the
    highest-IoU still-unmatched GT box in its scene, if that IoU >= iou_thresh.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    used = {sid: np.zeros(len(b), dtype=bool) for sid, b in ground_truths.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        sid, box, _ = detections[i]
        gts = ground_truths.get(sid, [])
        best, best_iou = -1, -1.0
        for g, gbox in enumerate(gts):
            if used[sid][g]:
                continue
            v = iou(box, gbox)
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0 and best_iou >= iou_thresh:
            used[sid][best] = True
            tp[rank] = True
    n_gt = sum(len(b) for b in ground_truths.values())
    return tp, n_gt


def pr_curve(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections, ground_truths: Mapping, iou_thresh: float = 0.5) -> float:
    n_gt = sum(len(b) for b in ground_truths.values())
    if n_gt == 0:
        return 1.0 if len(detections) == 0 else 0.0
    if len(detections) == 0:
        return 0.0
    tp, n_gt = match_detections(detections, ground_truths, iou_thresh)
    return ap_from_pr(*pr_curve(tp, n_gt))


def split_by_class(detections: Mapping, ground_truths: Mapping):
    """Regroup ``{scene: [Detection]}`` and ``{scene: [(cls, Box)]}`` by class."""
    det_c: dict[int, list] = {}
    gt_c: dict[int, dict] = {}
    for sid, objs in ground_truths.items():
        for cls, box in objs:
            gt_c.setdefault(int(cls), {}).setdefault(sid, []).append(box)
    for sid, dets in detections.items():
        for d in dets:
            det_c.setdefault(int(d.label), []).append((sid, d.box, d.score))
    return det_c, gt_c


def mean_ap(detections: Mapping, ground_truths: Mapping, thresholds=(0.3, 0.5)) -> dict:
    """Per-class AP at each threshold plus mAP30 / mAP50 / COCO-style mAP.

    0.3, 0.5 and the COCO thresholds are always evaluated.

    Means are unweighted over the classes present in the ground truth.
    """
    det_c, gt_c = split_by_class(detections, ground_truths)
    all_thr = sorted(set(float(t) for t in thresholds) | {0.3, 0.5} | set(COCO_THRESHOLDS))
    classes = sorted(gt_c)
    per_class = {c: {t: average_precision(det_c.get(c, []), gt_c[c], t) for t in all_thr}
                 for c in classes}

    def mean_at(t):
        return float(np.mean([per_class[c][t] for c in classes])) if classes else 0.0

    return {
        "per_class_ap": {c: {f"{t:.2f}": v for t, v in aps.items()} for c, aps in per_class.items()},
        "map": {f"{t:.2f}": mean_at(t) for t in all_thr},
        "map30": mean_at(0.3),
        "map50": mean_at(0.5),
        "map_coco": float(np.mean([mean_at(t) for t in COCO_THRESHOLDS])),
    }


def class_agnostic(detections: Mapping, ground_truths: Mapping):
    dets = {sid: [type(d)(d.box, 0, d.score) for d in ds] for sid, ds in detections.items()}
    gts = {sid: [(0, b) for _, b in objs] for sid, objs in ground_truths.items()}
    return dets, gts


def recall_at(detections: Mapping, boxes: Mapping, iou_thresh: float = 0.5) -> float:
    """Fraction of GT boxes covered (any label) by a detection at IoU >= iou_thresh."""
    hit = total = 0
    for sid, gts in boxes.items():
        dets = detections.get(sid, [])
        for g in gts:
            total += 1
            hit += any(iou(d.box, g) >= iou_thresh for d in dets)
    return hit / total if total else 1.0


# ---------------------------------------------------------------------------
# binarized localization maps


def rasterize(boxes: Sequence[Box], image_dims: tuple[int, int]) -> np.ndarray:
    """Pixels whose centres satisfy x1 <= x < x2 and y1 <= y < y2 for some box."""
    H, W = image_dims
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    out = np.zeros((H, W), dtype=bool)
    for b in boxes:
        out |= (xs >= b.x1) & (xs < b.x2) & (ys >= b.y1) & (ys < b.y2)
    return out


def _map_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.count_nonzero(pred | gt)
    return np.count_nonzero(pred & gt) / union if union else 1.0


def binarized_ciou(detections: Sequence, score_thresh: float, gt_boxes: Sequence,
                   image_dims: tuple[int, int], per_class: bool = False) -> float:
    """IoU between the union map of confident detections and the union map of GT boxes.

    With ``per_class``, ``gt_boxes`` holds ``(class_id, Box)`` pairs and the
    result is the mean IoU of per-class maps over classes present in either.
    """
    kept = [d for d in detections if d.score >= score_thresh]
    if not per_class:
        gts = [g[1] if isinstance(g, tuple) else g for g in gt_boxes]
        return _map_iou(rasterize([d.box for d in kept], image_dims), rasterize(gts, image_dims))
    classes = sorted({d.label for d in kept} | {c for c, _ in gt_boxes})
    if not classes:
        return 1.0
    vals = [
        _map_iou(rasterize([d.box for d in kept if d.label == c], image_dims),
                 rasterize([b for k, b in gt_boxes if k == c], image_dims))
        for c in classes
    ]
    return float(np.mean(vals))


def localization_auc(ciou_values: Sequence[float], thresholds=AUC_THRESHOLDS) -> float:
    """Area under the success-rate curve: mean over thresholds of P(cIoU >= t)."""
    v = np.asarray(ciou_values, dtype=np.float64)
    if v.size == 0:
        return 0.0
    return float(np.mean([np.mean(v >= t) for t in thresholds]))


# ---------------------------------------------------------------------------
# cluster to class alignment


def contingency_table(clusters: Sequence[int], classes: Sequence[int], K_pred: int, K_true: int) -> np.ndarray:
    table = np.zeros((K_pred, K_true), dtype=np.int64)
    np.add.at(table, (np.asarray(clusters, dtype=np.intp), np.asarray(classes, dtype=np.intp)), 1)
    return table


def hungarian_match(table) -> dict[int, int]:
    """Injective cluster -> class map maximizing the total matched count."""
    t = np.asarray(table)
    rows, cols = linear_sum_assignment(t, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def argmax_match(table) -> dict[int, int]:
    """Majority vote per cluster (ties to the smaller class); empty clusters stay unmapped."""
    t = np.asarray(table)
    return {k: int(np.argmax(row)) for k, row in enumerate(t) if row.sum() > 0}


def kshot_match(clusters: Sequence[int], strengths: Sequence[float], true_labels: Sequence[int],
                m: int) -> dict[int, int]:
    """Name each cluster by majority vote over its ``m`` most strongly associated items."""
    if m < 1:
        raise ValueError("m must be at least 1")
    clusters = np.asarray(clusters)
    strengths = np.asarray(strengths, dtype=np.float64)
    true_labels = np.asarray(true_labels)
    out = {}
    for k in np.unique(clusters):
        members = np.flatnonzero(clusters == k)
        top = members[np.argsort(-strengths[members], kind="stable")[:m]]
        votes = Counter(int(c) for c in true_labels[top])
        best = max(votes.values())
        out[int(k)] = min(c for c, v in votes.items() if v == best)
    return out


def matched_accuracy(clusters: Sequence[int], classes: Sequence[int], matching: Mapping[int, int]) -> float:
    clusters = np.asarray(clusters)
    classes = np.asarray(classes)
    if clusters.size == 0:
        return 0.0
    mapped = np.array([matching.get(int(k), -1) for k in clusters])
    return float(np.mean(mapped == classes))


def purity(table) -> float:
    t = np.asarray(table)
    total = t.sum()
    if total <= 0:
        raise EmptyTable("contingency table is empty")
    return float(t.max(axis=1).sum() / total)


def relabel_detections(detections: Mapping, matching: Mapping[int, int]) -> dict:
    """Rename cluster labels to classes; detections of unmapped clusters are dropped."""
    out = {}
    for sid, dets in detections.items():
        out[sid] = [type(d)(d.box, matching[d.label], d.score) for d in dets if d.label in matching]
    return out
