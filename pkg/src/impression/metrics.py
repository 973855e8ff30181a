"""Box decoding and mean average precision."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .nets import DetectionGrid


@dataclass(frozen=True)
class Detection:
    frame_index: int
    cls: int
    confidence: float
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class GroundTruth:
    frame_index: int
    cls: int
    box: tuple[float, float, float, float]


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        raise ValueError(f"degenerate box in iou({a}, {b})")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP from a confidence-ordered TP indicator."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    rec = ctp / n_gt
    prec = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(dets: list[Detection], gts: list[GroundTruth], iou_threshold: float) -> np.ndarray:
    """Greedy matching in descending confidence; returns the TP indicator in that order.

    Each detection takes the highest-IoU ground truth of its frame that is
    still unmatched and clears the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    by_frame = defaultdict(list)
    for j, g in enumerate(gts):
        by_frame[g.frame_index].append(j)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for j in by_frame.get(d.frame_index, ()):
            if used[j]:
                continue
            o = iou(d.box, gts[j].box)
            if o >= best_iou:
                best, best_iou = j, o
        if best >= 0:
            used[best] = True
            tp[rank] = 1.0
    return tp


def compute_map(detections, ground_truth, iou_threshold: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP and their mean over classes that have ground truth."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    dets_by_cls, gts_by_cls = defaultdict(list), defaultdict(list)
    for d in detections:
        dets_by_cls[d.cls].append(d)
    for g in ground_truth:
        gts_by_cls[g.cls].append(g)
    aps = {}
    for c in sorted(gts_by_cls):
        tp = match_detections(dets_by_cls.get(c, []), gts_by_cls[c], iou_threshold)
        aps[c] = average_precision(tp, len(gts_by_cls[c]))
    mean = float(np.mean(list(aps.values()))) if aps else 0.0
    return aps, mean


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode_detections(grid: DetectionGrid, confidence_floor: float = 0.05, nms_iou: float = 0.5,
                      frame_index: int = 0) -> list[Detection]:
    """Decode cells with objectness probability above the floor, then per-class NMS.

    Confidence is objectness probability times the winning class probability.
    """
    if not (0 < confidence_floor < 1 and 0 < nms_iou < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    s = grid.stride
    p_obj = _sigmoid(grid.objectness)
    ys, xs = np.nonzero(p_obj > confidence_floor)
    if len(ys) == 0:
        return []
    logits = grid.class_logits[:, ys, xs]
    e = np.exp(logits - logits.max(axis=0))
    p_cls = e / e.sum(axis=0)
    cls = p_cls.argmax(axis=0)
    conf = p_obj[ys, xs] * p_cls[cls, np.arange(len(cls))]
    dx, dy, tw, th = grid.boxes[:, ys, xs]
    cx = (xs + 0.5 + dx) * s
    cy = (ys + 0.5 + dy) * s
    bw = np.exp(np.clip(tw, -10, 10)) * s
    bh = np.exp(np.clip(th, -10, 10)) * s
    candidates = [
        Detection(frame_index, int(c), float(p), (float(x - w / 2), float(y - h / 2), float(x + w / 2), float(y + h / 2)))
        for c, p, x, y, w, h in zip(cls, conf, cx, cy, bw, bh)
    ]
    return nms(candidates, nms_iou)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression."""
    keep: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.confidence):
        if all(k.cls != d.cls or iou(k.box, d.box) <= iou_threshold for k in keep):
            keep.append(d)
    return keep
