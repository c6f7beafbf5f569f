"""NMS-free detection filtering and average-precision evaluation.

Inference keeps every pixel whose best foreground probability clears a
score threshold; nothing is suppressed, because distinct objects decode
to distinct sequences and duplicates are trained away rather than pruned.
Quality is summarized as per-class average precision over a pooled split,
with extra AP numbers for near (under 30 m) and far targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, bev_iou, iou3d
from .seq_decoder import DenseSequenceMap
from .words import decode

DEFAULT_SCORE_THRESHOLD = 0.2
IOU_KINDS = ("bev", "3d")
_NEAR_FAR_SPLIT_M = 30.0

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "ap": {"type": ["number", "null"]},
                    "ap_0_30m": {"type": ["number", "null"]},
                    "ap_30m_plus": {"type": ["number", "null"]},
                },
                "required": ["ap", "ap_0_30m", "ap_30m_plus"],
                "additionalProperties": False,
            },
        },
        "map": {"type": ["number", "null"]},
        "scene_count": {"type": "integer", "minimum": 0},
        "threshold_config": {
            "type": "object",
            "properties": {
                "score_threshold": {"type": "number"},
                "iou_kind": {"enum": list(IOU_KINDS)},
                "iou": {"type": "object", "additionalProperties": {"type": "number"}},
            },
            "required": ["score_threshold", "iou_kind", "iou"],
            "additionalProperties": False,
        },
    },
    "required": ["per_class", "map", "scene_count", "threshold_config"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class Detection:
    """One decoded object: a box, its class, and the class probability."""

    box: Box3D
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def filter_predictions(preds: DenseSequenceMap,
                       threshold: float = DEFAULT_SCORE_THRESHOLD) -> list:
    """Decode every pixel whose best foreground probability is >= threshold.

    Returns detections in pixel order. No suppression of any kind: pixels
    that decode to overlapping or identical boxes are all kept.
    """
    probs = preds.cat_probs.data
    best = probs[:, :preds.n_classes].max(axis=1)
    out = []
    for pixel in np.flatnonzero(best >= threshold):
        box, score = decode(preds.sequence_at(int(pixel)))
        out.append(Detection(box=box, score=score, class_id=box.class_id))
    return out


def _iou_fn(iou_kind: str):
    if iou_kind == "bev":
        return bev_iou
    if iou_kind == "3d":
        return iou3d
    raise ValueError(f"iou_kind must be one of {IOU_KINDS}, got {iou_kind!r}")


def _pr_curve(dets, gts, iou_threshold: float, iou_kind: str):
    """Greedy-matched precision/recall arrays in descending-score order.

    Each detection matches the highest-IoU unmatched ground truth of its
    own class, if that IoU clears the threshold. Equal scores keep their
    input order (detections arrive in pixel order, so the tie-break is by
    pixel index).
    """
    iou = _iou_fn(iou_kind)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        det = dets[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt)
            if v >= iou_threshold and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / len(gts)
    precision = tp_cum / (tp_cum + fp_cum)
    return recall, precision


def average_precision(dets, gts, iou_threshold: float, iou_kind: str = "3d"):
    """Area under the precision-recall curve, all-points interpolation.

    Returns None when `gts` is empty (no recall axis to integrate over)
    and 0.0 when there are targets but no detections.
    """
    _iou_fn(iou_kind)
    if not gts:
        return None
    if not dets:
        return 0.0
    recall, precision = _pr_curve(dets, gts, iou_threshold, iou_kind)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass(frozen=True)
class EvalReport:
    """Per-class AP (overall and by range bucket) plus the pooled curves."""

    per_class: dict
    mean_ap: object
    scene_count: int
    threshold_config: dict
    pr_samples: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": {name: dict(stats) for name, stats in self.per_class.items()},
            "map": self.mean_ap,
            "scene_count": self.scene_count,
            "threshold_config": dict(self.threshold_config),
        }


def _range_m(box: Box3D) -> float:
    return math.hypot(box.x, box.y)


def evaluate(model, scenes, class_names, iou_thresholds,
             score_threshold: float = DEFAULT_SCORE_THRESHOLD,
             iou_kind: str = "3d") -> EvalReport:
    """Run inference over `scenes` and pool per-class average precision.

    `iou_thresholds` is either one float for every class or a mapping from
    class name to its IoU threshold. Classes with no ground truth in the
    split report None. The mean AP averages the defined per-class values
    (None when nothing is defined, e.g. an empty split).
    """
    _iou_fn(iou_kind)
    if isinstance(iou_thresholds, dict):
        missing = [n for n in class_names if n not in iou_thresholds]
        if missing:
            raise ValueError(f"no IoU threshold for classes {missing}")
        thresholds = {n: float(iou_thresholds[n]) for n in class_names}
    else:
        thresholds = {n: float(iou_thresholds) for n in class_names}

    dets_by_class = {cid: [] for cid in range(len(class_names))}
    gts_by_class = {cid: [] for cid in range(len(class_names))}
    for scene in scenes:
        for det in filter_predictions(model.forward(scene), score_threshold):
            if det.class_id in dets_by_class:
                dets_by_class[det.class_id].append(det)
        for box in scene.boxes:
            gts_by_class[box.class_id].append(box)

    near = (0.0, _NEAR_FAR_SPLIT_M)
    far = (_NEAR_FAR_SPLIT_M, math.inf)
    per_class = {}
    pr_samples = {}
    defined = []
    for cid, name in enumerate(class_names):
        dets, gts = dets_by_class[cid], gts_by_class[cid]
        thr = thresholds[name]
        stats = {"ap": average_precision(dets, gts, thr, iou_kind)}
        for key, (lo, hi) in (("ap_0_30m", near), ("ap_30m_plus", far)):
            bucket_dets = [d for d in dets if lo <= _range_m(d.box) < hi]
            bucket_gts = [g for g in gts if lo <= _range_m(g) < hi]
            stats[key] = average_precision(bucket_dets, bucket_gts, thr, iou_kind)
        per_class[name] = stats
        if gts:
            recall, precision = _pr_curve(dets, gts, thr, iou_kind)
            pr_samples[name] = list(zip(recall.tolist(), precision.tolist()))
        else:
            pr_samples[name] = []
        if stats["ap"] is not None:
            defined.append(stats["ap"])

    mean_ap = float(np.mean(defined)) if defined else None
    return EvalReport(
        per_class=per_class,
        mean_ap=mean_ap,
        scene_count=len(scenes),
        threshold_config={"score_threshold": float(score_threshold),
                          "iou_kind": iou_kind, "iou": thresholds},
        pr_samples=pr_samples,
    )
