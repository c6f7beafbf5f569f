"""Similarity scoring and one-to-one assignment of predictions to targets.

A prediction matches a target through a product of a class-agreement term
and a geometry term. The default geometry term is an exponential of the
summed absolute word differences; two variants swap in corner distances or
the 3D IoU. Assignment maximizes total similarity over injective maps from
targets into prediction pixels; unmatched pixels implicitly pair with the
empty target at similarity zero.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import MatchingError
from .geometry import Box3D, box_corners, iou3d
from .seq_decoder import DenseSequenceMap
from .words import ObjectSequence, RegionWord, decode, encode

VARIANTS = ("word_distance", "corner_distance", "iou3d")

# Candidate pixels for a target are taken within this many cells of its
# center; everything farther contributes an exact zero to the cost matrix.
DEFAULT_MATCH_RADIUS = 8.0


@dataclass(frozen=True)
class SimilarityMetric:
    """Scoring configuration: geometry variant and class/geometry balance.

    `corrected_iou` replaces the iou3d variant's exp(-(1-alpha)*iou), which
    rewards low overlap, with exp(-(1-alpha)*(1-iou)). The uncorrected form
    is the default so the variant comparison stays reproducible.
    """

    variant: str = "word_distance"
    alpha: float = 0.25
    corrected_iou: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown similarity variant {self.variant!r}")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class MatchResult:
    """Injective assignment of target indices to prediction pixel indices."""

    gt_to_pixel: tuple
    pair_similarities: tuple
    total: float

    def __post_init__(self):
        if len(set(self.gt_to_pixel)) != len(self.gt_to_pixel):
            raise MatchingError("assignment must be injective")


def _word_sum(pred: ObjectSequence, gt: ObjectSequence) -> float:
    """Summed absolute word differences; region centers compared in meters."""
    d = abs(pred.region.r_x - gt.region.r_x) + abs(pred.region.r_y - gt.region.r_y)
    d += abs(pred.location.l_x - gt.location.l_x)
    d += abs(pred.location.l_y - gt.location.l_y)
    d += abs(pred.location.z - gt.location.z)
    d += abs(pred.orientation.s - gt.orientation.s)
    d += abs(pred.orientation.c - gt.orientation.c)
    d += abs(pred.size.u_l - gt.size.u_l)
    d += abs(pred.size.u_w - gt.size.u_w)
    d += abs(pred.size.u_h - gt.size.u_h)
    return d


def similarity(pred: ObjectSequence, gt, metric: SimilarityMetric) -> float:
    """Score in [0, 1]; the empty target (None) scores exactly 0."""
    if gt is None:
        return 0.0
    class_term = float(np.dot(pred.category.p, gt.category.p)) ** metric.alpha
    scale = 1.0 - metric.alpha
    if metric.variant == "word_distance":
        geom = math.exp(-scale * _word_sum(pred, gt))
    elif metric.variant == "corner_distance":
        pb, _ = decode(pred)
        gb, _ = decode(gt)
        geom = math.exp(-scale * float(np.abs(box_corners(pb) - box_corners(gb)).sum()))
    else:
        pb, _ = decode(pred)
        gb, _ = decode(gt)
        overlap = iou3d(pb, gb)
        if metric.corrected_iou:
            overlap = 1.0 - overlap
        geom = math.exp(-scale * overlap)
    return class_term * geom


def gt_against_region(box: Box3D, region: RegionWord, n_classes: int) -> ObjectSequence:
    """Encode a target box as the sequence a prediction at `region` should emit."""
    return encode(box, region, n_classes)


def _decode_gts(gts):
    """Target boxes (class_id included) recovered from target sequences."""
    return [decode(gt)[0] for gt in gts]


def candidate_pixels(preds: DenseSequenceMap, gt_boxes, radius_cells: float) -> np.ndarray:
    """Indices of pixels within the pruning radius of any target center."""
    centers = preds.region_centers
    if not gt_boxes or not math.isfinite(radius_cells):
        return np.arange(len(centers))
    limit = radius_cells * preds.grid.cell
    keep = np.zeros(len(centers), dtype=bool)
    for box in gt_boxes:
        d2 = (centers[:, 0] - box.x) ** 2 + (centers[:, 1] - box.y) ** 2
        keep |= d2 <= limit * limit
    return np.flatnonzero(keep)


def similarity_columns(preds: DenseSequenceMap, box: Box3D, pixels: np.ndarray,
                       metric: SimilarityMetric) -> np.ndarray:
    """Similarity of each listed pixel's prediction against one target."""
    class_term = preds.cat_probs.data[pixels, box.class_id] ** metric.alpha
    scale = 1.0 - metric.alpha
    if metric.variant == "word_distance":
        r_l, r_w = preds.region_extent
        centers = preds.region_centers[pixels]
        target_loc = np.column_stack([
            (box.x - centers[:, 0]) / r_l,
            (box.y - centers[:, 1]) / r_w,
            np.full(len(pixels), box.z),
        ])
        target_ori = np.array([math.sin(box.theta), math.cos(box.theta)])
        target_size = np.log([box.l, box.w, box.h])
        d = np.abs(preds.loc.data[pixels] - target_loc).sum(axis=1)
        d += np.abs(preds.ori.data[pixels] - target_ori).sum(axis=1)
        d += np.abs(preds.size.data[pixels] - target_size).sum(axis=1)
        return class_term * np.exp(-scale * d)
    geom = np.empty(len(pixels))
    gt_corners = None
    if metric.variant == "corner_distance":
        gt_corners = box_corners(box)
    for i, p in enumerate(pixels):
        pb, _ = decode(preds.sequence_at(int(p)))
        if metric.variant == "corner_distance":
            geom[i] = math.exp(-scale * float(np.abs(box_corners(pb) - gt_corners).sum()))
        else:
            overlap = iou3d(pb, box)
            if metric.corrected_iou:
                overlap = 1.0 - overlap
            geom[i] = math.exp(-scale * overlap)
    return class_term * geom


def match(preds: DenseSequenceMap, gts, metric: SimilarityMetric,
          radius_cells: float = DEFAULT_MATCH_RADIUS) -> MatchResult:
    """Maximum-total-similarity assignment of targets to prediction pixels.

    Reduces the padded square problem to a rectangular one over the targets
    and the pruned candidate pixels: similarities are nonnegative and the
    empty target scores zero, so leaving a pixel unassigned never beats any
    assignment the square problem could make.
    """
    n_gt = len(gts)
    if n_gt == 0:
        return MatchResult(gt_to_pixel=(), pair_similarities=(), total=0.0)
    if n_gt > preds.n_pixels:
        raise MatchingError(f"{n_gt} targets exceed {preds.n_pixels} pixels")
    boxes = _decode_gts(gts)
    pixels = candidate_pixels(preds, boxes, radius_cells)
    if len(pixels) < n_gt:
        spare = np.setdiff1d(np.arange(preds.n_pixels), pixels)
        pixels = np.concatenate([pixels, spare[: n_gt - len(pixels)]])
    scores = np.zeros((n_gt, len(pixels)))
    for j, box in enumerate(boxes):
        scores[j] = similarity_columns(preds, box, pixels, metric)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    order = np.argsort(rows)
    assigned = pixels[cols[order]]
    pair = scores[rows[order], cols[order]]
    return MatchResult(
        gt_to_pixel=tuple(int(p) for p in assigned),
        pair_similarities=tuple(float(s) for s in pair),
        total=float(pair.sum()),
    )


def brute_force_match(preds, gts, metric: SimilarityMetric) -> MatchResult:
    """Exhaustive assignment oracle over explicit sequence lists.

    Scores pairs exactly as `match` does: each target is re-encoded against
    the candidate prediction's region before the scalar similarity.
    """
    if len(preds) > 8 or len(gts) > 8:
        raise MatchingError(
            f"brute force capped at 8x8, got {len(gts)}x{len(preds)}")
    if len(gts) > len(preds):
        raise MatchingError(f"{len(gts)} targets exceed {len(preds)} predictions")
    if not gts:
        return MatchResult(gt_to_pixel=(), pair_similarities=(), total=0.0)
    n_classes = preds[0].category.n_classes
    boxes = _decode_gts(gts)
    scores = np.zeros((len(gts), len(preds)))
    for j, box in enumerate(boxes):
        for i, pred in enumerate(preds):
            target = gt_against_region(box, pred.region, n_classes)
            scores[j, i] = similarity(pred, target, metric)
    best_total, best_assign = -1.0, None
    for perm in itertools.permutations(range(len(preds)), len(gts)):
        total = sum(scores[j, p] for j, p in enumerate(perm))
        if total > best_total:
            best_total, best_assign = total, perm
    return MatchResult(
        gt_to_pixel=tuple(best_assign),
        pair_similarities=tuple(float(scores[j, p]) for j, p in enumerate(best_assign)),
        total=float(best_total),
    )
