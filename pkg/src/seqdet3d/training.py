"""Set-to-set detection loss and the optimization loop.

Each step matches every scene's targets to prediction pixels (the
assignment is computed from forward values and treated as fixed), then
penalizes matched pixels for word errors and every pixel for its class
probabilities: matched pixels target their assigned class, all others
target background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLossError
from .matching import DEFAULT_MATCH_RADIUS, MatchResult, SimilarityMetric, match
from .model import DetectionModel
from .numerics import (
    Tensor,
    adam_step,
    atan2,
    clip_value,
    constant,
    cosine_lr,
    exp,
    huber,
    log_softmax,
    mean,
    pow_const,
    save_checkpoint,
    take_col,
    take_per_row,
    take_rows,
    tsum,
)
from .scenegen import Scene
from .seq_decoder import DenseSequenceMap
from .words import RegionWord, decode, encode


@dataclass(frozen=True)
class LossConfig:
    """Loss shape: focal classification plus weighted box regression."""

    lambda_reg: float = 2.0
    gamma: float = 2.0
    alpha_f: float = 0.25

    def __post_init__(self):
        # zero is allowed so the classification-only degeneracy stays testable
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha_f <= 0:
            raise ValueError(f"alpha_f must be > 0, got {self.alpha_f}")


@dataclass(frozen=True)
class TrainConfig:
    """Run shape: schedule, batching, seeding, checkpoint cadence."""

    epochs: int
    batch_size: int = 2
    lr: float = 1e-3
    horizon: int = 0          # cosine schedule length in steps; 0 = all steps
    seed: int = 0
    checkpoint_every: int = 500
    dataset: str = ""

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for field in ("batch_size", "lr", "checkpoint_every"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")
        if self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")


def gt_sequences(scene: Scene, n_classes: int) -> list:
    """Encode a scene's boxes as target sequences against a fixed anchor."""
    anchor = RegionWord(0.0, 0.0, 1.0, 1.0)
    return [encode(box, anchor, n_classes) for box in scene.boxes]


def classification_loss(preds: DenseSequenceMap, gts, match_result: MatchResult,
                        cfg: LossConfig) -> Tensor:
    """Softmax focal loss over all pixels, divided by max(1, matched count).

    FL(p_t) = -alpha_f * (1 - p_t)^gamma * log p_t, where p_t is the
    probability of the pixel's target class (assigned class at matched
    pixels, background elsewhere).
    """
    n_pixels = preds.n_pixels
    background = preds.n_classes
    targets = np.full(n_pixels, background, dtype=np.int64)
    for j, pixel in enumerate(match_result.gt_to_pixel):
        targets[pixel] = decode(gts[j])[0].class_id
    log_probs = log_softmax(preds.cat_logits)
    log_pt = take_per_row(log_probs, targets)
    pt = exp(log_pt)
    focal = pow_const(-pt + 1.0, cfg.gamma) * log_pt
    scale = -cfg.alpha_f / max(1, len(match_result.gt_to_pixel))
    return scale * tsum(focal)


def regression_loss(preds: DenseSequenceMap, gts, match_result: MatchResult,
                    cfg: LossConfig) -> Tensor:
    """Smooth-L1 on decoded (x, y, z, l, w, h) plus the wrapped heading gap.

    Both sides are decoded to box parameters; the heading difference is
    re-wrapped to [-pi, pi) via atan2 of its sine and cosine, so a target
    just across the branch cut costs its small geometric gap. Mean over
    matched pairs; exactly zero when nothing is matched.
    """
    n_matched = len(match_result.gt_to_pixel)
    if n_matched == 0:
        return constant(0.0)
    idx = np.asarray(match_result.gt_to_pixel, dtype=np.int64)
    boxes = [decode(gts[j])[0] for j in range(n_matched)]
    centers = preds.region_centers[idx]
    r_l, r_w = preds.region_extent

    loc = take_rows(preds.loc, idx)
    ori = take_rows(preds.ori, idx)
    size = take_rows(preds.size, idx)

    x = take_col(loc, 0) * r_l + constant(centers[:, 0])
    y = take_col(loc, 1) * r_w + constant(centers[:, 1])
    z = take_col(loc, 2)
    dims = [exp(clip_value(take_col(size, k), -500.0, 500.0)) for k in range(3)]

    tx = np.array([b.x for b in boxes])
    ty = np.array([b.y for b in boxes])
    tz = np.array([b.z for b in boxes])
    tl = np.array([b.l for b in boxes])
    tw = np.array([b.w for b in boxes])
    th = np.array([b.h for b in boxes])
    sin_t = np.sin([b.theta for b in boxes])
    cos_t = np.cos([b.theta for b in boxes])

    s, c = take_col(ori, 0), take_col(ori, 1)
    # sin/cos of (theta_pred - theta_gt), up to the positive factor |(s, c)|,
    # which atan2 cancels: the heading gap never sees the branch cut
    delta_sin = s * constant(cos_t) - c * constant(sin_t)
    delta_cos = c * constant(cos_t) + s * constant(sin_t)
    delta_theta = atan2(delta_sin, delta_cos)

    per_pair = huber(x - constant(tx))
    per_pair = per_pair + huber(y - constant(ty))
    per_pair = per_pair + huber(z - constant(tz))
    per_pair = per_pair + huber(dims[0] - constant(tl))
    per_pair = per_pair + huber(dims[1] - constant(tw))
    per_pair = per_pair + huber(dims[2] - constant(th))
    per_pair = per_pair + huber(delta_theta)
    return mean(per_pair)


def total_loss(preds: DenseSequenceMap, gts, match_result: MatchResult,
               cfg: LossConfig) -> Tensor:
    """classification + lambda_reg * regression, on one shared match."""
    cls = classification_loss(preds, gts, match_result, cfg)
    reg = regression_loss(preds, gts, match_result, cfg)
    return cls + cfg.lambda_reg * reg


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo: lo + batch_size]


def fit(model: DetectionModel, scenes, train_cfg: TrainConfig, loss_cfg: LossConfig,
        metric: SimilarityMetric = SimilarityMetric(),
        radius_cells: float = DEFAULT_MATCH_RADIUS,
        metrics_path=None, checkpoint_path=None, start_step: int = 0,
        progress=None) -> list:
    """Run the optimization loop; returns the per-step metric rows.

    Each step: batch forward -> match -> loss -> backward -> Adam with a
    cosine learning rate. Metric rows {step, lr, loss_cls, loss_reg,
    loss_total, matched} are returned and, when `metrics_path` is given,
    appended there as JSON lines. `start_step` continues a resumed run's
    schedule. `progress` (a callable, given each row) reports liveness.
    """
    if not scenes:
        raise ValueError("cannot fit on an empty scene list")
    steps_per_epoch = math.ceil(len(scenes) / train_cfg.batch_size)
    planned = start_step + train_cfg.epochs * steps_per_epoch
    horizon = train_cfg.horizon if train_cfg.horizon > 0 else max(planned, 1)
    gts_per_scene = [gt_sequences(s, model.n_classes) for s in scenes]

    rows = []
    log = open(metrics_path, "a") if metrics_path else None
    step = start_step
    try:
        for epoch in range(train_cfg.epochs):
            rng = np.random.default_rng([train_cfg.seed, epoch])
            for batch in _batches(len(scenes), train_cfg.batch_size, rng):
                model.store.zero_grad()
                value = 0.0
                cls_sum = reg_sum = 0.0
                matched = 0
                inv = 1.0 / len(batch)
                for si in batch:
                    preds = model.forward(scenes[si])
                    # a diverged model shows up here first, as NaN words;
                    # report it as a non-finite loss rather than letting the
                    # assignment solver reject the score matrix
                    for arr in (preds.loc.data, preds.ori.data, preds.size.data,
                                preds.cat_logits.data):
                        if not np.isfinite(arr).all():
                            raise NonFiniteLossError(step=step, value=float("nan"))
                    gts = gts_per_scene[si]
                    result = match(preds, gts, metric, radius_cells)
                    assert len(set(result.gt_to_pixel)) == len(gts)
                    cls = classification_loss(preds, gts, result, loss_cfg)
                    reg = regression_loss(preds, gts, result, loss_cfg)
                    scene_loss = inv * (cls + loss_cfg.lambda_reg * reg)
                    scene_value = float(scene_loss.data)
                    if not math.isfinite(scene_value):
                        raise NonFiniteLossError(step=step, value=scene_value)
                    # backward now, while only this scene's graph is alive:
                    # leaf grads accumulate across calls, so the batch
                    # gradient is unchanged but peak memory stays flat as
                    # batch_size grows
                    scene_loss.backward()
                    value += scene_value
                    cls_sum += float(cls.data)
                    reg_sum += float(reg.data)
                    matched += len(result.gt_to_pixel)
                lr = cosine_lr(train_cfg.lr, step, horizon)
                adam_step(model.store, lr)
                step += 1
                row = {
                    "step": step,
                    "lr": lr,
                    "loss_cls": cls_sum / len(batch),
                    "loss_reg": reg_sum / len(batch),
                    "loss_total": value,
                    "matched": matched,
                }
                rows.append(row)
                if log is not None:
                    log.write(json.dumps(row) + "\n")
                    log.flush()
                if progress is not None:
                    progress(row)
                if checkpoint_path and step % train_cfg.checkpoint_every == 0:
                    save_checkpoint(model.store, checkpoint_path)
        if checkpoint_path and step > start_step:
            save_checkpoint(model.store, checkpoint_path)
    finally:
        if log is not None:
            log.close()
    return rows
