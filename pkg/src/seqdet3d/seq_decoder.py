"""Per-pixel auto-regressive word decoding over a BEV feature map.

Every pixel is a region word; the remaining four words are predicted one
at a time by a linear head over a hidden state. Between words, the hidden
state is refreshed by bilinearly sampling itself at locations computed from
the words decoded so far (1 point after the first word, then 4, then 4),
concatenating the samples, and projecting back to C channels with a relu.

Sample coordinates are constants of the gradient graph: gradients flow
through the sampled feature values only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import GridConfig
from .errors import ShapeMismatchError
from .numerics import ParamStore, Tensor, bilinear_sample, linear, relu, reshape, softmax
from .words import (
    CATEGORY,
    LOCATION,
    ORIENTATION,
    SIZE,
    CategoryWord,
    LocationWord,
    ObjectSequence,
    OrientationWord,
    RegionWord,
    SizeWord,
    WordOrder,
)

# Points sampled after the 1st, 2nd, and 3rd predicted words. No update
# happens after the final word.
SAMPLE_COUNTS = (1, 4, 4)

# Size words are clipped before exponentiation when decoding sampler
# geometry, mirroring the word codec.
_SIZE_CLIP = 500.0

_HEAD_DIMS = {LOCATION: 3, ORIENTATION: 2, SIZE: 3}


def head_dim(step: str, n_classes: int) -> int:
    return n_classes + 1 if step == CATEGORY else _HEAD_DIMS[step]


def decoder_param_names(n_positions: int = 3):
    names = [f"decoder/head_{s}/{p}" for s in "CLOS" for p in ("w", "b")]
    names += [f"decoder/agg{j + 1}/{p}" for j in range(n_positions) for p in ("w", "b")]
    return sorted(names)


def init_decoder_params(store: ParamStore, grid: GridConfig, n_classes: int,
                        rng: np.random.Generator):
    """Register decoder heads and aggregation projections.

    Heads start near-zero so initial predictions sit at their biases:
    location at the region center, orientation at (sin, cos) = (0, 1),
    sizes at 1 m, and the category mass almost entirely on background.
    """
    c = grid.c
    for step in (LOCATION, ORIENTATION, SIZE, CATEGORY):
        dim = head_dim(step, n_classes)
        store.add(f"decoder/head_{step}/w", rng.normal(0.0, 0.01, size=(c, dim)))
        if step == ORIENTATION:
            bias = np.array([0.0, 1.0])
        elif step == CATEGORY:
            bias = np.zeros(dim)
            bias[-1] = math.log(99.0 * n_classes)
        else:
            bias = np.zeros(dim)
        store.add(f"decoder/head_{step}/b", bias)
    for j, n_pts in enumerate(SAMPLE_COUNTS):
        # Start each aggregation as the mean of its sampled vectors plus
        # mixing noise: the refreshed state then carries the sampled
        # features through unmangled, so pixels whose samples land on
        # different cells keep distinguishable hidden states from step one.
        w = rng.normal(0.0, 0.3 / math.sqrt(n_pts * c), size=(n_pts * c, c))
        for k in range(n_pts):
            w[k * c:(k + 1) * c] += np.eye(c) / n_pts
        store.add(f"decoder/agg{j + 1}/w", w)
        # Nonzero bias keeps pixels whose samples all land out of bounds off
        # the relu kink, where finite differences cannot match reverse mode.
        store.add(f"decoder/agg{j + 1}/b", rng.normal(0, 0.01, size=c))


def init_hidden(feature_map: Tensor) -> Tensor:
    """The first hidden state is the BEV feature map itself."""
    return feature_map


def predict_word(hidden: Tensor, step: str, store: ParamStore, n_classes: int) -> Tensor:
    """Apply the step head at every pixel: (H, W, C) -> (H*W, dim)."""
    h, w, c = hidden.shape
    weights = store[f"decoder/head_{step}/w"]
    if weights.data.shape != (c, head_dim(step, n_classes)):
        raise ShapeMismatchError(
            f"head for step {step}: weights {weights.data.shape}, hidden C={c}")
    flat = reshape(hidden, (h * w, c))
    return linear(flat, weights, store[f"decoder/head_{step}/b"])


def _decode_centers(words: dict, centers: np.ndarray, extent) -> np.ndarray:
    """BEV centers in meters from the location word, else the region centers."""
    if LOCATION in words:
        loc = words[LOCATION]
        xy = np.column_stack([
            centers[:, 0] + loc[:, 0] * extent[0],
            centers[:, 1] + loc[:, 1] * extent[1],
        ])
        bad = ~np.isfinite(xy).all(axis=1)
        if bad.any():
            xy[bad] = centers[bad]
        return xy
    return centers.copy()


def _decode_heading(words: dict, n: int):
    """(cos, sin) of the decoded heading, or the zero heading."""
    if ORIENTATION in words:
        ori = words[ORIENTATION]
        theta = np.arctan2(ori[:, 0], ori[:, 1])
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        bad = ~np.isfinite(theta)
        if bad.any():
            cos_t[bad] = 1.0
            sin_t[bad] = 0.0
        return cos_t, sin_t
    return np.ones(n), np.zeros(n)


def sample_points(words: dict, position: int, grid: GridConfig,
                  region_centers: np.ndarray, region_extent) -> np.ndarray:
    """Sample locations for the update after the word at `position`.

    `words` maps already-predicted step symbols to raw (H*W, dim) arrays.
    Words a pattern needs but that are not yet predicted fall back to
    defaults: region center for location, zero heading for orientation,
    cell-size footprint for size. Non-finite decoded values (a diverged
    model) take the same fallbacks, so the returned coordinates are always
    finite. Returns meters, shape (H*W, n_points, 2).
    """
    n = len(region_centers)
    centers = _decode_centers(words, region_centers, region_extent)
    if position == 0:
        return centers.reshape(n, 1, 2)
    cos_t, sin_t = _decode_heading(words, n)
    u = np.column_stack([cos_t, sin_t])
    v = np.column_stack([-sin_t, cos_t])
    if position == 1:
        half_l, half_w = 0.5 * region_extent[0], 0.5 * region_extent[1]
        probes = np.stack([
            centers + half_l * u,
            centers - half_l * u,
            centers + half_w * v,
            centers - half_w * v,
        ], axis=1)
        return probes
    if position == 2:
        if SIZE in words:
            size = np.exp(np.clip(words[SIZE], -_SIZE_CLIP, _SIZE_CLIP))
            size = np.where(np.isfinite(size), size, grid.cell)
            half_l, half_w = 0.5 * size[:, 0:1], 0.5 * size[:, 1:2]
        else:
            half_l = np.full((n, 1), 0.5 * grid.cell)
            half_w = np.full((n, 1), 0.5 * grid.cell)
        # footprint corner order: counter-clockwise from the +l/+w corner
        corners = np.stack([
            centers + half_l * u + half_w * v,
            centers - half_l * u + half_w * v,
            centers - half_l * u - half_w * v,
            centers + half_l * u - half_w * v,
        ], axis=1)
        return corners
    raise ValueError(f"no sample pattern for position {position}")


def update_hidden(hidden: Tensor, points_m: np.ndarray, position: int,
                  store: ParamStore, grid: GridConfig) -> Tensor:
    """Refresh the hidden state from bilinear samples at `points_m` (meters).

    Every pixel gathers its n points from the frozen current state,
    concatenates them, and applies the position's linear + relu projection.
    """
    h, w, c = hidden.shape
    n_pts = SAMPLE_COUNTS[position]
    if points_m.shape != (h * w, n_pts, 2):
        raise ShapeMismatchError(
            f"position {position} expects points ({h * w}, {n_pts}, 2), got {points_m.shape}")
    cells = grid.meters_to_cells(points_m.reshape(-1, 2))
    sampled = bilinear_sample(hidden, cells)                  # (H*W*n, C)
    stacked = reshape(sampled, (h * w, n_pts * c))            # per-pixel concat
    out = relu(linear(stacked, store[f"decoder/agg{position + 1}/w"],
                      store[f"decoder/agg{position + 1}/b"]))
    return reshape(out, (h, w, c))


@dataclass
class DenseSequenceMap:
    """One predicted ObjectSequence per BEV pixel, as dense word tensors.

    The word tensors stay attached to the gradient graph; `sequence_at`
    materializes the per-pixel view used by matching and evaluation.
    """

    grid: GridConfig
    order: WordOrder
    n_classes: int
    region_extent: tuple
    region_centers: np.ndarray   # (H*W, 2) meters
    loc: Tensor                  # (H*W, 3)
    ori: Tensor                  # (H*W, 2)
    size: Tensor                 # (H*W, 3)
    cat_logits: Tensor           # (H*W, n+1)
    cat_probs: Tensor            # (H*W, n+1)
    sample_points: tuple         # meters, one (H*W, n_j, 2) array per update

    @property
    def n_pixels(self) -> int:
        return self.grid.n_pixels

    def region_at(self, pixel: int) -> RegionWord:
        cx, cy = self.region_centers[pixel]
        return RegionWord(r_x=float(cx), r_y=float(cy),
                          r_l=self.region_extent[0], r_w=self.region_extent[1])

    def sequence_at(self, pixel: int) -> ObjectSequence:
        loc = self.loc.data[pixel]
        ori = self.ori.data[pixel]
        size = self.size.data[pixel]
        return ObjectSequence(
            region=self.region_at(pixel),
            location=LocationWord(float(loc[0]), float(loc[1]), float(loc[2])),
            orientation=OrientationWord(float(ori[0]), float(ori[1])),
            size=SizeWord(float(size[0]), float(size[1]), float(size[2])),
            category=CategoryWord(self.cat_probs.data[pixel].copy()),
        )

    def sequences(self):
        return [self.sequence_at(i) for i in range(self.n_pixels)]


def decode_scene(feature_map: Tensor, store: ParamStore, order: WordOrder,
                 grid: GridConfig, n_classes: int, region_extent=None,
                 forced_sample_points=None) -> DenseSequenceMap:
    """Run the full four-word decode over every pixel.

    `forced_sample_points` (a tuple of three (H*W, n_j, 2) arrays in meters)
    replays recorded sampler locations instead of deriving them from the
    currently predicted words; gradient checks use this to freeze the
    coordinate constants while parameters are perturbed.
    """
    h, w, c = feature_map.shape
    if (h, w, c) != (grid.h, grid.w, grid.c):
        raise ShapeMismatchError(f"feature map {feature_map.shape} vs grid "
                                 f"({grid.h}, {grid.w}, {grid.c})")
    if region_extent is None:
        region_extent = (grid.cell, grid.cell)
    centers = grid.cell_centers()
    hidden = init_hidden(feature_map)
    words = {}
    word_data = {}
    recorded = []
    for position, step in enumerate(order.steps):
        words[step] = predict_word(hidden, step, store, n_classes)
        word_data[step] = words[step].data
        if position < len(SAMPLE_COUNTS):
            if forced_sample_points is not None:
                pts = forced_sample_points[position]
            else:
                pts = sample_points(word_data, position, grid, centers, region_extent)
            recorded.append(pts)
            hidden = update_hidden(hidden, pts, position, store, grid)
    return DenseSequenceMap(
        grid=grid,
        order=order,
        n_classes=n_classes,
        region_extent=tuple(region_extent),
        region_centers=centers,
        loc=words[LOCATION],
        ori=words[ORIENTATION],
        size=words[SIZE],
        cat_logits=words[CATEGORY],
        cat_probs=softmax(words[CATEGORY]),
        sample_points=tuple(recorded),
    )
