"""Pillar rasterization and the small learnable BEV encoder.

A scene becomes an H x W x 8 grid of per-pillar statistics, then a linear
lift plus two 3x3 conv blocks turn it into the H x W x C feature map the
sequence decoder consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .numerics import ParamStore, Tensor, conv2d_3x3, linear, relu
from .scenegen import Scene

# Per-pillar statistics, in feature order:
#   log1p(point count), mean dx, mean dy, mean z, max z, min z,
#   mean intensity, occupancy flag
PILLAR_STATS = 8


@dataclass(frozen=True)
class GridConfig:
    """BEV discretization: rows bin x, columns bin y."""

    extent: tuple   # ((x_min, x_max), (y_min, y_max))
    h: int
    w: int
    cell: float
    c: int

    def __post_init__(self):
        (x_lo, x_hi), (y_lo, y_hi) = self.extent
        if self.h < 1 or self.w < 1 or self.cell <= 0:
            raise ValueError(f"bad grid: h={self.h}, w={self.w}, cell={self.cell}")
        if not math.isclose(self.h * self.cell, x_hi - x_lo, rel_tol=1e-9):
            raise ValueError(
                f"h * cell = {self.h * self.cell} does not cover x extent {x_hi - x_lo}")
        if not math.isclose(self.w * self.cell, y_hi - y_lo, rel_tol=1e-9):
            raise ValueError(
                f"w * cell = {self.w * self.cell} does not cover y extent {y_hi - y_lo}")
        if self.c < 8:
            raise ValueError(f"channel count must be >= 8, got {self.c}")

    @property
    def n_pixels(self) -> int:
        return self.h * self.w

    def cell_centers(self) -> np.ndarray:
        """(H*W, 2) array of cell-center (x, y) in meters, row-major."""
        (x_lo, _), (y_lo, _) = self.extent
        xs = x_lo + (np.arange(self.h) + 0.5) * self.cell
        ys = y_lo + (np.arange(self.w) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def meters_to_cells(self, xy: np.ndarray) -> np.ndarray:
        """Continuous (row, col) coordinates; integers land on cell centers."""
        (x_lo, _), (y_lo, _) = self.extent
        out = np.empty_like(xy)
        out[:, 0] = (xy[:, 0] - x_lo) / self.cell - 0.5
        out[:, 1] = (xy[:, 1] - y_lo) / self.cell - 0.5
        return out

    def to_dict(self) -> dict:
        return {
            "extent": [list(r) for r in self.extent],
            "h": self.h, "w": self.w, "cell": self.cell, "c": self.c,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(
            extent=tuple(tuple(float(v) for v in r) for r in d["extent"]),
            h=int(d["h"]), w=int(d["w"]), cell=float(d["cell"]), c=int(d["c"]),
        )


def default_grid_config(c: int = 32) -> GridConfig:
    return GridConfig(extent=((-25.6, 25.6), (-25.6, 25.6)), h=64, w=64, cell=0.8, c=c)


@dataclass
class PillarFeatures:
    """Raw per-pillar statistics plus the count of dropped points."""

    values: np.ndarray   # (H, W, PILLAR_STATS)
    dropped: int


def rasterize(scene: Scene, grid: GridConfig) -> PillarFeatures:
    """Bin points into pillars and compute fixed statistics per pillar.

    Points outside the grid extent are dropped (their count is reported on
    the result). The reduction is bit-exact under input permutation: points
    are sorted by (cell, x, y, z, intensity) before summing.
    """
    (x_lo, x_hi), (y_lo, y_hi) = grid.extent
    p = scene.points
    values = np.zeros((grid.h, grid.w, PILLAR_STATS))
    if len(p) == 0:
        return PillarFeatures(values=values, dropped=0)
    inside = (
        (p[:, 0] >= x_lo) & (p[:, 0] <= x_hi)
        & (p[:, 1] >= y_lo) & (p[:, 1] <= y_hi)
    )
    dropped = int(len(p) - inside.sum())
    p = p[inside]
    if len(p) == 0:
        return PillarFeatures(values=values, dropped=dropped)
    ix = np.minimum(((p[:, 0] - x_lo) / grid.cell).astype(np.int64), grid.h - 1)
    iy = np.minimum(((p[:, 1] - y_lo) / grid.cell).astype(np.int64), grid.w - 1)
    cell = ix * grid.w + iy
    order = np.lexsort((p[:, 3], p[:, 2], p[:, 1], p[:, 0], cell))
    p = p[order]
    cell = cell[order]
    ix, iy = ix[order], iy[order]

    starts = np.flatnonzero(np.r_[True, cell[1:] != cell[:-1]])
    counts = np.diff(np.r_[starts, len(cell)])
    occupied = cell[starts]
    cx = x_lo + (ix[starts] + 0.5) * grid.cell
    cy = y_lo + (iy[starts] + 0.5) * grid.cell

    sum_x = np.add.reduceat(p[:, 0], starts)
    sum_y = np.add.reduceat(p[:, 1], starts)
    sum_z = np.add.reduceat(p[:, 2], starts)
    sum_i = np.add.reduceat(p[:, 3], starts)
    max_z = np.maximum.reduceat(p[:, 2], starts)
    min_z = np.minimum.reduceat(p[:, 2], starts)

    flat = values.reshape(grid.n_pixels, PILLAR_STATS)
    flat[occupied, 0] = np.log1p(counts)
    flat[occupied, 1] = sum_x / counts - cx
    flat[occupied, 2] = sum_y / counts - cy
    flat[occupied, 3] = sum_z / counts
    flat[occupied, 4] = max_z
    flat[occupied, 5] = min_z
    flat[occupied, 6] = sum_i / counts
    flat[occupied, 7] = 1.0
    return PillarFeatures(values=values, dropped=dropped)


BACKBONE_PARAMS = (
    "backbone/lift/w", "backbone/lift/b",
    "backbone/conv1/k", "backbone/conv1/b",
    "backbone/conv2/k", "backbone/conv2/b",
)


def init_backbone_params(store: ParamStore, grid: GridConfig, rng: np.random.Generator):
    """Register backbone parameters.

    Kernels are He-scaled. Biases are small but nonzero: with zero biases,
    every empty pillar would sit exactly on the relu kink, where the
    reverse-mode subgradient and central differences legitimately disagree.
    """
    c = grid.c
    store.add("backbone/lift/w", rng.normal(0, math.sqrt(2.0 / PILLAR_STATS),
                                            size=(PILLAR_STATS, c)))
    store.add("backbone/lift/b", rng.normal(0, 0.01, size=c))
    for name in ("conv1", "conv2"):
        store.add(f"backbone/{name}/k", rng.normal(0, math.sqrt(2.0 / (9 * c)),
                                                   size=(3, 3, c, c)))
        store.add(f"backbone/{name}/b", rng.normal(0, 0.01, size=c))


def encode(pf: PillarFeatures, store: ParamStore, grid: GridConfig) -> Tensor:
    """Pillar stats -> BEV feature map F of shape (H, W, C)."""
    if pf.values.shape != (grid.h, grid.w, PILLAR_STATS):
        raise ShapeMismatchError(
            f"pillar features {pf.values.shape} vs grid ({grid.h}, {grid.w}, {PILLAR_STATS})")
    x = relu(linear(Tensor(pf.values), store["backbone/lift/w"], store["backbone/lift/b"]))
    x = relu(conv2d_3x3(x, store["backbone/conv1/k"], store["backbone/conv1/b"]))
    x = relu(conv2d_3x3(x, store["backbone/conv2/k"], store["backbone/conv2/b"]))
    return x
