"""The full detection model: pillar encoder plus sequence decoder."""

from __future__ import annotations

import numpy as np

from .backbone import GridConfig, encode, init_backbone_params, rasterize
from .errors import CompatibilityError, ShapeMismatchError
from .numerics import ParamStore
from .numerics.checkpoint import restore
from .scenegen import Scene
from .seq_decoder import DenseSequenceMap, decode_scene, init_decoder_params
from .words import DEFAULT_ORDER, WordOrder


class DetectionModel:
    """Owns the parameter store and runs scene -> dense sequence map."""

    def __init__(self, grid: GridConfig, n_classes: int,
                 order: WordOrder = DEFAULT_ORDER, region_extent=None, seed: int = 0):
        self.grid = grid
        self.n_classes = n_classes
        self.order = order
        self.region_extent = tuple(region_extent) if region_extent else (grid.cell, grid.cell)
        self.store = ParamStore()
        rng = np.random.default_rng([seed, 0xB0DE])
        init_backbone_params(self.store, grid, rng)
        init_decoder_params(self.store, grid, n_classes, rng)

    def forward(self, scene: Scene, forced_sample_points=None) -> DenseSequenceMap:
        pillars = rasterize(scene, self.grid)
        feature_map = encode(pillars, self.store, self.grid)
        return decode_scene(
            feature_map, self.store, self.order, self.grid, self.n_classes,
            region_extent=self.region_extent,
            forced_sample_points=forced_sample_points,
        )

    def param_groups(self) -> dict:
        """Parameter names bucketed for gradient-check reporting."""
        groups = {"backbone": [], "decoder_heads": [], "decoder_agg": []}
        for name in self.store.names():
            if name.startswith("backbone/"):
                groups["backbone"].append(name)
            elif name.startswith("decoder/head_"):
                groups["decoder_heads"].append(name)
            else:
                groups["decoder_agg"].append(name)
        return groups

    def load(self, checkpoint_path: str):
        """Restore parameters, translating shape problems into a
        compatibility error (the checkpoint belongs to a different grid or
        class count)."""
        try:
            restore(self.store, checkpoint_path)
        except ShapeMismatchError as e:
            raise CompatibilityError(str(e)) from e
