"""One JSON document configuring the whole pipeline.

A run config bundles the grid, the synthetic-world recipe, the training
schedule, the loss shape, the matching metric, the word order, and the
inference thresholds. It is schema-validated before any work starts;
unknown keys anywhere in the document are rejected so a typo cannot
silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import jsonschema

from .backbone import GridConfig
from .errors import ConfigError
from .matching import VARIANTS, SimilarityMetric
from .scenegen import SceneGenConfig, default_scenegen_config
from .training import LossConfig, TrainConfig
from .words import DEFAULT_ORDER, WordOrder

SEED_ENV_VAR = "P2S_SEED"

_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_TRIPLE = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_INT_PAIR = {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "grid": {
            "type": "object",
            "properties": {
                "extent": {"type": "array", "items": _RANGE,
                           "minItems": 2, "maxItems": 2},
                "h": {"type": "integer", "minimum": 1},
                "w": {"type": "integer", "minimum": 1},
                "cell": {"type": "number", "exclusiveMinimum": 0},
                "c": {"type": "integer", "minimum": 8},
            },
            "required": ["extent", "h", "w", "cell", "c"],
            "additionalProperties": False,
        },
        "scenegen": {
            "type": "object",
            "properties": {
                "extent": {"type": "array", "items": _RANGE,
                           "minItems": 3, "maxItems": 3},
                "classes": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "properties": {
                            "name": {"type": "string", "minLength": 1},
                            "size_mean": _TRIPLE,
                            "size_sigma": _TRIPLE,
                        },
                        "required": ["name", "size_mean", "size_sigma"],
                        "additionalProperties": False,
                    },
                },
                "objects_per_scene": _INT_PAIR,
                "points_per_object": _INT_PAIR,
                "clutter_points": {"type": "integer", "minimum": 0},
                "position_jitter": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
            },
            "required": ["extent", "classes", "objects_per_scene",
                         "points_per_object", "clutter_points",
                         "position_jitter", "seed"],
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer"},
                "checkpoint_every": {"type": "integer", "minimum": 1},
            },
            "required": ["epochs"],
            "additionalProperties": False,
        },
        "loss": {
            "type": "object",
            "properties": {
                "lambda_reg": {"type": "number", "minimum": 0},
                "gamma": {"type": "number", "minimum": 0},
                "alpha_f": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "metric": {
            "type": "object",
            "properties": {
                "variant": {"enum": list(VARIANTS)},
                "alpha": {"type": "number", "exclusiveMinimum": 0,
                          "exclusiveMaximum": 1},
                "corrected_iou": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "order": {"type": "string"},
        "score_threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "eval_iou": {
            "anyOf": [
                {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                {"type": "object",
                 "additionalProperties": {"type": "number", "exclusiveMinimum": 0,
                                          "maximum": 1}},
            ],
        },
    },
    "required": ["grid", "scenegen", "train"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, as validated dataclasses."""

    grid: GridConfig
    scenegen: SceneGenConfig
    train: TrainConfig
    loss: LossConfig = LossConfig()
    metric: SimilarityMetric = SimilarityMetric()
    order: WordOrder = DEFAULT_ORDER
    score_threshold: float = 0.2
    eval_iou: object = 0.5

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError(
                f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if isinstance(self.eval_iou, dict):
            bad = {k: v for k, v in self.eval_iou.items() if not 0.0 < v <= 1.0}
            if bad:
                raise ConfigError(f"eval_iou values must be in (0, 1], got {bad}")
        elif not 0.0 < self.eval_iou <= 1.0:
            raise ConfigError(f"eval_iou must be in (0, 1], got {self.eval_iou}")

    @property
    def n_classes(self) -> int:
        return self.scenegen.n_classes

    def class_names(self):
        return self.scenegen.class_names()

    def to_dict(self) -> dict:
        (x_rng, y_rng) = self.grid.extent
        return {
            "grid": {"extent": [list(x_rng), list(y_rng)], "h": self.grid.h,
                     "w": self.grid.w, "cell": self.grid.cell, "c": self.grid.c},
            "scenegen": self.scenegen.to_dict(),
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "lr": self.train.lr,
                "horizon": self.train.horizon,
                "seed": self.train.seed,
                "checkpoint_every": self.train.checkpoint_every,
            },
            "loss": {"lambda_reg": self.loss.lambda_reg, "gamma": self.loss.gamma,
                     "alpha_f": self.loss.alpha_f},
            "metric": {"variant": self.metric.variant, "alpha": self.metric.alpha,
                       "corrected_iou": self.metric.corrected_iou},
            "order": str(self.order),
            "score_threshold": self.score_threshold,
            "eval_iou": (dict(self.eval_iou) if isinstance(self.eval_iou, dict)
                         else self.eval_iou),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        try:
            jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "(top level)"
            raise ConfigError(f"config rejected at {where}: {e.message}") from e
        try:
            g = doc["grid"]
            grid = GridConfig(
                extent=tuple(tuple(float(v) for v in r) for r in g["extent"]),
                h=g["h"], w=g["w"], cell=float(g["cell"]), c=g["c"])
            scenegen = SceneGenConfig.from_dict(doc["scenegen"])
            train = TrainConfig(**doc["train"])
            loss = LossConfig(**doc.get("loss", {}))
            metric = SimilarityMetric(**doc.get("metric", {}))
            order = (WordOrder.parse(doc["order"]) if "order" in doc
                     else DEFAULT_ORDER)
            eval_iou = doc.get("eval_iou", 0.5)
            if isinstance(eval_iou, dict):
                eval_iou = {k: float(v) for k, v in eval_iou.items()}
            else:
                eval_iou = float(eval_iou)
            return cls(grid=grid, scenegen=scenegen, train=train, loss=loss,
                       metric=metric, order=order,
                       score_threshold=float(doc.get("score_threshold", 0.2)),
                       eval_iou=eval_iou)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def default(cls, seed: int = 0) -> "RunConfig":
        """The stock overfit setup: 64 x 64 grid over a 51.2 m world."""
        return cls(
            grid=GridConfig(extent=((-25.6, 25.6), (-25.6, 25.6)),
                            h=64, w=64, cell=0.8, c=32),
            scenegen=default_scenegen_config(seed=seed),
            train=TrainConfig(epochs=200, batch_size=2, lr=1e-3, seed=seed),
        )


def apply_seed_override(cfg: RunConfig, env=os.environ) -> RunConfig:
    """Replace both the data seed and the training seed from the
    environment when the override variable is set."""
    raw = env.get(SEED_ENV_VAR)
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from e
    return dataclasses.replace(
        cfg,
        scenegen=dataclasses.replace(cfg.scenegen, seed=seed),
        train=dataclasses.replace(cfg.train, seed=seed),
    )
