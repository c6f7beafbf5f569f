"""Deterministic synthetic point-cloud scenes with ground-truth boxes.

Objects are upright boxes dropped on a flat ground plane; LiDAR-like
returns are sampled on each box's two sensor-facing side walls plus the
top face, with a ground-clutter layer underneath. Every scene is fully
determined by (config seed, scene index).

Scene files and the dataset index are documented binary/JSON formats; see
`write_dataset`.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumMismatchError,
    DatasetError,
    FormatError,
    GenerationError,
    TruncatedFileError,
    VersionMismatchError,
)
from .geometry import Box3D, bev_iou

SCENE_MAGIC = b"P2SC"
SCENE_VERSION = 1

# Standard deviation of the Gaussian surface noise on object returns.
SURFACE_NOISE = 0.02

# Extra length/width (meters) required between neighboring boxes, so
# generated objects are strictly non-overlapping in BEV.
_SEPARATION = 0.2

_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class ClassSpec:
    """One object category: a name and a Gaussian size model per dimension."""

    name: str
    size_mean: tuple
    size_sigma: tuple

    def __post_init__(self):
        if len(self.size_mean) != 3 or len(self.size_sigma) != 3:
            raise ValueError("size_mean and size_sigma must have 3 entries (l, w, h)")
        if any(m <= 0 for m in self.size_mean) or any(s < 0 for s in self.size_sigma):
            raise ValueError(f"invalid size model for class {self.name!r}")


@dataclass(frozen=True)
class SceneGenConfig:
    extent: tuple          # ((x_min, x_max), (y_min, y_max), (z_min, z_max))
    classes: tuple         # ClassSpec per category
    objects_per_scene: tuple
    points_per_object: tuple
    clutter_points: int
    position_jitter: float
    seed: int

    def __post_init__(self):
        if len(self.extent) != 3 or any(hi <= lo for lo, hi in self.extent):
            raise ValueError(f"extent must be 3 nonempty (min, max) ranges, got {self.extent}")
        if len(self.classes) < 1:
            raise ValueError("at least one object class is required")
        lo, hi = self.objects_per_scene
        if not (0 <= lo <= hi):
            raise ValueError(f"bad objects_per_scene range {self.objects_per_scene}")
        plo, phi = self.points_per_object
        if not (1 <= plo <= phi):
            raise ValueError(f"bad points_per_object range {self.points_per_object}")
        if self.clutter_points < 0 or self.position_jitter < 0:
            raise ValueError("clutter_points and position_jitter must be >= 0")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_names(self):
        return [c.name for c in self.classes]

    def to_dict(self) -> dict:
        return {
            "extent": [list(r) for r in self.extent],
            "classes": [
                {"name": c.name, "size_mean": list(c.size_mean), "size_sigma": list(c.size_sigma)}
                for c in self.classes
            ],
            "objects_per_scene": list(self.objects_per_scene),
            "points_per_object": list(self.points_per_object),
            "clutter_points": self.clutter_points,
            "position_jitter": self.position_jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        return cls(
            extent=tuple(tuple(float(v) for v in r) for r in d["extent"]),
            classes=tuple(
                ClassSpec(c["name"], tuple(c["size_mean"]), tuple(c["size_sigma"]))
                for c in d["classes"]
            ),
            objects_per_scene=tuple(int(v) for v in d["objects_per_scene"]),
            points_per_object=tuple(int(v) for v in d["points_per_object"]),
            clutter_points=int(d["clutter_points"]),
            position_jitter=float(d["position_jitter"]),
            seed=int(d["seed"]),
        )


def default_scenegen_config(seed: int = 0) -> SceneGenConfig:
    """A 51.2 m x 51.2 m two-class world: vehicles and pedestrians."""
    return SceneGenConfig(
        extent=((-25.6, 25.6), (-25.6, 25.6), (-1.0, 3.0)),
        classes=(
            ClassSpec("vehicle", (4.5, 2.0, 1.6), (0.45, 0.2, 0.16)),
            ClassSpec("pedestrian", (0.8, 0.8, 1.7), (0.08, 0.08, 0.17)),
        ),
        objects_per_scene=(1, 3),
        points_per_object=(60, 200),
        clutter_points=500,
        position_jitter=0.05,
        seed=seed,
    )


@dataclass
class Scene:
    """N x 4 point array (x, y, z, intensity) plus ground-truth boxes."""

    points: np.ndarray
    boxes: list

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)


def _sample_box(cfg: SceneGenConfig, rng: np.random.Generator, placed: list) -> Box3D:
    """Draw one box that fits the extent and overlaps nothing placed so far."""
    class_id = int(rng.integers(0, cfg.n_classes))
    spec = cfg.classes[class_id]
    raw = rng.normal(spec.size_mean, spec.size_sigma)
    l, w, h = (max(float(v), 0.3 * m) for v, m in zip(raw, spec.size_mean))
    theta = float(rng.uniform(-math.pi, math.pi))
    # any heading fits if the footprint half-diagonal fits
    radius = 0.5 * math.hypot(l, w)
    (x_lo, x_hi), (y_lo, y_hi), _ = cfg.extent
    if x_lo + radius >= x_hi - radius or y_lo + radius >= y_hi - radius:
        raise GenerationError(
            f"class {spec.name!r} size ({l:.2f}, {w:.2f}) cannot fit extent {cfg.extent[:2]}")
    z = 0.5 * h + float(rng.uniform(-cfg.position_jitter, cfg.position_jitter))
    for _ in range(_PLACEMENT_ATTEMPTS):
        x = float(rng.uniform(x_lo + radius, x_hi - radius))
        y = float(rng.uniform(y_lo + radius, y_hi - radius))
        candidate = Box3D(x, y, z, l, w, h, theta, class_id)
        grown = Box3D(x, y, z, l + _SEPARATION, w + _SEPARATION, h, theta, class_id)
        if all(bev_iou(grown, other) == 0.0 for other in placed):
            return candidate
    raise GenerationError(
        f"could not place an object after {_PLACEMENT_ATTEMPTS} attempts; "
        "extent too crowded for the configured sizes")


def _surface_points(b: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """LiDAR-like returns: the two side walls facing the origin plus the top.

    Points are spread over the three faces in proportion to face area and
    perturbed with isotropic Gaussian noise (sigma = SURFACE_NOISE).
    """
    c, s = math.cos(b.theta), math.sin(b.theta)
    u = np.array([c, s])        # along length
    v = np.array([-s, c])       # along width
    center = np.array([b.x, b.y])
    walls = [
        (center + 0.5 * b.l * u, u, v, b.w, b.h),   # +l wall
        (center - 0.5 * b.l * u, -u, v, b.w, b.h),  # -l wall
        (center + 0.5 * b.w * v, v, u, b.l, b.h),   # +w wall
        (center - 0.5 * b.w * v, -v, u, b.l, b.h),  # -w wall
    ]
    # visibility: outward normal pointing back toward the sensor at the origin
    vis = sorted(range(4), key=lambda i: float(np.dot(walls[i][1], walls[i][0])))
    faces = [walls[vis[0]], walls[vis[1]]]
    areas = np.array([faces[0][3] * faces[0][4], faces[1][3] * faces[1][4], b.l * b.w])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    for (face_center, _, tangent, width, height), count in zip(faces, counts[:2]):
        offsets_t = rng.uniform(-0.5 * width, 0.5 * width, size=count)
        offsets_z = rng.uniform(b.z_bottom, b.z_top, size=count)
        xy = face_center[None, :] + offsets_t[:, None] * tangent[None, :]
        pts.append(np.column_stack([xy, offsets_z]))
    du = rng.uniform(-0.5 * b.l, 0.5 * b.l, size=counts[2])
    dv = rng.uniform(-0.5 * b.w, 0.5 * b.w, size=counts[2])
    xy = center[None, :] + du[:, None] * u[None, :] + dv[:, None] * v[None, :]
    pts.append(np.column_stack([xy, np.full(counts[2], b.z_top)]))
    out = np.concatenate(pts, axis=0)
    out += rng.normal(0.0, SURFACE_NOISE, size=out.shape)
    return out


def generate_scene(cfg: SceneGenConfig, scene_index: int) -> Scene:
    """Build the scene for (cfg.seed, scene_index); bitwise reproducible."""
    rng = np.random.default_rng([cfg.seed, scene_index])
    lo, hi = cfg.objects_per_scene
    n_objects = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    boxes = []
    for _ in range(n_objects):
        boxes.append(_sample_box(cfg, rng, boxes))
    chunks = []
    for b in boxes:
        n = int(rng.integers(cfg.points_per_object[0], cfg.points_per_object[1] + 1))
        chunks.append(_surface_points(b, n, rng))
    (x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi) = cfg.extent
    if cfg.clutter_points:
        clutter = np.column_stack([
            rng.uniform(x_lo, x_hi, size=cfg.clutter_points),
            rng.uniform(y_lo, y_hi, size=cfg.clutter_points),
            rng.uniform(0.0, 0.3, size=cfg.clutter_points),
        ])
        chunks.append(clutter)
    xyz = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    xyz[:, 0] = np.clip(xyz[:, 0], x_lo, x_hi)
    xyz[:, 1] = np.clip(xyz[:, 1], y_lo, y_hi)
    xyz[:, 2] = np.clip(xyz[:, 2], z_lo, z_hi)
    intensity = rng.uniform(0.0, 1.0, size=len(xyz))
    return Scene(points=np.column_stack([xyz, intensity]), boxes=boxes)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------
#
# Scene file (little-endian):
#   magic       4 bytes "P2SC"
#   version     u32
#   point_count u32
#   d           u32 (always 4: x, y, z, intensity)
#   points      f64 * point_count * d, C order
#   box_count   u32
#   boxes       per box: f64 * 7 (x, y, z, l, w, h, theta) then u32 class_id
#
# index.json: {"config": ..., "scene_count": N, "checksums": {file: sha256}}

INDEX_NAME = "index.json"


def _scene_filename(i: int) -> str:
    return f"scene_{i:05d}.p2sc"


def write_scene(scene: Scene, path: str):
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<I", SCENE_VERSION))
        f.write(struct.pack("<I", len(scene.points)))
        f.write(struct.pack("<I", 4))
        f.write(np.ascontiguousarray(scene.points, dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(scene.boxes)))
        for b in scene.boxes:
            f.write(struct.pack("<7d", b.x, b.y, b.z, b.l, b.w, b.h, b.theta))
            f.write(struct.pack("<I", b.class_id))


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return buf


def read_scene(path: str) -> Scene:
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) < 4:
            raise TruncatedFileError(f"{path}: shorter than the magic header")
        if magic != SCENE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {SCENE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != SCENE_VERSION:
            raise VersionMismatchError(f"{path}: version {version}, supported {SCENE_VERSION}")
        count, d = struct.unpack("<II", _read_exact(f, 8, path, "point header"))
        if d != 4:
            raise FormatError(f"{path}: point dimension {d}, expected 4")
        raw = _read_exact(f, 8 * count * d, path, "points")
        points = np.frombuffer(raw, dtype="<f8").reshape(count, d).astype(np.float64)
        (box_count,) = struct.unpack("<I", _read_exact(f, 4, path, "box count"))
        boxes = []
        for i in range(box_count):
            vals = struct.unpack("<7d", _read_exact(f, 56, path, f"box {i}"))
            (class_id,) = struct.unpack("<I", _read_exact(f, 4, path, f"box {i} class"))
            boxes.append(Box3D(*vals, class_id=class_id))
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after the last box record")
    return Scene(points=points, boxes=boxes)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_dataset(directory: str, cfg: SceneGenConfig, count: int) -> dict:
    """Generate `count` scenes into `directory` and write the index.

    Returns the index document (config, scene_count, checksums).
    """
    os.makedirs(directory, exist_ok=True)
    checksums = {}
    for i in range(count):
        name = _scene_filename(i)
        path = os.path.join(directory, name)
        write_scene(generate_scene(cfg, i), path)
        checksums[name] = _sha256(path)
    index = {"config": cfg.to_dict(), "scene_count": count, "checksums": checksums}
    with open(os.path.join(directory, INDEX_NAME), "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return index


def read_dataset(directory: str):
    """Read every scene listed in the index, verifying checksums.

    Returns (config, scenes).
    """
    index_path = os.path.join(directory, INDEX_NAME)
    if not os.path.exists(index_path):
        raise DatasetError(f"{directory}: missing {INDEX_NAME}")
    with open(index_path) as f:
        try:
            index = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{index_path}: invalid JSON ({e})") from e
    for key in ("config", "scene_count", "checksums"):
        if key not in index:
            raise FormatError(f"{index_path}: missing key {key!r}")
    cfg = SceneGenConfig.from_dict(index["config"])
    checksums = index["checksums"]
    if len(checksums) != index["scene_count"]:
        raise FormatError(
            f"{index_path}: scene_count {index['scene_count']} but {len(checksums)} checksums")
    scenes = []
    for name in sorted(checksums):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DatasetError(f"{directory}: scene file {name} listed in index but missing")
        actual = _sha256(path)
        if actual != checksums[name]:
            raise ChecksumMismatchError(
                f"{path}: sha256 {actual} does not match index entry {checksums[name]}")
        scenes.append(read_scene(path))
    return cfg, scenes
