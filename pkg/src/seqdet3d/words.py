"""The five-word object code and its parameter-free, bidirectional codec.

An object is written as (region, location, orientation, size, category).
The region word anchors the object to a BEV cell; the remaining words are
continuous values a network can regress directly. Encoding and decoding
are exact inverses in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D

# Step symbols for the four predicted words. The region word is not a
# prediction step: it is fixed to the pixel grid.
LOCATION, ORIENTATION, SIZE, CATEGORY = "L", "O", "S", "C"
STEP_KINDS = (LOCATION, ORIENTATION, SIZE, CATEGORY)

# Size words are clipped here before exponentiation so that decoding
# stays finite for any finite prediction.
_SIZE_WORD_LIMIT = 500.0


@dataclass(frozen=True)
class RegionWord:
    """A BEV region: center (r_x, r_y) in meters and extent (r_l, r_w)."""

    r_x: float
    r_y: float
    r_l: float
    r_w: float

    def __post_init__(self):
        if not (self.r_l > 0 and self.r_w > 0):
            raise ValueError(f"region extent must be positive, got ({self.r_l}, {self.r_w})")


@dataclass(frozen=True)
class LocationWord:
    """Center offsets relative to the region extent, plus absolute z.

    l_x and l_y are unitless; predictions may fall outside [-1, 1].
    """

    l_x: float
    l_y: float
    z: float


@dataclass(frozen=True)
class OrientationWord:
    """(sin theta, cos theta) at encode time; unconstrained at predict time."""

    s: float
    c: float


@dataclass(frozen=True)
class SizeWord:
    """Log-sizes (log l, log w, log h)."""

    u_l: float
    u_w: float
    u_h: float


@dataclass(frozen=True)
class CategoryWord:
    """Probabilities over n foreground classes plus background (last slot)."""

    p: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.p, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError(f"category word must be a vector of >= 2 probs, got shape {arr.shape}")
        if np.any(arr < 0):
            raise ValueError("category probabilities must be >= 0")
        if abs(float(arr.sum()) - 1.0) > 1e-6:
            raise ValueError(f"category probabilities must sum to 1, got {arr.sum()}")
        arr.setflags(write=False)
        object.__setattr__(self, "p", arr)

    @property
    def n_classes(self) -> int:
        return self.p.size - 1

    @property
    def background(self) -> float:
        return float(self.p[-1])


@dataclass(frozen=True)
class ObjectSequence:
    region: RegionWord
    location: LocationWord
    orientation: OrientationWord
    size: SizeWord
    category: CategoryWord


@dataclass(frozen=True)
class WordOrder:
    """The order in which the four non-region words are predicted."""

    steps: tuple

    def __post_init__(self):
        if tuple(sorted(self.steps)) != tuple(sorted(STEP_KINDS)):
            raise ValueError(f"word order must permute {STEP_KINDS}, got {self.steps}")

    @classmethod
    def parse(cls, text: str) -> "WordOrder":
        """Parse a config string like "R,L,O,S,C"; the region is always first."""
        parts = tuple(p.strip().upper() for p in text.split(","))
        if len(parts) != 5 or parts[0] != "R":
            raise ValueError(f"word order must be 'R' plus a permutation of L,O,S,C, got {text!r}")
        return cls(steps=parts[1:])

    def __str__(self) -> str:
        return ",".join(("R",) + self.steps)


DEFAULT_ORDER = WordOrder(steps=(LOCATION, ORIENTATION, SIZE, CATEGORY))

# The eight orders compared by the ablation harness.
ABLATION_ORDERS = tuple(
    WordOrder.parse(text)
    for text in (
        "R,O,S,L,C",
        "R,O,L,S,C",
        "R,L,O,S,C",
        "R,L,S,O,C",
        "R,C,L,O,S",
        "R,C,S,O,L",
        "R,C,O,L,S",
        "R,C,O,S,L",
    )
)


def encode(b: Box3D, r: RegionWord, n_classes: int) -> ObjectSequence:
    """Write a box as the five words anchored at region `r`.

    The category word is one-hot at b.class_id among n_classes + 1 slots,
    background last.
    """
    if not 0 <= b.class_id < n_classes:
        raise ValueError(f"class_id {b.class_id} out of range for {n_classes} classes")
    loc = LocationWord(l_x=(b.x - r.r_x) / r.r_l, l_y=(b.y - r.r_y) / r.r_w, z=b.z)
    ori = OrientationWord(s=math.sin(b.theta), c=math.cos(b.theta))
    size = SizeWord(u_l=math.log(b.l), u_w=math.log(b.w), u_h=math.log(b.h))
    p = np.zeros(n_classes + 1)
    p[b.class_id] = 1.0
    return ObjectSequence(region=r, location=loc, orientation=ori, size=size, category=CategoryWord(p))


def decode(s: ObjectSequence):
    """Invert the codec: recover (Box3D, score) from a sequence.

    Total on any finite words: the orientation pair need not be normalized
    (atan2 handles it) and size words are clipped before exponentiation.
    The score is the maximum foreground probability.
    """
    values = (
        s.region.r_x, s.region.r_y, s.region.r_l, s.region.r_w,
        s.location.l_x, s.location.l_y, s.location.z,
        s.orientation.s, s.orientation.c,
        s.size.u_l, s.size.u_w, s.size.u_h,
    )
    if not all(math.isfinite(v) for v in values) or not np.all(np.isfinite(s.category.p)):
        raise ValueError("cannot decode a sequence with non-finite words")
    x = s.region.r_x + s.location.l_x * s.region.r_l
    y = s.region.r_y + s.location.l_y * s.region.r_w
    theta = math.atan2(s.orientation.s, s.orientation.c)
    clip = lambda u: min(max(u, -_SIZE_WORD_LIMIT), _SIZE_WORD_LIMIT)
    l = math.exp(clip(s.size.u_l))
    w = math.exp(clip(s.size.u_w))
    h = math.exp(clip(s.size.u_h))
    foreground = s.category.p[:-1]
    class_id = int(np.argmax(foreground))
    score = float(foreground[class_id])
    box = Box3D(x=x, y=y, z=s.location.z, l=l, w=w, h=h, theta=theta, class_id=class_id)
    return box, score
