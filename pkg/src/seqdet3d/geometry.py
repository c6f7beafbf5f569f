"""Oriented 3D boxes, footprint corners, and rotated IoU.

Every box is upright: only the heading (rotation about the vertical axis)
is free. Footprints are convex quads, so the intersection area is exact
via Sutherland-Hodgman clipping, with no triangulation tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi).

    Already-normalized values are returned unchanged, so normalization is
    idempotent at the bit level (needed for lossless store/load round trips).
    """
    if -math.pi <= theta < math.pi:
        return theta
    return (theta + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class Box3D:
    """An upright oriented box.

    (x, y, z) is the center in meters, (l, w, h) the size along the
    heading / lateral / vertical axes, theta the heading in radians
    (normalized to [-pi, pi) at construction), class_id a small integer.
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float
    class_id: int = 0

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "w", "h", "theta"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite, got {v!r}")
            object.__setattr__(self, name, v)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(
                f"Box3D sizes must be positive, got l={self.l}, w={self.w}, h={self.h}"
            )
        object.__setattr__(self, "theta", normalize_angle(self.theta))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_bottom(self) -> float:
        return self.z - 0.5 * self.h

    @property
    def z_top(self) -> float:
        return self.z + 0.5 * self.h


# Footprint corner pattern in box-local coordinates, counter-clockwise
# starting from the (+l/2, +w/2) corner.
_LOCAL_FOOTPRINT = np.array(
    [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]], dtype=np.float64
)


def footprint(b: Box3D) -> np.ndarray:
    """Return the 4 BEV footprint corners, shape (4, 2).

    Counter-clockwise, starting at the corner that sits at
    (+l/2, +w/2) in box-local coordinates before rotation.
    """
    local = _LOCAL_FOOTPRINT * np.array([b.l, b.w])
    c, s = math.cos(b.theta), math.sin(b.theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([b.x, b.y])


def box_corners(b: Box3D) -> np.ndarray:
    """Return the 8 corners of the box, shape (8, 3).

    Order: the 4 bottom-face corners counter-clockwise starting from the
    (+l/2, +w/2) corner, then the 4 top-face corners in the same order.
    """
    fp = footprint(b)
    bottom = np.column_stack([fp, np.full(4, b.z_bottom)])
    top = np.column_stack([fp, np.full(4, b.z_top)])
    return np.concatenate([bottom, top], axis=0)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as (n, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_by_edge(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of `poly` on the left of directed edge a->b.

    Points exactly on the edge count as inside, so clipping a polygon by
    its own edges leaves it bitwise unchanged.
    """
    out = []
    n = len(poly)
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp, sq = side(p), side(q)
        if sp >= 0.0:
            out.append(p)
            if sq < 0.0:
                t = sp / (sp - sq)
                out.append(p + t * (q - p))
        elif sq > 0.0:
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return out


def convex_intersection_area(poly_a: np.ndarray, poly_b: np.ndarray) -> float:
    """Area of the intersection of two convex counter-clockwise polygons."""
    subject = [np.asarray(p, dtype=np.float64) for p in poly_a]
    nb = len(poly_b)
    for i in range(nb):
        subject = _clip_by_edge(subject, poly_b[i], poly_b[(i + 1) % nb])
        if not subject:
            return 0.0
    return polygon_area(np.asarray(subject))


def _canonical_pair(a: Box3D, b: Box3D):
    """Order a box pair deterministically.

    Clipping one footprint by the other is not numerically symmetric, so
    IoU functions sort their arguments first; iou(a, b) == iou(b, a) then
    holds exactly.
    """
    ka = (a.x, a.y, a.z, a.l, a.w, a.h, a.theta, a.class_id)
    kb = (b.x, b.y, b.z, b.l, b.w, b.h, b.theta, b.class_id)
    return (a, b) if ka <= kb else (b, a)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated footprint IoU in the BEV plane, in [0, 1]."""
    a, b = _canonical_pair(a, b)
    fa, fb = footprint(a), footprint(b)
    inter = convex_intersection_area(fa, fb)
    if inter <= 0.0:
        return 0.0
    area_a = polygon_area(fa)
    area_b = polygon_area(fb)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: footprint intersection area times vertical overlap over
    the union of the two volumes. In [0, 1].

    Volumes are computed from the shoelace footprint areas so that
    identical boxes score exactly 1.0.
    """
    a, b = _canonical_pair(a, b)
    z_overlap = min(a.z_top, b.z_top) - max(a.z_bottom, b.z_bottom)
    if z_overlap <= 0.0:
        return 0.0
    fa, fb = footprint(a), footprint(b)
    inter_area = convex_intersection_area(fa, fb)
    if inter_area <= 0.0:
        return 0.0
    inter_vol = inter_area * z_overlap
    # volumes from the same footprint-area and z-extent expressions as the
    # intersection, so identical boxes score exactly 1.0
    vol_a = polygon_area(fa) * (a.z_top - a.z_bottom)
    vol_b = polygon_area(fb) * (b.z_top - b.z_bottom)
    union = vol_a + vol_b - inter_vol
    if union <= 0.0:
        return 0.0
    return min(1.0, inter_vol / union)
