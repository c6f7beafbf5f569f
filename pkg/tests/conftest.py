"""Shared test strategies and helpers."""

import math

import numpy as np
from hypothesis import strategies as st

from seqdet3d.geometry import Box3D
from seqdet3d.words import RegionWord


def finite_floats(lo, hi):
    return st.floats(min_value=lo, max_value=hi, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, n_classes=3, center_range=25.0, size_lo=0.2, size_hi=8.0):
    return Box3D(
        x=draw(finite_floats(-center_range, center_range)),
        y=draw(finite_floats(-center_range, center_range)),
        z=draw(finite_floats(-2.0, 2.0)),
        l=draw(finite_floats(size_lo, size_hi)),
        w=draw(finite_floats(size_lo, size_hi)),
        h=draw(finite_floats(size_lo, size_hi)),
        theta=draw(finite_floats(-4.0 * math.pi, 4.0 * math.pi)),
        class_id=draw(st.integers(0, n_classes - 1)),
    )


@st.composite
def regions(draw, center_range=25.0, extent_lo=0.2, extent_hi=4.0):
    return RegionWord(
        r_x=draw(finite_floats(-center_range, center_range)),
        r_y=draw(finite_floats(-center_range, center_range)),
        r_l=draw(finite_floats(extent_lo, extent_hi)),
        r_w=draw(finite_floats(extent_lo, extent_hi)),
    )


def random_box(rng: np.random.Generator, n_classes=3) -> Box3D:
    return Box3D(
        x=rng.uniform(-25, 25),
        y=rng.uniform(-25, 25),
        z=rng.uniform(-2, 2),
        l=rng.uniform(0.2, 8.0),
        w=rng.uniform(0.2, 8.0),
        h=rng.uniform(0.2, 8.0),
        theta=rng.uniform(-math.pi, math.pi),
        class_id=int(rng.integers(0, n_classes)),
    )


def angle_diff(a: float, b: float) -> float:
    """Smallest absolute difference between two angles."""
    d = (a - b + math.pi) % (2.0 * math.pi) - math.pi
    return abs(d)
