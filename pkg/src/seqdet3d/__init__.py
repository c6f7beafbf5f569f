"""seqdet3d: 3D object detection from bird's-eye-view feature maps, with
objects decoded as short auto-regressive word sequences and trained end to
end via similarity-based set matching. Pure numpy/scipy, desk scale.
"""

__version__ = "0.1.0"

from .geometry import Box3D, bev_iou, box_corners, footprint, iou3d, normalize_angle
from .words import (
    ABLATION_ORDERS,
    DEFAULT_ORDER,
    CategoryWord,
    LocationWord,
    ObjectSequence,
    OrientationWord,
    RegionWord,
    SizeWord,
    WordOrder,
    decode,
    encode,
)

__all__ = [
    "__version__",
    "Box3D",
    "bev_iou",
    "box_corners",
    "footprint",
    "iou3d",
    "normalize_angle",
    "ABLATION_ORDERS",
    "DEFAULT_ORDER",
    "CategoryWord",
    "LocationWord",
    "ObjectSequence",
    "OrientationWord",
    "RegionWord",
    "SizeWord",
    "WordOrder",
    "decode",
    "encode",
]
