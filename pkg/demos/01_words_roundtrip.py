"""
A 3D box as a five-word sequence
================================

Every object the detector handles is spelled as five words: a region
anchoring it to a BEV cell, then location, orientation, size, and
category. This script encodes one box, prints each word, and decodes
the sequence back to show the round trip is exact.
"""

import numpy as np

from seqdet3d.geometry import Box3D
from seqdet3d.words import RegionWord, decode, encode

# a delivery-van-ish box: center near (-2.1, 4.0), heading 30 degrees
box = Box3D(x=-2.1, y=4.0, z=0.9, l=4.6, w=1.9, h=1.8,
            theta=np.deg2rad(30), class_id=0)

# the region is the BEV cell that claims the object; here a 0.8 m cell
# centered at (-2.0, 4.0), so the box center sits slightly off-center
region = RegionWord(r_x=-2.0, r_y=4.0, r_l=0.8, r_w=0.8)

seq = encode(box, region, n_classes=2)

print("region      ", seq.region)
# location: (x - r_x)/r_l and (y - r_y)/r_w, plus absolute z
print("location    ", seq.location)
# orientation is (sin, cos) so the heading never wraps
print("orientation ", seq.orientation)
# sizes are stored as logs; exp restores meters
size_vec = np.array([seq.size.u_l, seq.size.u_w, seq.size.u_h])
print("size        ", seq.size, "-> exp:", np.exp(size_vec))
# category: probabilities over classes plus background (last slot)
print("category    ", seq.category.p)

back = decode(seq)[0]
print("\ndecoded box ", back)
err = max(abs(back.x - box.x), abs(back.y - box.y), abs(back.z - box.z),
          abs(back.l - box.l), abs(back.w - box.w), abs(back.h - box.h),
          abs(back.theta - box.theta))
print("max component error:", err)
assert err < 1e-9
