"""
Dense decoding and similarity matching
======================================

The model reads a scene and emits one candidate object per BEV pixel,
each decoded word by word while the hidden state resamples itself at
locations the words so far point at. Training then needs to decide
which pixel answers for which ground truth: a maximum-similarity
assignment, computed here on an untrained model.
"""

import dataclasses

from seqdet3d.backbone import GridConfig
from seqdet3d.matching import SimilarityMetric, gt_against_region, match, similarity
from seqdet3d.model import DetectionModel
from seqdet3d.scenegen import default_scenegen_config, generate_scene
from seqdet3d.training import gt_sequences
from seqdet3d.words import decode

# small world so the printout stays readable
grid = GridConfig(extent=((-12.8, 12.8), (-12.8, 12.8)),
                  h=32, w=32, cell=0.8, c=16)
config = dataclasses.replace(default_scenegen_config(seed=5),
                             extent=((-12.8, 12.8), (-12.8, 12.8), (-1.0, 3.0)))
scene = generate_scene(config, scene_index=1)
print(f"scene: {len(scene.boxes)} objects, {len(scene.points)} points")

model = DetectionModel(grid, n_classes=2, seed=0)
preds = model.forward(scene)
print(f"decoded {preds.n_pixels} candidate sequences "
      f"({grid.h} x {grid.w} pixels)")

# one pixel's candidate, decoded back to a box
mid = preds.n_pixels // 2 + grid.w // 2
cand = decode(preds.sequence_at(mid))[0]
print(f"pixel {mid} decodes to a box at ({cand.x:.2f}, {cand.y:.2f}), "
      f"{cand.l:.2f} x {cand.w:.2f} m")

# match ground truths to pixels by similarity (class alignment times a
# geometry kernel); the assignment is injective: one pixel per object
metric = SimilarityMetric()
gts = gt_sequences(scene, n_classes=2)
result = match(preds, gts, metric)
print("\nassignment (untrained model, so similarities are small):")
for j, pixel in enumerate(result.gt_to_pixel):
    b = scene.boxes[j]
    px = preds.region_centers[pixel]
    print(f"  gt {j} at ({b.x:6.2f}, {b.y:6.2f}) -> pixel {pixel} "
          f"at ({px[0]:6.2f}, {px[1]:6.2f}), "
          f"similarity {result.pair_similarities[j]:.4f}")
assert len(set(result.gt_to_pixel)) == len(gts)

# re-score each pair by hand: the target is re-encoded against the
# matched pixel's own region so both sequences share a frame
direct = 0.0
for j, p in enumerate(result.gt_to_pixel):
    pred = preds.sequence_at(p)
    target = gt_against_region(scene.boxes[j], pred.region, n_classes=2)
    direct += similarity(pred, target, metric)
print(f"\ntotal similarity {result.total:.6f} (re-scored {direct:.6f})")
assert abs(direct - result.total) < 1e-9
