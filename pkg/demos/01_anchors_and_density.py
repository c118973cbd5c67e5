"""
Anchors, target assignment and density maps on one synthetic scene.

Run:  python3 demos/01_anchors_and_density.py
"""

import numpy as np

from repcount.dataio import ClassSpec, SceneSpec, generate_scene
from repcount.densitymap import count, render_density
from repcount.geometry import PROV_GT, PROV_TEACHER, AnchorConfig, assign_anchor_targets, generate_anchors
from repcount.teachers import OracleLabelTeacher

# Two shape classes; only the red circles are annotated with dots.
spec = SceneSpec(classes=[
    ClassSpec("circle", (220, 60, 60), (10, 12), (9, 9)),
    ClassSpec("square", (60, 60, 220), (12, 14), (4, 4)),
])
img = generate_scene(spec, np.random.default_rng(0), name="demo")
print(f"scene {img.width}x{img.height}: {img.gt_count} annotated circles, "
      f"{img.hidden_gt[1].count} unannotated squares")

# k = 4 sizes x 3 ratios anchors at every cell of a stride-8 grid.
cfg = AnchorConfig(sizes=(8, 12, 16, 24), stride=8)
anchors = generate_anchors(cfg, img.height // 8, img.width // 8)
print(f"{len(anchors)} anchors = {img.height // 8} x {img.width // 8} cells x {cfg.num_anchors}")

# Annotated dots become boxes of the mean exemplar size.
gt = img.annotation_boxes()
counts = np.full(len(gt), float(img.gt_count))

plain = assign_anchor_targets(anchors, gt, counts)
taught = assign_anchor_targets(anchors, gt, counts, teacher=OracleLabelTeacher(), image=img)
print("without teacher:", plain.summary())
print("with teacher:   ", taught.summary())

# Teacher-labelled positives sit on squares and carry the square count.
t_pos = (taught.provenance == PROV_TEACHER) & (taught.labels == 1)
print(f"teacher positives: {t_pos.sum()}, their repetition targets: {sorted({float(v) for v in taught.repetition[t_pos]})}")
gt_pos = (taught.provenance == PROV_GT) & (taught.labels == 1)
print(f"annotated positives: {gt_pos.sum()}, their repetition targets: {sorted({float(v) for v in taught.repetition[gt_pos]})}")

# A density map integrates to the number of dots.
z = render_density(img.dots, img.height, img.width)
print(f"density map sum = {count(z):.6f} for {len(img.dots)} dots")
