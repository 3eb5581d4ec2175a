"""From a rendered frame to a safe set and a barrier.

A camera looks down an aisle at a wet-floor sign. We ground
"AROUND wet_floor_sign" in the image, project the masks into a grid, threshold
it, and read the signed distance at a few points along the approach.

    python demos/grounding_walkthrough.py
"""

import numpy as np

from ctxsafe.grounding import Barrier, barrier_value, compose_image_safe_set, ground_predicates, project_and_accumulate
from ctxsafe.predicate import Predicate
from ctxsafe.sensor import CameraModel, render_frame
from ctxsafe.sim import EpisodeConfig, make_grid
from ctxsafe.world import get_builtin, ground_truth_safe

sc = get_builtin("wet_floor_sign")
cam = CameraModel()
pose = (4.0, 0.0, 0.0)  # the sign sits about 4.8 m ahead, inside the 3-7 m band
frame = render_frame(sc, pose, cam, 0.0)
masks = frame.class_masks()
print("classes in view:", ", ".join(sorted(masks)))

safe_preds = [Predicate("ON", "floor")]
unsafe_preds = [Predicate("AROUND", "wet_floor_sign")]
g = ground_predicates(safe_preds, unsafe_preds, masks, frame.labels.shape)
safe_px, unsafe_px = compose_image_safe_set(g.safe_masks, g.unsafe_masks, frame.labels.shape)
print(f"image: {safe_px.sum()} safe pixels, {unsafe_px.sum()} unsafe pixels")

# Only pixels whose depth falls in [3, 7] m vote; the rest are left unobserved.
grid = make_grid(sc, EpisodeConfig(sc.name))
project_and_accumulate(safe_px, unsafe_px, frame, pose, grid, cam)
barrier = Barrier.build(grid)
print(f"grid: {int((~barrier.safe).sum())} unsafe cells of {barrier.safe.size}")

# The dilation kernel is fixed in pixels, so at this range it covers more floor
# than the 0.5 m ground-truth buffer: h turns negative before the true region.
print("\n   x     h (m)   ground truth")
for x in np.arange(6.0, 9.01, 0.5):
    p = (float(x), 0.0)
    print(f"{x:5.1f}  {barrier_value(barrier, p):+7.3f}   {'safe' if ground_truth_safe(sc, p) else 'unsafe'}")
