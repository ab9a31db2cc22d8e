"""
Why summing gradients across views hides splats from densification
==================================================================

Two cameras look at the origin from opposite sides.  A splat at the origin
that should move along +x pushes the image-plane positions in opposite
directions, so the summed screen-space gradient vanishes even though each
view wants it to move.
"""

import numpy as np

from mvgs.gradients import GradAccumulator, densify_metrics
from mvgs.projection import grad_world_to_ndc
from mvgs.scene import Camera

front = Camera(np.eye(3), [0, 0, 1], 20, 20, 8, 8, 16, 16)
back = Camera(np.diag([-1.0, 1, -1]), [0, 0, 1], 20, 20, 8, 8, 16, 16)
print("camera centres:", front.center, back.center)

world_grad = np.array([1.0, 0, 0])
per_view = np.array([[grad_world_to_ndc(world_grad, c.world_to_camera(np.zeros(3)), c)] for c in (front, back)])
print("per-view NDC gradients:", per_view[:, 0].tolist())
print("sum over views:        ", per_view.sum(axis=0)[0].tolist())

# one optimisation step with both views in the batch
acc = GradAccumulator.zeros(1)
acc.fold([0, 1], per_view, np.linalg.norm(per_view, axis=-1).sum(axis=0), np.array([True]))
m = densify_metrics(acc)
print(f"e_old = {m.e_old[0]:.3g}   (norm of the sum: never densified)")
print(f"e2    = {m.e2[0]:.3g}   (sum of per-view norms)")
print(f"e1    = {m.e1[0]:.3g}   (sum of per-pixel norms)")
