"""A first look at the strip world.

Generates a floor plan, walks the agent a few steps, and prints what it
sees: depth profiles, ground-truth classes, and the appearance features
the segmentation model has to work with.
"""

import numpy as np

from stripworld.harness import sample_start
from stripworld.render import render_view
from stripworld.world import MovementAction, generate_world, step_pose

world = generate_world(seed=7)
free = (world.occupancy == 0).sum()
print(f"world 7: {world.width}x{world.height} cells, "
      f"{free} free, {world.class_count} classes")

pose = sample_start(world, 0)
print(f"start pose: ({pose.x:.2f}, {pose.y:.2f}) heading {pose.heading} deg")

view = render_view(world, pose)
print("\ndepth profile (m):")
print(np.array2string(view.depth, precision=2, max_line_width=100))
print("ground-truth classes:")
print(view.gt_class)
print(f"appearance features: {view.features.shape}, "
      f"first pixel: {np.round(view.features[0], 2)}")

# walk forward until we bump into something, then peek left
steps = 0
while steps < 40:
    pose, collided = step_pose(world, pose, MovementAction.MOVE_FORWARD)
    steps += 1
    if collided:
        print(f"\nbumped into a wall after {steps} steps")
        break

view = render_view(world, pose)
print(f"closest surface now at {view.depth.min():.2f} m, "
      f"classes in view: {sorted(set(view.gt_class.tolist()))}")

pose, _ = step_pose(world, pose, MovementAction.ROTATE_LEFT)
left = render_view(world, pose)
print(f"after one 15 deg rotation the view shifts: "
      f"{np.count_nonzero(left.gt_class != view.gt_class)}/{view.width} "
      f"pixels changed class")
