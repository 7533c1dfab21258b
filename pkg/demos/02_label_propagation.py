"""Label propagation, step by step.

An annotation buys ground-truth labels for the current view. As the agent
moves, each labeled pixel is carried to the next view through exact
geometric correspondence — until the surface it sits on leaves the field
of view. This script watches the labeled fraction decay on a short walk,
then tops it up with a second annotation.
"""

import numpy as np

from stripworld.harness import sample_start
from stripworld.propagation import UNKNOWN, do_annotate, propagate
from stripworld.render import correspondence, render_view
from stripworld.world import MovementAction, generate_world, step_pose

world = generate_world(seed=21)
pose = sample_start(world, 1)
view = render_view(world, pose)

trainset = []
mask = do_annotate(trainset, view)
print(f"annotated: {mask.known_count}/{view.width} pixels known")

script = [MovementAction.ROTATE_LEFT] * 3 + [MovementAction.MOVE_FORWARD] * 6 \
    + [MovementAction.ROTATE_RIGHT] * 4

for i, act in enumerate(script):
    pose, collided = step_pose(world, pose, act)
    new_view = render_view(world, pose)
    corr = correspondence(view, new_view)
    mask = propagate(mask, corr)
    view = new_view
    matched = int((corr >= 0).sum())
    print(f"step {i:2d} {act.name:<13} matched {matched:2d}/64  "
          f"known {mask.known_count:2d}  unknown frac {mask.unknown_fraction:.2f}"
          + ("  (collision)" if collided else ""))

# sanity: every surviving label still agrees with the ground truth here
known = mask.labels != UNKNOWN
if known.any():
    ok = (mask.labels[known] == view.gt_class[known]).mean()
    print(f"\nsurviving labels correct: {ok:.0%}")

mask = do_annotate(trainset, view)
print(f"second annotation: {mask.known_count}/64 known again, "
      f"{len(trainset)} labeled views in the training pool")
