"""Baseline policies race on a few test worlds.

Runs the five pre-specified exploration policies with the shared threshold
annotation heuristic and reports the segmentation quality each one buys
with its annotation budget. Expect the stationary rotator to lose to the
wanderers, and the space filler to sit at the top. Takes a minute or two.
"""

import numpy as np

from stripworld.harness import EpisodeConfig, SPLIT_SEEDS, run_episode
from stripworld.world import generate_world

AGENTS = ("random", "rotate", "bounce", "frontier", "spacefill")
WORLDS = SPLIT_SEEDS["test"][:4]

results = {a: [] for a in AGENTS}
anns = {a: [] for a in AGENTS}

for ws in WORLDS:
    world = generate_world(ws)  # share the world across agents
    for agent_id in AGENTS:
        cfg = EpisodeConfig(world_seed=ws, start_seed=0, agent_id=agent_id)
        rec = run_episode(cfg, world=world)
        results[agent_id].append(rec.final_miou)
        anns[agent_id].append(rec.n_annotate)
        print(f"world {ws} {agent_id:<10} miou {rec.final_miou:.3f}  "
              f"annotations {rec.n_annotate:3d}  collects {rec.n_collect:3d}")

print("\nmean over worlds:")
for agent_id in sorted(AGENTS, key=lambda a: np.mean(results[a])):
    print(f"  {agent_id:<10} miou {np.mean(results[agent_id]):.3f}  "
          f"mean annotations {np.mean(anns[agent_id]):.1f}")
