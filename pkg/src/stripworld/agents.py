"""Pre-specified exploration policies and annotation strategies.

Each agent is an object with `reset(world, start_pose, radius, rng)` and
`act(obs, pose) -> Action`. Movement policies are composed with an
annotation strategy (threshold / random) by ScriptedAgent; the learnt agent
lives in the rl module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .render import View
from .propagation import PropagatedMask
from .world import (GridWorld, HEADINGS, MovementAction, OCC_FREE, Pose,
                    ROTATE_DEG, bfs_path, distance_field)


class Action(IntEnum):
    MOVE_FORWARD = 0
    MOVE_LEFT = 1
    MOVE_RIGHT = 2
    ROTATE_LEFT = 3
    ROTATE_RIGHT = 4
    ANNOTATE = 5
    COLLECT = 6


MOVEMENT_ACTIONS = tuple(Action(a) for a in range(5))
N_ACTIONS = 7


def to_movement(action: Action) -> MovementAction:
    if action >= Action.ANNOTATE:
        raise ValueError(f"{action!r} is not a movement action")
    return MovementAction(int(action))


@dataclass
class AgentObservation:
    view: View
    predicted: np.ndarray       # (W, K) distribution from the current model
    prop_mask: PropagatedMask
    collision_flag: bool
    step_index: int


@dataclass(frozen=True)
class ThresholdPerceptionConfig:
    collect_threshold: float = 0.30
    annotate_threshold: float = 0.85

    def __post_init__(self):
        if not (0 < self.collect_threshold < self.annotate_threshold <= 1):
            raise ValueError("need 0 < collect < annotate <= 1")


def threshold_perception(obs: AgentObservation,
                         cfg: ThresholdPerceptionConfig) -> Action | None:
    """Annotate above the high threshold, Collect above the low one, else defer."""
    uf = obs.prop_mask.unknown_fraction
    if uf >= cfg.annotate_threshold:
        return Action.ANNOTATE
    if uf >= cfg.collect_threshold:
        return Action.COLLECT
    return None


def _rotation_toward(heading: int, target: int) -> Action:
    """Single 15-degree rotation step along the shorter arc."""
    diff = (target - heading) % 360
    return Action.ROTATE_LEFT if diff <= 180 else Action.ROTATE_RIGHT


def _heading_toward_cell(cur: tuple[int, int], nxt: tuple[int, int]) -> int:
    dx, dy = nxt[0] - cur[0], nxt[1] - cur[1]
    if (dx, dy) == (1, 0):
        return 0
    if (dx, dy) == (0, 1):
        return 90
    if (dx, dy) == (-1, 0):
        return 180
    if (dx, dy) == (0, -1):
        return 270
    raise ValueError(f"cells {cur} -> {nxt} are not 4-adjacent")


# ---------------------------------------------------------------------------
# movement policies

class RandomMovement:
    def reset(self, world, start_pose, radius, rng):
        self.rng = rng

    def act(self, obs, pose) -> Action:
        return MOVEMENT_ACTIONS[self.rng.integers(0, 5)]


class RotateMovement:
    def reset(self, world, start_pose, radius, rng):
        pass

    def act(self, obs, pose) -> Action:
        return Action.ROTATE_LEFT


class BounceMovement:
    """Walk straight ahead; on collision, pick a fresh random heading.

    A heading that immediately collides again simply triggers another
    resample on the next collision event.
    """

    def reset(self, world, start_pose, radius, rng):
        self.rng = rng
        self.target = start_pose.heading

    def act(self, obs, pose) -> Action:
        if obs.collision_flag:
            self.target = int(HEADINGS[self.rng.integers(0, len(HEADINGS))])
        if pose.heading != self.target:
            return _rotation_toward(pose.heading, self.target)
        return Action.MOVE_FORWARD


# occupancy map cell states
MAP_UNKNOWN = 0
MAP_FREE = 1
MAP_OBSTACLE = 2


@dataclass
class OccupancyMap:
    cell_size: float
    grid: np.ndarray  # (height, width) uint8
    range_limit: float = 4.0

    @classmethod
    def for_world(cls, world: GridWorld, range_limit: float = 4.0) -> "OccupancyMap":
        return cls(cell_size=world.cell_size,
                   grid=np.zeros((world.height, world.width), dtype=np.uint8),
                   range_limit=range_limit)


def _ray_cell_walk(x: float, y: float, angle: float, max_dist: float, cs: float):
    """Yield (ix, iy, t_enter) for cells along a ray, entry distance <= max_dist."""
    ix, iy = int(x // cs), int(y // cs)
    dirx, diry = np.cos(angle), np.sin(angle)
    step_x = 1 if dirx >= 0 else -1
    step_y = 1 if diry >= 0 else -1
    t_dx = abs(cs / dirx) if dirx != 0 else np.inf
    t_dy = abs(cs / diry) if diry != 0 else np.inf
    t_max_x = ((ix + (step_x > 0)) * cs - x) / dirx if dirx != 0 else np.inf
    t_max_y = ((iy + (step_y > 0)) * cs - y) / diry if diry != 0 else np.inf
    t = 0.0
    while t <= max_dist:
        yield ix, iy, t
        if t_max_x <= t_max_y:
            t = t_max_x
            t_max_x += t_dx
            ix += step_x
        else:
            t = t_max_y
            t_max_y += t_dy
            iy += step_y


def update_occupancy(omap: OccupancyMap, pose: Pose, view: View,
                     fov_deg: float = 90.0) -> OccupancyMap:
    """Back-project the view's depth rays into the map.

    Cells traversed before the hit (within range_limit) become free; the hit
    cell becomes an obstacle when within range. Obstacles are never
    downgraded to free. Idempotent for identical observations.
    """
    W = view.width
    offsets = fov_deg / 2.0 - (np.arange(W) + 0.5) * fov_deg / W
    H, Wc = omap.grid.shape
    for i in range(W):
        depth = float(view.depth[i])
        angle = np.deg2rad(pose.heading + offsets[i])
        reach = min(depth, omap.range_limit)
        for ix, iy, t in _ray_cell_walk(pose.x, pose.y, angle, reach, omap.cell_size):
            if not (0 <= ix < Wc and 0 <= iy < H):
                break
            if t >= depth - 1e-9:
                omap.grid[iy, ix] = MAP_OBSTACLE
            elif omap.grid[iy, ix] != MAP_OBSTACLE:
                omap.grid[iy, ix] = MAP_FREE
    return omap


def _bfs_to_nearest(passable: np.ndarray, start: tuple[int, int],
                    goals: np.ndarray) -> list[tuple[int, int]] | None:
    """Shortest path from start to the nearest goal cell, over passable cells."""
    from collections import deque
    H, W = passable.shape
    sx, sy = start
    if not passable[sy, sx]:
        return None
    prev = np.full((H, W), -1, dtype=np.int32)
    prev[sy, sx] = sy * W + sx
    q = deque([(sx, sy)])
    found = None
    if goals[sy, sx]:
        found = (sx, sy)
    while q and found is None:
        x, y = q.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < W and 0 <= ny < H and passable[ny, nx] and prev[ny, nx] < 0:
                prev[ny, nx] = y * W + x
                if goals[ny, nx]:
                    found = (nx, ny)
                    break
                q.append((nx, ny))
    if found is None:
        return None
    path = [found]
    while path[-1] != (sx, sy):
        x, y = path[-1]
        p = prev[y, x]
        path.append((p % W, p // W))
    path.reverse()
    return path


class FrontierMovement:
    """Online frontier exploration over a self-built occupancy map.

    Navigates toward the nearest frontier (map-free cell adjacent to unknown
    space) within geodesic radius r of the start; when no frontier remains,
    revisits the least-recently-seen free cell.
    """

    def reset(self, world, start_pose, radius, rng):
        self.map = OccupancyMap.for_world(world)
        self.radius = radius
        self.start_cell = world.cell_of(start_pose.x, start_pose.y)
        self.cell_size = world.cell_size
        self.last_visit = np.full(self.map.grid.shape, -1, dtype=np.int64)

    def _frontiers(self, within: np.ndarray) -> np.ndarray:
        free = self.map.grid == MAP_FREE
        unknown = self.map.grid == MAP_UNKNOWN
        adj = np.zeros_like(free)
        adj[1:, :] |= unknown[:-1, :]
        adj[:-1, :] |= unknown[1:, :]
        adj[:, 1:] |= unknown[:, :-1]
        adj[:, :-1] |= unknown[:, 1:]
        return free & adj & within

    def act(self, obs, pose) -> Action:
        update_occupancy(self.map, pose, obs.view)
        cur = (int(pose.x // self.cell_size), int(pose.y // self.cell_size))
        self.last_visit[cur[1], cur[0]] = obs.step_index

        free = self.map.grid == MAP_FREE
        # geodesic confinement measured over the agent's own map
        sx, sy = self.start_cell
        dist = _map_distance(free, (sx, sy))
        within = dist <= self.radius / self.cell_size
        passable = free & within
        passable[cur[1], cur[0]] = True

        goals = self._frontiers(within)
        goals[cur[1], cur[0]] = False
        path = _bfs_to_nearest(passable, cur, goals)
        if path is None or len(path) < 2:
            path = self._fallback_path(passable, cur)
        if path is None or len(path) < 2:
            return Action.ROTATE_LEFT  # nowhere to go; keep looking around
        target_heading = _heading_toward_cell(path[0], path[1])
        if pose.heading != target_heading:
            return _rotation_toward(pose.heading, target_heading)
        return Action.MOVE_FORWARD

    def _fallback_path(self, passable, cur):
        candidates = passable & (self.last_visit < self.last_visit[cur[1], cur[0]])
        candidates[cur[1], cur[0]] = False
        if not candidates.any():
            return None
        oldest = self.last_visit[candidates].min()
        goals = passable & (self.last_visit == oldest)
        return _bfs_to_nearest(passable, cur, goals)


def _map_distance(free: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """BFS step counts over a boolean grid; inf where unreachable."""
    sx, sy = start
    dist = np.full(free.shape, np.inf)
    if not free[sy, sx]:
        return dist
    dist[sy, sx] = 0
    frontier = np.zeros_like(free)
    frontier[sy, sx] = True
    step = 0
    while frontier.any():
        step += 1
        grown = np.zeros_like(frontier)
        grown[1:, :] |= frontier[:-1, :]
        grown[:-1, :] |= frontier[1:, :]
        grown[:, 1:] |= frontier[:, :-1]
        grown[:, :-1] |= frontier[:, 1:]
        grown &= free & ~np.isfinite(dist)
        dist[grown] = step
        frontier = grown
    return dist


# ---------------------------------------------------------------------------
# space-filling tour (privileged ground-truth map)

def nn_tour(D: np.ndarray, start: int = 0) -> list[int]:
    """Greedy nearest-neighbour open tour beginning at node `start`."""
    n = len(D)
    tour = [start]
    left = set(range(n)) - {start}
    while left:
        last = tour[-1]
        nxt = min(left, key=lambda j: (D[last, j], j))
        tour.append(nxt)
        left.remove(nxt)
    return tour


def tour_length(D: np.ndarray, tour: list[int]) -> float:
    return float(sum(D[a, b] for a, b in zip(tour[:-1], tour[1:])))


def _first_improving_reversal(D, tour):
    """Apply the first shortening 2-opt segment reversal; None if none exists."""
    n = len(tour)
    for i in range(1, n - 1):
        for j in range(i + 1, n):
            delta = D[tour[i - 1], tour[j]] - D[tour[i - 1], tour[i]]
            if j + 1 < n:
                delta += D[tour[i], tour[j + 1]] - D[tour[j], tour[j + 1]]
            if delta < -1e-12:
                return tour[:i] + tour[i:j + 1][::-1] + tour[j + 1:]
    return None


def _first_improving_relocation(D, tour):
    """Apply the first shortening or-opt move (segment of 1-3 nodes moved
    elsewhere in either orientation); None if none exists."""
    n = len(tour)
    for seg in (1, 2, 3):
        for i in range(1, n - seg + 1):
            piece = tour[i:i + seg]
            rest = tour[:i] + tour[i + seg:]
            removed = D[tour[i - 1], piece[0]]
            if i + seg < n:
                removed += D[piece[-1], tour[i + seg]] - D[tour[i - 1], tour[i + seg]]
            for j in range(1, len(rest) + 1):
                for body in (piece, piece[::-1]):
                    added = D[rest[j - 1], body[0]]
                    if j < len(rest):
                        added += D[body[-1], rest[j]] - D[rest[j - 1], rest[j]]
                    if added - removed < -1e-12:
                        return rest[:j] + body + rest[j:]
    return None


def two_opt(D: np.ndarray, tour: list[int]) -> list[int]:
    """Local improvement for an open tour with a fixed first node.

    Alternates 2-opt segment reversals with or-opt segment relocations until
    neither shortens the tour. Plain 2-opt alone has spurious local optima
    even on 4-node open tours; relocations remove most of them.
    """
    tour = list(tour)
    while True:
        nxt = _first_improving_reversal(D, tour) or _first_improving_relocation(D, tour)
        if nxt is None:
            return tour
        tour = nxt


@dataclass
class SpaceFillingTour:
    node_cells: list[tuple[int, int]]           # in tour order
    node_positions: np.ndarray                  # (n, 2) meters, tour order
    leg_paths: list[list[tuple[int, int]]]      # BFS cell paths between legs
    length: float


def build_space_filling_tour(world: GridWorld, start: tuple[float, float],
                             radius: float, node_spacing_m: float = 1.0) -> SpaceFillingTour:
    """Approximate shortest open tour over a 1 m node grid within radius.

    Nodes are grid points whose cell is free and geodesically reachable from
    the start within `radius`; the tour is nearest-neighbour construction
    followed by 2-opt, under geodesic edge weights.
    """
    start_cell = world.cell_of(*start)
    dist0 = distance_field(world, start_cell)
    spacing = max(1, int(round(node_spacing_m / world.cell_size)))
    cells = []
    for iy in range(spacing // 2, world.height, spacing):
        for ix in range(spacing // 2, world.width, spacing):
            if world.occupancy[iy, ix] == OCC_FREE and dist0[iy, ix] <= radius:
                cells.append((ix, iy))
    if not cells:
        cells = [start_cell]
    if len(cells) == 1:
        pos = np.array([world.cell_center(*cells[0])])
        return SpaceFillingTour(node_cells=cells, node_positions=pos,
                                leg_paths=[], length=0.0)

    fields = [distance_field(world, c) for c in cells]
    n = len(cells)
    D = np.empty((n, n))
    for i, f in enumerate(fields):
        for j, (jx, jy) in enumerate(cells):
            D[i, j] = f[jy, jx]
    first = min(range(n), key=lambda i: dist0[cells[i][1], cells[i][0]])
    order = two_opt(D, nn_tour(D, start=first))

    within = dist0 <= radius
    passable = (world.occupancy == OCC_FREE) & within
    legs = []
    for a, b in zip(order[:-1], order[1:]):
        path = bfs_path(passable, cells[a], cells[b])
        assert path is not None, "tour nodes must be mutually reachable within radius"
        legs.append(path)
    ordered_cells = [cells[i] for i in order]
    pos = np.array([world.cell_center(*c) for c in ordered_cells])
    return SpaceFillingTour(node_cells=ordered_cells, node_positions=pos,
                            leg_paths=legs, length=tour_length(D, order))


class SpaceFillerMovement:
    """Follows the space-filling tour's leg paths, restarting the tour
    from its first node whenever a full traversal completes."""

    def reset(self, world, start_pose, radius, rng):
        self.world = world
        self.radius = radius
        self.tour = build_space_filling_tour(world, (start_pose.x, start_pose.y), radius)
        self._build_waypoints(world.cell_of(start_pose.x, start_pose.y))

    def _build_waypoints(self, from_cell):
        head = self.tour.node_cells[0]
        legs = self.tour.leg_paths
        dist0 = distance_field(self.world, head)
        within = np.isfinite(dist0)
        passable = (self.world.occupancy == OCC_FREE) & within
        lead = bfs_path(passable, from_cell, head) or [from_cell]
        cells = list(lead)
        for leg in legs:
            cells.extend(leg[1:])
        self.waypoints = cells
        self.ptr = 0

    def act(self, obs, pose) -> Action:
        cur = self.world.cell_of(pose.x, pose.y)
        while self.ptr < len(self.waypoints) and self.waypoints[self.ptr] == cur:
            self.ptr += 1
        if self.ptr >= len(self.waypoints):
            self._build_waypoints(cur)  # tour finished: restart it
            while self.ptr < len(self.waypoints) and self.waypoints[self.ptr] == cur:
                self.ptr += 1
            if self.ptr >= len(self.waypoints):
                return Action.ROTATE_LEFT
        nxt = self.waypoints[self.ptr]
        if abs(nxt[0] - cur[0]) + abs(nxt[1] - cur[1]) != 1:
            # desynchronized (should not happen on free legs): re-plan
            self._build_waypoints(cur)
            return Action.ROTATE_LEFT
        target_heading = _heading_toward_cell(cur, nxt)
        if pose.heading != target_heading:
            return _rotation_toward(pose.heading, target_heading)
        return Action.MOVE_FORWARD


# ---------------------------------------------------------------------------
# annotation strategies and composition

class ScriptedAgent:
    """Movement policy + annotation strategy.

    The threshold strategy annotates when the propagated mask is mostly
    unknown and collects once per annotate cycle when the lower threshold is
    crossed (re-collecting an unchanged mask adds no information). The
    random strategy annotates/collects with 10% probability each.
    """

    def __init__(self, movement, perception: str = "threshold",
                 threshold_cfg: ThresholdPerceptionConfig | None = None):
        self.movement = movement
        self.perception = perception
        self.cfg = threshold_cfg or ThresholdPerceptionConfig()
        if perception not in ("threshold", "random", "none"):
            raise ValueError(f"unknown perception strategy: {perception}")

    def reset(self, world, start_pose, radius, rng):
        self.rng = rng
        self._collected = False
        self.movement.reset(world, start_pose, radius,
                            np.random.default_rng(rng.integers(0, 2 ** 63)))

    def act(self, obs: AgentObservation, pose: Pose) -> Action:
        if self.perception == "threshold":
            choice = threshold_perception(obs, self.cfg)
            if choice == Action.ANNOTATE:
                self._collected = False
                return Action.ANNOTATE
            if choice == Action.COLLECT and not self._collected:
                self._collected = True
                return Action.COLLECT
        elif self.perception == "random":
            u = self.rng.random()
            if u < 0.1:
                return Action.ANNOTATE
            if u < 0.2:
                if obs.prop_mask.known_count == 0:
                    return Action.ANNOTATE  # collect precondition guard
                return Action.COLLECT
        return self.movement.act(obs, pose)


def random_perception_wrapper(base_policy, obs: AgentObservation, pose: Pose,
                              rng: np.random.Generator) -> Action:
    """Annotate / Collect with 10% probability each, else the base movement."""
    u = rng.random()
    if u < 0.1:
        return Action.ANNOTATE
    if u < 0.2:
        if obs.prop_mask.known_count == 0:
            return Action.ANNOTATE
        return Action.COLLECT
    return base_policy.act(obs, pose)


MOVEMENT_POLICIES = {
    "random": RandomMovement,
    "rotate": RotateMovement,
    "bounce": BounceMovement,
    "frontier": FrontierMovement,
    "spacefill": SpaceFillerMovement,
}


def make_agent(agent_id: str, perception_id: str = "threshold", **kwargs):
    """Agent factory for the CLI ids random|rotate|bounce|frontier|spacefill|rl."""
    if agent_id == "rl":
        from .rl import RLAgent, load_policy
        path = kwargs.get("policy_path")
        if path is None:
            raise ValueError("rl agent needs policy_path")
        return RLAgent(load_policy(path))
    if agent_id not in MOVEMENT_POLICIES:
        raise ValueError(f"unknown agent id: {agent_id}")
    return ScriptedAgent(MOVEMENT_POLICIES[agent_id](), perception=perception_id)
