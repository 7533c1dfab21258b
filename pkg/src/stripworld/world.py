"""2D grid world: procedural floor plans, agent kinematics, geodesic distance.

The world is a closed occupancy grid. Wall cells carry a semantic class id
and a scalar texture value; free cells form a single connected component.
Worlds are immutable after generation and safe to share between episodes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np
from scipy.ndimage import gaussian_filter

OCC_FREE = 0
OCC_WALL = 1

# sub-sampling step (meters) for the swept-segment collision test
COLLISION_SAMPLE = 0.05

STEP_LENGTH = 0.25
ROTATE_DEG = 15
HEADINGS = tuple(range(0, 360, ROTATE_DEG))


class MovementAction(IntEnum):
    MOVE_FORWARD = 0
    MOVE_LEFT = 1
    MOVE_RIGHT = 2
    ROTATE_LEFT = 3
    ROTATE_RIGHT = 4


class WorldGenerationError(RuntimeError):
    """Raised when no valid world can be generated for the given parameters."""


@dataclass(frozen=True)
class GenerationParams:
    width_m: float = 24.0
    height_m: float = 24.0
    cell_size: float = 0.25
    class_count: int = 13
    d_app: int = 8
    room_count_range: tuple[int, int] = (10, 14)
    room_size_range_m: tuple[float, float] = (2.0, 3.5)
    corridor_width: int = 2  # cells
    object_patch_count: int = 40
    obstacle_block_count: int = 72
    embedding_scale: float = 0.35
    texture_scale: float = 2.5
    texture_smoothness_m: float = 4.0  # correlation length of the texture field
    max_retries: int = 20


@dataclass
class GridWorld:
    seed: int
    cell_size: float
    width: int   # cells, x axis
    height: int  # cells, y axis
    occupancy: np.ndarray      # (height, width) uint8, OCC_FREE/OCC_WALL
    surface_class: np.ndarray  # (height, width) int16, -1 on free cells
    class_count: int
    texture_field: np.ndarray  # (height, width) float64 in [0, 1]
    class_embeddings: np.ndarray  # (class_count, d_app)
    texture_vec: np.ndarray       # (d_app,) appearance direction of texture

    @property
    def d_app(self) -> int:
        return self.class_embeddings.shape[1]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """Cell (ix, iy) containing world position (x, y) in meters."""
        return int(x // self.cell_size), int(y // self.cell_size)

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (ix + 0.5) * self.cell_size, (iy + 0.5) * self.cell_size

    def is_wall_cell(self, ix: int, iy: int) -> bool:
        if ix < 0 or iy < 0 or ix >= self.width or iy >= self.height:
            return True
        return self.occupancy[iy, ix] == OCC_WALL

    def is_free_position(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return not self.is_wall_cell(ix, iy)

    def free_cells(self) -> np.ndarray:
        """(n, 2) array of free cell (ix, iy) pairs, row-major order."""
        iy, ix = np.nonzero(self.occupancy == OCC_FREE)
        return np.stack([ix, iy], axis=1)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int  # degrees, multiple of 15, in [0, 360)

    def __post_init__(self):
        if self.heading % ROTATE_DEG != 0 or not (0 <= self.heading < 360):
            raise ValueError(f"heading must be a multiple of {ROTATE_DEG} in [0,360): {self.heading}")

    def direction(self, offset_deg: float = 0.0) -> tuple[float, float]:
        a = np.deg2rad(self.heading + offset_deg)
        return float(np.cos(a)), float(np.sin(a))


def _carve_rect(occ, x0, y0, w, h):
    occ[y0:y0 + h, x0:x0 + w] = OCC_FREE


def _flood_fill_free(occ: np.ndarray) -> np.ndarray:
    """Boolean mask of free cells reachable from the first free cell (4-conn)."""
    free = occ == OCC_FREE
    reach = np.zeros_like(free)
    ys, xs = np.nonzero(free)
    if len(ys) == 0:
        return reach
    q = deque([(ys[0], xs[0])])
    reach[ys[0], xs[0]] = True
    while q:
        y, x = q.popleft()
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if free[ny, nx] and not reach[ny, nx]:
                reach[ny, nx] = True
                q.append((ny, nx))
    return reach


def _generate_once(seed: int, params: GenerationParams) -> GridWorld | None:
    rng = np.random.default_rng(seed)
    cs = params.cell_size
    W = int(round(params.width_m / cs))
    H = int(round(params.height_m / cs))
    occ = np.full((H, W), OCC_WALL, dtype=np.uint8)

    n_rooms = int(rng.integers(params.room_count_range[0], params.room_count_range[1] + 1))
    lo = max(2, int(params.room_size_range_m[0] / cs))
    hi = int(params.room_size_range_m[1] / cs)
    centers = []
    for _ in range(n_rooms):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        if W - w - 2 <= 1 or H - h - 2 <= 1:
            continue
        x0 = int(rng.integers(1, W - w - 1))
        y0 = int(rng.integers(1, H - h - 1))
        _carve_rect(occ, x0, y0, w, h)
        centers.append((x0 + w // 2, y0 + h // 2))
    if len(centers) < 2:
        return None

    # L-shaped corridors chaining consecutive room centers
    cw = params.corridor_width
    for (x0, y0), (x1, y1) in zip(centers[:-1], centers[1:]):
        xa, xb = sorted((x0, x1))
        if rng.random() < 0.5:
            occ[y0:y0 + cw, xa:xb + cw] = OCC_FREE
            ya, yb = sorted((y0, y1))
            occ[ya:yb + cw, x1:x1 + cw] = OCC_FREE
        else:
            ya, yb = sorted((y0, y1))
            occ[ya:yb + cw, x0:x0 + cw] = OCC_FREE
            xa, xb = sorted((x0, x1))
            occ[y1:y1 + cw, xa:xb + cw] = OCC_FREE

    # closed boundary
    occ[0, :] = occ[-1, :] = OCC_WALL
    occ[:, 0] = occ[:, -1] = OCC_WALL

    # free-standing obstacle blocks; revert any block that splits free space
    for _ in range(params.obstacle_block_count):
        bw = int(rng.integers(1, 4))
        bh = int(rng.integers(1, 4))
        x0 = int(rng.integers(1, W - bw - 1))
        y0 = int(rng.integers(1, H - bh - 1))
        region = occ[y0:y0 + bh, x0:x0 + bw].copy()
        if not (region == OCC_FREE).all():
            continue
        occ[y0:y0 + bh, x0:x0 + bw] = OCC_WALL
        reach = _flood_fill_free(occ)
        if reach.sum() != (occ == OCC_FREE).sum():
            occ[y0:y0 + bh, x0:x0 + bw] = region

    reach = _flood_fill_free(occ)
    n_free = int((occ == OCC_FREE).sum())
    if n_free < 100 or int(reach.sum()) != n_free:
        return None

    # semantics: walls default to class 0, object patches painted over
    K = params.class_count
    sclass = np.where(occ == OCC_WALL, 0, -1).astype(np.int16)
    exposed = _exposed_wall_mask(occ)
    for _ in range(params.object_patch_count):
        c = int(rng.integers(1, K))
        pw = int(rng.integers(1, 9))
        ph = int(rng.integers(1, 9))
        x0 = int(rng.integers(0, W - pw))
        y0 = int(rng.integers(0, H - ph))
        patch = occ[y0:y0 + ph, x0:x0 + pw] == OCC_WALL
        if not (exposed[y0:y0 + ph, x0:x0 + pw] & patch).any():
            continue
        sclass[y0:y0 + ph, x0:x0 + pw][patch] = c

    # Smooth texture field: low-pass filtered noise, rescaled to [0, 1].
    # Spatial correlation makes texture a misleading local class cue, so
    # appearance learnt at one spot does not transfer for free.
    raw = gaussian_filter(rng.standard_normal((H, W)),
                          sigma=params.texture_smoothness_m / cs, mode="wrap")
    texture = (raw - raw.min()) / (raw.max() - raw.min())
    emb = rng.normal(0.0, params.embedding_scale, size=(K, params.d_app))
    tvec = rng.normal(0.0, 1.0, size=params.d_app)
    tvec *= params.texture_scale / np.linalg.norm(tvec)

    world = GridWorld(
        seed=seed, cell_size=cs, width=W, height=H,
        occupancy=occ, surface_class=sclass, class_count=K,
        texture_field=texture, class_embeddings=emb, texture_vec=tvec,
    )
    if len(visible_classes(world)) < 5:
        return None
    return world


def _exposed_wall_mask(occ: np.ndarray) -> np.ndarray:
    """Wall cells 4-adjacent to at least one free cell."""
    free = occ == OCC_FREE
    near = np.zeros_like(free)
    near[1:, :] |= free[:-1, :]
    near[:-1, :] |= free[1:, :]
    near[:, 1:] |= free[:, :-1]
    near[:, :-1] |= free[:, 1:]
    return (occ == OCC_WALL) & near


def visible_classes(world: GridWorld) -> set[int]:
    """Classes on wall cells adjacent to free space (hence visible point-blank)."""
    mask = _exposed_wall_mask(world.occupancy)
    return set(int(c) for c in np.unique(world.surface_class[mask]))


def generate_world(seed: int, params: GenerationParams | None = None) -> GridWorld:
    """Generate a connected, closed grid world. Deterministic in (seed, params).

    Retries with derived sub-seeds on degenerate layouts; raises
    WorldGenerationError after params.max_retries failures.
    """
    params = params or GenerationParams()
    for attempt in range(params.max_retries):
        sub = int(np.random.SeedSequence((seed, attempt)).generate_state(1)[0])
        world = _generate_once(sub, params)
        if world is not None:
            # keep the caller-facing seed, not the retry sub-seed
            world.seed = seed
            return world
    raise WorldGenerationError(f"no valid world after {params.max_retries} attempts (seed={seed})")


def _segment_blocked(world: GridWorld, x0: float, y0: float, x1: float, y1: float) -> bool:
    dist = float(np.hypot(x1 - x0, y1 - y0))
    n = max(1, int(np.ceil(dist / COLLISION_SAMPLE)))
    for k in range(1, n + 1):
        t = k / n
        if not world.is_free_position(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t):
            return True
    return False


def step_pose(world: GridWorld, pose: Pose, action: MovementAction) -> tuple[Pose, bool]:
    """Apply a movement action. Returns (new pose, collision flag).

    Translations are cancelled entirely if the swept segment crosses a wall;
    rotations always succeed.
    """
    if action == MovementAction.ROTATE_LEFT:
        return replace(pose, heading=(pose.heading + ROTATE_DEG) % 360), False
    if action == MovementAction.ROTATE_RIGHT:
        return replace(pose, heading=(pose.heading - ROTATE_DEG) % 360), False

    if action == MovementAction.MOVE_FORWARD:
        dx, dy = pose.direction()
    elif action == MovementAction.MOVE_LEFT:
        dx, dy = pose.direction(90.0)
    elif action == MovementAction.MOVE_RIGHT:
        dx, dy = pose.direction(-90.0)
    else:
        raise ValueError(f"unknown movement action: {action}")

    nx = pose.x + dx * STEP_LENGTH
    ny = pose.y + dy * STEP_LENGTH
    if _segment_blocked(world, pose.x, pose.y, nx, ny):
        return pose, True
    return replace(pose, x=nx, y=ny), False


def distance_field(world: GridWorld, start_cell: tuple[int, int]) -> np.ndarray:
    """BFS geodesic distance (meters) from start_cell to every cell.

    Unreachable / wall cells hold +inf. 4-connectivity over free cells.
    """
    ix, iy = start_cell
    if world.is_wall_cell(ix, iy):
        raise ValueError(f"start cell {start_cell} is not free")
    free = world.occupancy == OCC_FREE
    dist = np.full(free.shape, np.inf)
    dist[iy, ix] = 0.0
    frontier = np.zeros(free.shape, dtype=bool)
    frontier[iy, ix] = True
    step = 0
    while frontier.any():
        step += 1
        grown = np.zeros_like(frontier)
        grown[1:, :] |= frontier[:-1, :]
        grown[:-1, :] |= frontier[1:, :]
        grown[:, 1:] |= frontier[:, :-1]
        grown[:, :-1] |= frontier[:, 1:]
        grown &= free & ~np.isfinite(dist)
        dist[grown] = step * world.cell_size
        frontier = grown
    return dist


def geodesic_distance(world: GridWorld, a: tuple[float, float], b: tuple[float, float]) -> float:
    """Shortest free-cell path length (meters) between positions a and b."""
    ca = world.cell_of(*a)
    cb = world.cell_of(*b)
    if world.is_wall_cell(*ca) or world.is_wall_cell(*cb):
        raise ValueError("geodesic_distance requires free positions")
    if ca == cb:
        return 0.0
    d = distance_field(world, ca)[cb[1], cb[0]]
    assert np.isfinite(d), "free cells must be connected"
    return float(d)


def bfs_path(passable: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]] | None:
    """Shortest 4-connected cell path over a boolean passability grid.

    Returns [start, ..., goal] or None if unreachable. Cells are (ix, iy).
    Among equally short paths the backtrack prefers to keep going straight,
    so the result has few direction changes (turns are expensive for an
    agent that must rotate in 15-degree increments).
    """
    H, W = passable.shape
    sx, sy = start
    gx, gy = goal
    if not (passable[sy, sx] and passable[gy, gx]):
        return None
    dist = np.full((H, W), -1, dtype=np.int32)
    dist[sy, sx] = 0
    q = deque([(sx, sy)])
    while q:
        x, y = q.popleft()
        if (x, y) == (gx, gy):
            break
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < W and 0 <= ny < H and passable[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                q.append((nx, ny))
    if dist[gy, gx] < 0:
        return None
    path = [(gx, gy)]
    last_step = (0, 0)
    while path[-1] != (sx, sy):
        x, y = path[-1]
        d = dist[y, x]
        step = None
        for dx, dy in (last_step,) + tuple(
                s for s in ((1, 0), (-1, 0), (0, 1), (0, -1)) if s != last_step):
            nx, ny = x + dx, y + dy
            if 0 <= nx < W and 0 <= ny < H and dist[ny, nx] == d - 1:
                step = (dx, dy)
                break
        path.append((x + step[0], y + step[1]))
        last_step = step
    path.reverse()
    return path


# ---------------------------------------------------------------------------
# world file format (versioned flat text, exact round trip)

_WORLD_MAGIC = "stripworld-grid"
_WORLD_VERSION = 1


def save_world(world: GridWorld, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"{_WORLD_MAGIC} v{_WORLD_VERSION}\n")
        f.write(f"seed={world.seed} cell_size={world.cell_size!r} K={world.class_count} "
                f"width={world.width} height={world.height} d_app={world.d_app}\n")
        for row in world.class_embeddings:
            f.write("emb " + " ".join(v.hex() for v in row) + "\n")
        f.write("tvec " + " ".join(v.hex() for v in world.texture_vec) + "\n")
        for iy in range(world.height):
            for ix in range(world.width):
                f.write(f"{world.occupancy[iy, ix]} {world.surface_class[iy, ix]} "
                        f"{float(world.texture_field[iy, ix]).hex()}\n")


def load_world(path: str) -> GridWorld:
    with open(path) as f:
        magic = f.readline().split()
        if magic[0] != _WORLD_MAGIC or magic[1] != f"v{_WORLD_VERSION}":
            raise ValueError(f"unrecognized world file header: {magic}")
        hdr = dict(kv.split("=") for kv in f.readline().split())
        K = int(hdr["K"])
        W, H = int(hdr["width"]), int(hdr["height"])
        d_app = int(hdr["d_app"])
        emb = np.array([[float.fromhex(v) for v in f.readline().split()[1:]] for _ in range(K)])
        tvec = np.array([float.fromhex(v) for v in f.readline().split()[1:]])
        occ = np.empty((H, W), dtype=np.uint8)
        sclass = np.empty((H, W), dtype=np.int16)
        texture = np.empty((H, W))
        for iy in range(H):
            for ix in range(W):
                o, c, t = f.readline().split()
                occ[iy, ix] = int(o)
                sclass[iy, ix] = int(c)
                texture[iy, ix] = float.fromhex(t)
    return GridWorld(
        seed=int(hdr["seed"]), cell_size=float(hdr["cell_size"]),
        width=W, height=H, occupancy=occ, surface_class=sclass,
        class_count=K, texture_field=texture, class_embeddings=emb, texture_vec=tvec,
    )
