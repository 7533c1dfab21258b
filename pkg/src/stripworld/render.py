"""First-person view synthesis and exact inter-view pixel correspondence.

Views are 1D strips: W rays cast across a 90 degree field of view. Pixel 0
is the leftmost ray (heading + FOV/2). Correspondence between two views is
computed from the world-space ray hit points with a forward-backward
consistency check, playing the role optical flow plays for 2D imagery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import GridWorld, Pose

VIEW_WIDTH = 64
FOV_DEG = 90.0
NOISE_SIGMA = 0.1
DELTA_MATCH = 0.125  # meters; half a cell
NONE_PIXEL = -1


@dataclass
class View:
    width: int
    features: np.ndarray    # (W, d_app)
    gt_class: np.ndarray    # (W,) int
    depth: np.ndarray       # (W,) meters, > 0
    hit_points: np.ndarray  # (W, 2) world coords
    hit_cells: np.ndarray | None = None  # (W, 2) grid cell each ray ended in


def _ray_angles(pose: Pose, width: int, fov_deg: float) -> np.ndarray:
    offsets = fov_deg / 2.0 - (np.arange(width) + 0.5) * fov_deg / width
    return np.deg2rad(pose.heading + offsets)


def _cast_rays(world: GridWorld, x: float, y: float, angles: np.ndarray):
    """DDA grid traversal for a batch of rays from a common origin.

    Returns (t_hit, cell_ix, cell_iy) per ray. The closed boundary
    guarantees every ray terminates.
    """
    n = len(angles)
    cs = world.cell_size
    dirx = np.cos(angles)
    diry = np.sin(angles)

    ix = np.full(n, int(x // cs), dtype=np.int64)
    iy = np.full(n, int(y // cs), dtype=np.int64)
    step_x = np.where(dirx >= 0, 1, -1)
    step_y = np.where(diry >= 0, 1, -1)
    with np.errstate(divide="ignore"):
        t_dx = np.abs(cs / dirx)
        t_dy = np.abs(cs / diry)
        t_max_x = np.where(dirx >= 0, (ix + 1) * cs - x, x - ix * cs) / np.abs(dirx)
        t_max_y = np.where(diry >= 0, (iy + 1) * cs - y, y - iy * cs) / np.abs(diry)
    t_max_x = np.where(np.isfinite(t_max_x), t_max_x, np.inf)
    t_max_y = np.where(np.isfinite(t_max_y), t_max_y, np.inf)

    t_hit = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    wall = world.occupancy == 1
    max_iter = 4 * (world.width + world.height)
    for _ in range(max_iter):
        act = ~hit
        if not act.any():
            break
        use_x = act & (t_max_x <= t_max_y)
        use_y = act & ~use_x
        t_hit[use_x] = t_max_x[use_x]
        t_hit[use_y] = t_max_y[use_y]
        ix[use_x] += step_x[use_x]
        t_max_x[use_x] += t_dx[use_x]
        iy[use_y] += step_y[use_y]
        t_max_y[use_y] += t_dy[use_y]
        np.clip(ix, 0, world.width - 1, out=ix)
        np.clip(iy, 0, world.height - 1, out=iy)
        hit[act] = wall[iy[act], ix[act]]
    assert hit.all(), "ray escaped a closed world"
    return t_hit, ix, iy


def _noise_rng(world: GridWorld, pose: Pose) -> np.random.Generator:
    # quantize to nanometers: replayed float poses hash identically
    key = (world.seed, int(round(pose.x * 1e9)), int(round(pose.y * 1e9)), pose.heading)
    return np.random.default_rng(np.random.SeedSequence(key))


def render_view(world: GridWorld, pose: Pose, width: int = VIEW_WIDTH,
                fov_deg: float = FOV_DEG, noise_sigma: float = NOISE_SIGMA) -> View:
    """Raycast a first-person strip view. Pure given (world, pose).

    Per-pixel appearance is the hit surface's class embedding plus its cell
    texture along a per-world direction, plus deterministic Gaussian noise
    (row i of the noise block depends only on (world, pose, i)).
    """
    if not world.is_free_position(pose.x, pose.y):
        raise ValueError("pose must lie in a free cell")
    angles = _ray_angles(pose, width, fov_deg)
    t_hit, ix, iy = _cast_rays(world, pose.x, pose.y, angles)
    hx = pose.x + np.cos(angles) * t_hit
    hy = pose.y + np.sin(angles) * t_hit
    gt = world.surface_class[iy, ix].astype(np.int64)
    feat = world.class_embeddings[gt] + world.texture_field[iy, ix][:, None] * world.texture_vec
    if noise_sigma > 0:
        feat = feat + noise_sigma * _noise_rng(world, pose).normal(size=feat.shape)
    return View(width=width, features=feat, gt_class=gt,
                depth=t_hit, hit_points=np.stack([hx, hy], axis=1),
                hit_cells=np.stack([ix, iy], axis=1))


def correspondence(view_src: View, view_dst: View,
                   delta_match: float = DELTA_MATCH) -> np.ndarray:
    """Map each destination pixel to its source pixel, or NONE_PIXEL.

    Pixel j maps to the source pixel i whose hit point is nearest, accepted
    only within delta_match and if the reverse nearest match from i lands
    back within one pixel of j. When both views carry the raycaster's hit
    cells, the matched rays must also have ended in the same grid cell:
    hit points sit exactly on cell faces, so the distance test alone lets a
    match slip across a surface boundary.
    """
    diff = view_src.hit_points[:, None, :] - view_dst.hit_points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    fwd = np.argmin(d2, axis=0)              # per dst pixel j -> src i
    rev = np.argmin(d2, axis=1)              # per src pixel i -> dst j
    j = np.arange(view_dst.width)
    ok = (d2[fwd, j] < delta_match ** 2) & (np.abs(rev[fwd] - j) <= 1)
    if view_src.hit_cells is not None and view_dst.hit_cells is not None:
        ok &= (view_src.hit_cells[fwd] == view_dst.hit_cells).all(axis=1)
    return np.where(ok, fwd, NONE_PIXEL).astype(np.int64)


def view_to_csv(view: View, path: str) -> None:
    """Debug dump: one row per pixel (pixel, class, depth)."""
    with open(path, "w") as f:
        f.write("pixel,class,depth\n")
        for i in range(view.width):
            f.write(f"{i},{view.gt_class[i]},{view.depth[i]!r}\n")
