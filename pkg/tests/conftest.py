import numpy as np
import pytest

from stripworld.world import GridWorld, OCC_FREE, OCC_WALL


def make_room_world(free_w=20, free_h=20, class_count=13, d_app=8, seed=99,
                    cell_size=0.25, patches=(), blocks=()):
    """Hand-built single-room world: free interior, 1-cell wall border.

    patches: (ix0, iy0, w, h, class_id) painted on wall cells.
    blocks: (ix0, iy0, w, h) wall rectangles dropped into the interior.
    """
    W, H = free_w + 2, free_h + 2
    occ = np.zeros((H, W), dtype=np.uint8)
    occ[0, :] = occ[-1, :] = OCC_WALL
    occ[:, 0] = occ[:, -1] = OCC_WALL
    for (x0, y0, w, h) in blocks:
        occ[y0:y0 + h, x0:x0 + w] = OCC_WALL
    sclass = np.where(occ == OCC_WALL, 0, -1).astype(np.int16)
    for (x0, y0, w, h, c) in patches:
        region = occ[y0:y0 + h, x0:x0 + w] == OCC_WALL
        sclass[y0:y0 + h, x0:x0 + w][region] = c
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(class_count, d_app))
    tvec = rng.normal(size=d_app)
    tvec /= np.linalg.norm(tvec)
    return GridWorld(seed=seed, cell_size=cell_size, width=W, height=H,
                     occupancy=occ, surface_class=sclass, class_count=class_count,
                     texture_field=rng.random((H, W)), class_embeddings=emb,
                     texture_vec=tvec)


@pytest.fixture
def room_world():
    return make_room_world()


@pytest.fixture
def default_world():
    from stripworld.world import generate_world
    return generate_world(7)
