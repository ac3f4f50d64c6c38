"""Synthetic panoramic room scenes for self-contained demos.

A scene is an axis-aligned box room viewed from the origin with one to
three yaw-rotated cuboid objects standing on the floor.  Depth is the exact
analytic ray distance per ERP pixel, the semantic mask labels each pixel
with the id of nearest hit (objects keep their category, walls get the
background class K-1), and the box annotations are exact.  Everything is a
pure function of the seed.
"""

import dataclasses
import math

import numpy as np

from .pano_geometry import ErpGrid, unproject_depth_map
from .tensorio import BoxAnnotation

MIN_OBJECT_DISTANCE = 1.4  # meters from the camera, keeps boxes around it


@dataclasses.dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    height: int = 64
    width: int = 128
    num_categories: int = 12

    def __post_init__(self):
        if self.height < 8 or self.width < 16:
            raise ValueError(f"scene grid too small: {self.height}x{self.width}")
        if self.num_categories < 2:
            raise ValueError("need at least 2 categories")


@dataclasses.dataclass(frozen=True)
class SynthScene:
    depth: np.ndarray  # [H, W] float64, meters
    mask: np.ndarray  # [H, W] uint8 category ids
    boxes: list
    room_lo: np.ndarray
    room_hi: np.ndarray


def ray_room_exit(dirs: np.ndarray, lo, hi) -> np.ndarray:
    """Distance from the origin (inside the room) to the room walls."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    t = np.full(dirs.shape[0], np.inf)
    for axis in range(3):
        d = dirs[:, axis]
        bound = np.where(d > 0, hi[axis], lo[axis])
        with np.errstate(divide="ignore"):
            ta = np.where(d != 0, bound / d, np.inf)
        t = np.minimum(t, ta)
    return t


def ray_box_entry(dirs: np.ndarray, center, size, yaw: float) -> np.ndarray:
    """Distance from the origin to a yawed cuboid, inf where the ray misses."""
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) / 2.0
    c, s = math.cos(yaw), math.sin(yaw)
    # ray in the box frame: rotate by -yaw about z after translating
    ox = -(c * center[0] + s * center[1])
    oy = -(-s * center[0] + c * center[1])
    oz = -center[2]
    dx = c * dirs[:, 0] + s * dirs[:, 1]
    dy = -s * dirs[:, 0] + c * dirs[:, 1]
    dz = dirs[:, 2]
    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    hit = np.ones(dirs.shape[0], dtype=bool)
    for o, d, h in ((ox, dx, half[0]), (oy, dy, half[1]), (oz, dz, half[2])):
        parallel = d == 0
        hit &= ~parallel | (np.abs(o) <= h)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        lo_t = np.where(parallel, -np.inf, np.minimum(t1, t2))
        hi_t = np.where(parallel, np.inf, np.maximum(t1, t2))
        t_near = np.maximum(t_near, lo_t)
        t_far = np.minimum(t_far, hi_t)
    hit &= (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _place_objects(rng, room_lo, room_hi, num_categories):
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        size = rng.uniform([0.4, 0.4, 0.4], [1.0, 1.0, 1.0])
        yaw = float(rng.uniform(-math.pi, math.pi))
        margin = float(np.hypot(size[0], size[1]) / 2.0)
        while True:
            cx = float(rng.uniform(room_lo[0] + margin, room_hi[0] - margin))
            cy = float(rng.uniform(room_lo[1] + margin, room_hi[1] - margin))
            if math.hypot(cx, cy) >= MIN_OBJECT_DISTANCE:
                break
        cz = float(room_lo[2] + size[2] / 2.0)
        cat = int(rng.integers(0, num_categories - 1))
        boxes.append(BoxAnnotation(cat, (cx, cy, cz), tuple(size), yaw))
    return boxes


def generate_scene(params: SynthParams = SynthParams()) -> SynthScene:
    rng = np.random.default_rng(params.seed)
    room_lo = np.array(
        [rng.uniform(-2.6, -2.0), rng.uniform(-3.0, -2.2), rng.uniform(-1.4, -1.1)]
    )
    room_hi = np.array(
        [rng.uniform(2.0, 2.6), rng.uniform(2.2, 3.0), rng.uniform(1.0, 1.5)]
    )
    boxes = _place_objects(rng, room_lo, room_hi, params.num_categories)

    grid = ErpGrid(params.height, params.width)
    dirs, pixel_rc = unproject_depth_map(np.ones((grid.height, grid.width)), 1)
    depth_flat = ray_room_exit(dirs, room_lo, room_hi)
    label_flat = np.full(len(dirs), params.num_categories - 1, dtype=np.uint8)
    for b in boxes:
        t = ray_box_entry(dirs, b.center, b.size, b.yaw)
        closer = t < depth_flat
        depth_flat = np.where(closer, t, depth_flat)
        label_flat[closer] = b.category_id

    depth = np.zeros((grid.height, grid.width))
    mask = np.zeros((grid.height, grid.width), dtype=np.uint8)
    depth[pixel_rc[:, 0], pixel_rc[:, 1]] = depth_flat
    mask[pixel_rc[:, 0], pixel_rc[:, 1]] = label_flat
    return SynthScene(depth=depth, mask=mask, boxes=boxes, room_lo=room_lo, room_hi=room_hi)
