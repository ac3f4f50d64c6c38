"""Random render scenes kept clear of every compositing discontinuity.

Finite differences only match analytic gradients where the loss is smooth,
so scenes are rejection-sampled in two stages.  Cheap static margins first:
every splat must sit away from the near plane, the eigenvalue floor, the
Mahalanobis cutoff at each pixel center, the weight clamp, the probability
clamp, and any depth-sort tie.  Static margins cannot track how fast pixel
powers move per parameter (the projection Jacobian grows with resolution and
shrinking face depth), so survivors then face the authoritative gate: every
geometry parameter is probed by +-eps and all discrete rasterization
indicators (validity, floor activation, bounding boxes, cutoff gates) must
be invariant, which is exactly what central differences at that eps need.
"""

import dataclasses

import numpy as np

from panosplat.cubemap_render import (
    RenderConfig,
    _bbox,
    _floor_eigenvalues,
    faces_to_onehot,
    project_face,
    render_cubemap,
)
from panosplat.gaussian_core import GaussianSet
from panosplat.pano_geometry import FACE_BASES, FACE_ORDER, ErpGrid

FD_EPS = 1e-4  # central-difference step the probes must survive
DEPTH_MARGIN = 1e-2  # vs the near plane and pairwise depth ties
EIG_MARGIN = 2e-2  # px^2 vs the eigenvalue floor
POWER_MARGIN = 1e-3  # vs the Mahalanobis cutoff at pixel centers
PROB_MARGIN = 3.0  # probs stay outside [eps/PM, eps*PM]


def _margins_ok(gs: GaussianSet, config: RenderConfig) -> bool:
    cutoff = config.power_cutoff
    for face in FACE_ORDER:
        proj = project_face(gs, face, config)
        fw = np.asarray(FACE_BASES[face][0], dtype=np.float64)
        depth_all = gs.centers @ fw
        if np.any(np.abs(depth_all - config.near_plane) < DEPTH_MARGIN):
            return False
        if proj.index.size == 0:
            continue
        _, lo, hi = _floor_eigenvalues(proj.cov2_raw, config.eig_floor)
        if np.any(np.abs(lo - config.eig_floor) < EIG_MARGIN):
            return False
        if np.any(np.abs(hi - config.eig_floor) < EIG_MARGIN):
            return False
        if np.any(gs.opacity[proj.index] > config.weight_clamp - 1e-3):
            return False
        res = config.resolution
        for s in range(proj.index.size):
            cx, cy = proj.mean2d[s]
            rad = proj.radius_px[s]
            x0 = max(0, int(np.floor(cx - rad)))
            x1 = min(res - 1, int(np.ceil(cx + rad)))
            y0 = max(0, int(np.floor(cy - rad)))
            y1 = min(res - 1, int(np.ceil(cy + rad)))
            if x0 > x1 or y0 > y1:
                continue
            dx = np.arange(x0, x1 + 1) + 0.5 - cx
            dy = np.arange(y0, y1 + 1) + 0.5 - cy
            c00, c01, c11 = proj.conic[s]
            power = 0.5 * (
                c00 * np.square(dx)[None, :]
                + 2.0 * c01 * dy[:, None] * dx[None, :]
                + c11 * np.square(dy)[:, None]
            )
            if np.any(np.abs(power - cutoff) < POWER_MARGIN):
                return False
    # pairwise per-axis separation keeps the depth sort stable on all faces
    for axis in range(3):
        c = np.sort(gs.centers[:, axis])
        if c.size > 1 and np.min(np.diff(c)) < DEPTH_MARGIN:
            return False
    probs = render_cubemap(gs, config).probs
    eps = config.prob_eps
    near_clamp = (probs > eps / PROB_MARGIN) & (probs < eps * PROB_MARGIN)
    return not np.any(near_clamp)


def _raster_indicators(gs: GaussianSet, config: RenderConfig) -> bytes:
    """Every discrete choice the rasterizer makes, as one comparable blob.

    Splats whose clipped bounding box is empty contribute no pixels, so their
    floor activation is irrelevant and deliberately left out of the blob.
    """
    cutoff = config.power_cutoff
    res = config.resolution
    parts = []
    for face in FACE_ORDER:
        proj = project_face(gs, face, config)
        parts.append(proj.valid.tobytes())
        _, lo, hi = _floor_eigenvalues(proj.cov2_raw, config.eig_floor)
        for s in range(proj.index.size):
            cx, cy = proj.mean2d[s]
            x0, x1, y0, y1 = _bbox(cx, cy, proj.radius_px[s], res)
            if x0 > x1 or y0 > y1:
                parts.append(b"off")
                continue
            parts.append(np.array([x0, x1, y0, y1]).tobytes())
            parts.append(np.array([lo[s] < config.eig_floor,
                                   hi[s] < config.eig_floor]).tobytes())
            dx = np.arange(x0, x1 + 1) + 0.5 - cx
            dy = np.arange(y0, y1 + 1) + 0.5 - cy
            c00, c01, c11 = proj.conic[s]
            power = 0.5 * (
                c00 * np.square(dx)[None, :]
                + 2.0 * c01 * dy[:, None] * dx[None, :]
                + c11 * np.square(dy)[:, None]
            )
            parts.append((power <= cutoff).tobytes())
    return b"".join(parts)


def _probes_clean(gs: GaussianSet, config: RenderConfig, eps: float = FD_EPS) -> bool:
    """True when no +-eps geometry probe flips any rasterization indicator."""
    base = _raster_indicators(gs, config)
    p0 = pack_params(gs)
    for i in range(9 * len(gs)):  # centers, radii, euler; opacity moves no gate
        for sign in (eps, -eps):
            p = p0.copy()
            p[i] += sign
            if _raster_indicators(unpack_params(gs, p), config) != base:
                return False
    return True


def make_margin_scene(seed: int, n: int = 6, k: int = 4, res: int = 12):
    """First margin-clean random scene at or after `seed`.

    Returns (gaussians, one-hot target, config, seed actually used).
    """
    config = RenderConfig(resolution=res)
    for attempt in range(seed, seed + 1000):
        rng = np.random.default_rng(attempt)
        direc = rng.normal(size=(n, 3))
        direc /= np.linalg.norm(direc, axis=1, keepdims=True)
        centers = direc * rng.uniform(1.5, 2.5, size=(n, 1))
        cat = rng.uniform(0.2, 1.0, size=(n, k))
        cat /= cat.sum(axis=1, keepdims=True)
        gs = GaussianSet(
            centers=centers,
            radii=rng.uniform(0.2, 0.45, size=(n, 3)),
            euler=rng.uniform(-np.pi, np.pi, size=(n, 3)),
            opacity=rng.uniform(0.3, 0.85, size=n),
            category=cat,
            features=np.zeros((n, 4)),
            grid=ErpGrid(16, 32),
            stride=4,
            r_max=0.5,
        )
        if not _margins_ok(gs, config) or not _probes_clean(gs, config):
            continue
        labels = rng.integers(0, k, size=(6, res, res))
        return gs, faces_to_onehot(labels, k), config, attempt
    raise RuntimeError(f"no margin-clean scene found from seed {seed}")


def make_descent_scene():
    """Three-splat scene plus a coverage-masked target for descent sanity.

    Empty pixels get an all-zero label row rather than a positive class:
    under the probability clamp those pixels are gradient-dead, so a positive
    label there would only add an irreducible constant to the loss and mask
    the real progress of the centers.
    """
    centers = np.array(
        [[0.0, 1.5, 0.0], [1.6, 0.1, 0.2], [0.1, -0.2, 1.7]]
    )
    offsets = np.array(
        [[0.12, 0.0, 0.09], [0.0, 0.11, -0.08], [-0.1, 0.09, 0.0]]
    )
    cat = np.full((3, 2), 0.1)
    cat[np.arange(3), [1, 0, 1]] = 0.9
    gs = GaussianSet(
        centers=centers,
        radii=np.full((3, 3), 0.45),
        euler=np.zeros((3, 3)),
        opacity=np.full(3, 0.95),
        category=cat,
        features=np.zeros((3, 4)),
        grid=ErpGrid(16, 32),
        stride=4,
        r_max=0.5,
    )
    config = RenderConfig(resolution=8)
    cm = render_cubemap(gs, config)
    labels = np.argmax(cm.probs, axis=3)
    target = np.identity(2)[labels] * (cm.alpha > 0)[..., None]
    return gs, offsets, target, config


def pack_params(gs: GaussianSet) -> np.ndarray:
    return np.concatenate(
        [gs.centers.ravel(), gs.radii.ravel(), gs.euler.ravel(), gs.opacity]
    )


def unpack_params(gs: GaussianSet, p: np.ndarray) -> GaussianSet:
    n = len(gs)
    return dataclasses.replace(
        gs,
        centers=p[: 3 * n].reshape(n, 3).copy(),
        radii=p[3 * n : 6 * n].reshape(n, 3).copy(),
        euler=p[6 * n : 9 * n].reshape(n, 3).copy(),
        opacity=p[9 * n :].copy(),
    )
