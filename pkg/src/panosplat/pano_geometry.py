"""Equirectangular pixel <-> 3D direction math and cube-map face geometry.

Pixel convention: ``u`` is the continuous row coordinate in [0, H], ``v``
the continuous column coordinate in [0, W]; discrete pixel (r, c) samples at
(r + 0.5, c + 0.5).  A pixel maps to latitude/longitude angles

    theta = (u / H - 0.5) * pi        eta = (1 - v / W) * 2 * pi

and, with range d, to the camera-centric point

    x = d * sin(eta)
    y = d * cos(theta) * cos(eta)
    z = d * cos(eta) * sin(theta)

This mapping is range-preserving (sin^2 + cos^2 collapses twice, so
||(x, y, z)|| == d for every pixel).  Its poles sit at cos(eta) == 0, where
whole pixel columns collapse onto (+-1, 0, 0); the inverse resolves that
degeneracy with the fixed tie-break theta := 0.

Cube faces look along the six signed axes with front = +y.  Every face is a
90-degree pinhole camera, focal length res/2, principal point at the face
center.
"""

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi

FACE_ORDER = ("front", "back", "right", "left", "up", "down")

# face -> (forward, right, image-down) unit vectors.  The equatorial faces
# keep world +z as image-up; up/down continue the front face over its top
# and bottom edges, which makes all shared cube edges seamless.
FACE_BASES = {
    "front": ((0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, -1.0)),
    "back": ((0.0, -1.0, 0.0), (-1.0, 0.0, 0.0), (0.0, 0.0, -1.0)),
    "right": ((1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, -1.0)),
    "left": ((-1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, -1.0)),
    "up": ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
    "down": ((0.0, 0.0, -1.0), (1.0, 0.0, 0.0), (0.0, -1.0, 0.0)),
}

_POLE_EPS = 1e-12  # |cos(eta)| below this counts as the degenerate column


class GeometryError(ValueError):
    pass


class EmptySceneError(GeometryError):
    """No valid depth sample survived filtering."""


@dataclass(frozen=True)
class ErpGrid:
    """Equirectangular grid extent (rows, columns)."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise GeometryError(f"grid must be at least 2x2, got {self}")


def unproject_pixel(u, v, d, grid: ErpGrid) -> np.ndarray:
    """Map a continuous ERP pixel and range to a 3D point.

    Accepts scalars or broadcastable arrays; returns shape (..., 3).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("range d must be positive")
    theta = (u / grid.height - 0.5) * np.pi
    eta = (1.0 - v / grid.width) * TWO_PI
    cos_eta = np.cos(eta)
    out = np.stack(
        [
            d * np.sin(eta),
            d * np.cos(theta) * cos_eta,
            d * cos_eta * np.sin(theta),
        ],
        axis=-1,
    )
    return out


def direction_to_erp(direction, grid: ErpGrid):
    """Invert :func:`unproject_pixel` for unit directions.

    Returns continuous (u, v) with u in [0, H] and v wrapped into [0, W).
    At the parameterization poles (direction = (+-1, 0, 0)) the row is
    ambiguous and fixed to u = H/2 (theta = 0).
    """
    dirs = np.asarray(direction, dtype=np.float64)
    single = dirs.ndim == 1
    dirs = np.atleast_2d(dirs)
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise GeometryError("direction must be unit length within 1e-6")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]

    rho = np.hypot(y, z)  # equals |cos(eta)|
    pole = rho < _POLE_EPS
    # theta in [-pi/2, pi/2] has cos(theta) >= 0, so sign(y) is sign(cos eta).
    sgn = np.where(y >= 0, 1.0, -1.0)
    safe_y = np.where(pole, 1.0, y * sgn)
    safe_z = np.where(pole, 0.0, z * sgn)
    theta = np.where(pole, 0.0, np.arctan2(safe_z, safe_y))
    cos_eta = np.where(pole, 0.0, rho * sgn)
    eta = np.arctan2(x, cos_eta)
    eta = np.where(eta < 0, eta + TWO_PI, eta)

    u = (theta / np.pi + 0.5) * grid.height
    v = np.mod((1.0 - eta / TWO_PI) * grid.width, grid.width)
    if single:
        return float(u[0]), float(v[0])
    return u, v


def unproject_depth_map(depth: np.ndarray, stride: int):
    """Lift an ERP depth map to 3D points at strided pixel centers.

    Returns (points [N, 3], pixel_rc [N, 2]) where pixel_rc holds the
    source (row, col) indices.  Pixels with depth <= 0 are skipped; if none
    survive, raises :class:`EmptySceneError`.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise GeometryError(f"depth must be 2D, got shape {depth.shape}")
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    h, w = depth.shape
    grid = ErpGrid(h, w)
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    sub = depth[np.ix_(rows, cols)]
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    valid = sub > 0
    if not np.any(valid):
        raise EmptySceneError("depth map has no positive samples at this stride")
    u = rr[valid] + 0.5
    v = cc[valid] + 0.5
    d = sub[valid]
    points = unproject_pixel(u, v, d, grid)
    pixel_rc = np.stack([rr[valid], cc[valid]], axis=-1).astype(np.int64)
    return points, pixel_rc


def face_ray(face: str, px, py, res: int) -> np.ndarray:
    """Unit ray through face pixel center (px + 0.5, py + 0.5).

    ``px`` is the column (image right), ``py`` the row (image down);
    both may be floats.  Broadcasts; returns shape (..., 3).
    """
    if face not in FACE_BASES:
        raise GeometryError(f"unknown face {face!r}")
    if res < 1:
        raise GeometryError("resolution must be >= 1")
    fw, rt, dn = (np.asarray(b, dtype=np.float64) for b in FACE_BASES[face])
    half = res / 2.0  # focal length and principal point
    a = (np.asarray(px, dtype=np.float64) + 0.5 - half) / half
    b = (np.asarray(py, dtype=np.float64) + 0.5 - half) / half
    d = fw + a[..., None] * rt + b[..., None] * dn
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def face_center_direction(face: str) -> np.ndarray:
    """Forward axis of a face (the ray through the exact face center)."""
    return np.asarray(FACE_BASES[face][0], dtype=np.float64)


def panorama_to_cubemap(mask: np.ndarray, res: int) -> np.ndarray:
    """Resample an ERP label map onto the six cube faces (nearest neighbor).

    Returns uint8 labels of shape (6, res, res) in FACE_ORDER.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise GeometryError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    grid = ErpGrid(h, w)
    out = np.empty((len(FACE_ORDER), res, res), dtype=np.uint8)
    pys, pxs = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    for fi, face in enumerate(FACE_ORDER):
        rays = face_ray(face, pxs.ravel(), pys.ravel(), res)
        u, v = direction_to_erp(rays, grid)
        r = np.clip(np.floor(u).astype(np.int64), 0, h - 1)
        c = np.floor(v).astype(np.int64) % w
        out[fi] = mask[r, c].reshape(res, res).astype(np.uint8)
    return out
