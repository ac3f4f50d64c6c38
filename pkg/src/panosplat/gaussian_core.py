"""Semantic 3D Gaussian scene representation and depth-map lifting.

A scene is a struct-of-arrays :class:`GaussianSet`: each Gaussian has a 3D
center, per-axis radii, intrinsic Z*Y*X Euler angles, an opacity, a category
distribution over K classes (background included), and a feature vector.
Its covariance is R * diag(radii)^2 * R^T.
"""

import dataclasses
import math

import numpy as np

from . import tensorio
from .nn_kernels import WeightSet, mlp_forward, sigmoid, softmax
from .pano_geometry import EmptySceneError, ErpGrid, GeometryError, unproject_depth_map

RADII_FLOOR = 1e-4  # meters; lower clamp applied by covariance refinement

_META_ENTRY = "meta"
_ARRAY_ENTRIES = ("centers", "radii", "euler", "opacity", "category", "features")


class GaussianValidationError(ValueError):
    pass


class WeightSetMismatch(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class LiftParams:
    """Configuration of depth-to-Gaussian lifting."""

    r_max: float = 0.5  # meters; upper bound of lifted radii
    stride: int = 4
    num_categories: int = 12
    feature_dim: int = 32

    def __post_init__(self):
        if self.r_max <= 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.num_categories < 2:
            raise ValueError("need at least 2 categories (foreground + background)")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


@dataclasses.dataclass(frozen=True)
class SemanticGaussian:
    """Read-only view of a single Gaussian."""

    center: np.ndarray
    radii: np.ndarray
    euler: np.ndarray
    opacity: float
    category: np.ndarray
    feature: np.ndarray


@dataclasses.dataclass
class GaussianSet:
    """Struct-of-arrays Gaussian scene plus the ERP grid it was lifted from."""

    centers: np.ndarray  # [N, 3]
    radii: np.ndarray  # [N, 3]
    euler: np.ndarray  # [N, 3]
    opacity: np.ndarray  # [N]
    category: np.ndarray  # [N, K]
    features: np.ndarray  # [N, F]
    grid: ErpGrid
    stride: int
    r_max: float

    def __len__(self):
        return self.centers.shape[0]

    @property
    def num_categories(self):
        return self.category.shape[1]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def gaussian(self, i: int) -> SemanticGaussian:
        return SemanticGaussian(
            center=self.centers[i].copy(),
            radii=self.radii[i].copy(),
            euler=self.euler[i].copy(),
            opacity=float(self.opacity[i]),
            category=self.category[i].copy(),
            feature=self.features[i].copy(),
        )

    def select(self, index) -> "GaussianSet":
        """Subset along the Gaussian axis (mask or index array)."""
        return dataclasses.replace(
            self,
            centers=self.centers[index].copy(),
            radii=self.radii[index].copy(),
            euler=self.euler[index].copy(),
            opacity=self.opacity[index].copy(),
            category=self.category[index].copy(),
            features=self.features[index].copy(),
        )

    def copy(self) -> "GaussianSet":
        return self.select(slice(None))

    def validate(self) -> None:
        n = len(self)
        shapes = {
            "centers": (n, 3),
            "radii": (n, 3),
            "euler": (n, 3),
            "opacity": (n,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise GaussianValidationError(f"{name} has shape {arr.shape}, want {want}")
        if self.category.ndim != 2 or self.category.shape[0] != n:
            raise GaussianValidationError("category must be [N, K]")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GaussianValidationError("features must be [N, F]")
        for name in _ARRAY_ENTRIES:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise GaussianValidationError(f"{name} contains non-finite values")
        if n == 0:
            return
        if np.any(self.radii <= 0) or np.any(self.radii > self.r_max):
            raise GaussianValidationError(f"radii must lie in (0, {self.r_max}]")
        if np.any(np.abs(self.euler) > np.pi):
            raise GaussianValidationError("euler angles must lie in [-pi, pi]")
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise GaussianValidationError("opacity must lie in [0, 1]")
        if np.any(self.category < 0):
            raise GaussianValidationError("category weights must be non-negative")
        sums = self.category.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise GaussianValidationError("category rows must sum to 1 within 1e-6")


def rotation_from_euler(euler) -> np.ndarray:
    """Rotation matrix for intrinsic Z*Y*X Euler angles (x, y, z order).

    Accepts [3] or [N, 3]; returns [3, 3] or [N, 3, 3].
    """
    e = np.asarray(euler, dtype=np.float64)
    single = e.ndim == 1
    e2 = np.atleast_2d(e)
    cx, cy, cz = np.cos(e2[:, 0]), np.cos(e2[:, 1]), np.cos(e2[:, 2])
    sx, sy, sz = np.sin(e2[:, 0]), np.sin(e2[:, 1]), np.sin(e2[:, 2])
    r = np.empty((e2.shape[0], 3, 3))
    r[:, 0, 0] = cz * cy
    r[:, 0, 1] = cz * sy * sx - sz * cx
    r[:, 0, 2] = cz * sy * cx + sz * sx
    r[:, 1, 0] = sz * cy
    r[:, 1, 1] = sz * sy * sx + cz * cx
    r[:, 1, 2] = sz * sy * cx - cz * sx
    r[:, 2, 0] = -sy
    r[:, 2, 1] = cy * sx
    r[:, 2, 2] = cy * cx
    return r[0] if single else r


def covariance_from(radii, euler) -> np.ndarray:
    """Covariance R S S^T R^T built as (R S)(R S)^T, hence exactly symmetric.

    Accepts [3]/[N, 3]; returns [3, 3]/[N, 3, 3].  Eigenvalues are the
    squared radii by construction.
    """
    radii = np.asarray(radii, dtype=np.float64)
    single = radii.ndim == 1
    r2 = np.atleast_2d(radii)
    rot = rotation_from_euler(np.atleast_2d(np.asarray(euler, dtype=np.float64)))
    m = rot * r2[:, None, :]  # columns scaled: R @ diag(radii)
    cov = m @ m.transpose(0, 2, 1)
    return cov[0] if single else cov


def covariance_of(g: SemanticGaussian) -> np.ndarray:
    return covariance_from(g.radii, g.euler)


def stub_features(depth: np.ndarray, feature_dim: int) -> np.ndarray:
    """Deterministic per-pixel features: positional encoding of (u, v, d).

    Channel c encodes input t = (c//2) mod 3 of (u/H, v/W, d/(1+d)) at
    frequency 2^(c//6), alternating sine/cosine phases.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    rows = (np.arange(h) + 0.5) / h
    cols = (np.arange(w) + 0.5) / w
    u = np.broadcast_to(rows[:, None], (h, w))
    v = np.broadcast_to(cols[None, :], (h, w))
    d = depth / (1.0 + np.abs(depth))
    signals = np.stack([u, v, d], axis=-1)
    out = np.empty((h, w, feature_dim))
    for c in range(feature_dim):
        t = (c // 2) % 3
        freq = 2.0 ** (c // 6)
        phase = (c % 2) * (np.pi / 2.0)
        out[..., c] = np.sin(freq * np.pi * signals[..., t] + phase)
    return out


def lift(
    depth: np.ndarray,
    features: np.ndarray,
    weights: WeightSet,
    params: LiftParams = LiftParams(),
) -> GaussianSet:
    """Lift an ERP depth map to one Gaussian per strided valid pixel.

    Radii are sigmoid-squashed into (0, r_max), Euler angles into (-pi, pi),
    opacity into (0, 1); the category distribution is a softmax.  Features
    are copied from the source pixel.
    """
    depth = np.asarray(depth, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[:2] != depth.shape:
        raise GeometryError(
            f"features must be [H, W, F] aligned with depth, got {features.shape}"
        )
    points, pixel_rc = unproject_depth_map(depth, params.stride)
    feats = features[pixel_rc[:, 0], pixel_rc[:, 1]]
    if feats.shape[1] != params.feature_dim:
        raise GeometryError(
            f"features have dim {feats.shape[1]}, params declare {params.feature_dim}"
        )

    radii = sigmoid(mlp_forward(weights, "lift_scale", feats)) * params.r_max
    euler = (sigmoid(mlp_forward(weights, "lift_rot", feats)) - 0.5) * (2.0 * np.pi)
    opacity = sigmoid(mlp_forward(weights, "lift_opacity", feats))[:, 0]
    category = softmax(mlp_forward(weights, "lift_category", feats))
    if category.shape[1] != params.num_categories:
        raise WeightSetMismatch(
            f"lift_category produces {category.shape[1]} classes, "
            f"params declare {params.num_categories}"
        )

    h, w = depth.shape
    gs = GaussianSet(
        centers=points,
        radii=radii,
        euler=euler,
        opacity=opacity,
        category=category,
        features=feats,
        grid=ErpGrid(h, w),
        stride=params.stride,
        r_max=params.r_max,
    )
    gs.validate()
    return gs


def save_gaussians(path, gs: GaussianSet, extra_entries=None) -> None:
    """Serialize a GaussianSet archive.

    The ``meta`` entry holds [H, W, stride, K, F, r_max]; r_max rides along
    because covariance refinement clamps against it.
    """
    entries = {name: getattr(gs, name) for name in _ARRAY_ENTRIES}
    entries[_META_ENTRY] = np.array(
        [
            gs.grid.height,
            gs.grid.width,
            gs.stride,
            gs.num_categories,
            gs.feature_dim,
            gs.r_max,
        ],
        dtype=np.float64,
    )
    if extra_entries:
        entries.update(extra_entries)
    tensorio.write_archive(path, entries)


def load_gaussians(path) -> GaussianSet:
    raw = tensorio.read_archive(path)
    missing = [n for n in (*_ARRAY_ENTRIES, _META_ENTRY) if n not in raw]
    if missing:
        raise tensorio.TensorIOError(f"gaussian archive missing entries {missing}")
    meta = raw[_META_ENTRY]
    if meta.shape != (6,):
        raise tensorio.TensorIOError(f"meta must have 6 values, got shape {meta.shape}")
    gs = GaussianSet(
        centers=np.asarray(raw["centers"], dtype=np.float64),
        radii=np.asarray(raw["radii"], dtype=np.float64),
        euler=np.asarray(raw["euler"], dtype=np.float64),
        opacity=np.asarray(raw["opacity"], dtype=np.float64),
        category=np.asarray(raw["category"], dtype=np.float64),
        features=np.asarray(raw["features"], dtype=np.float64),
        grid=ErpGrid(int(meta[0]), int(meta[1])),
        stride=int(meta[2]),
        r_max=float(meta[5]),
    )
    if gs.num_categories != int(meta[3]) or gs.feature_dim != int(meta[4]):
        raise tensorio.TensorIOError("meta K/F disagree with array shapes")
    gs.validate()
    return gs
