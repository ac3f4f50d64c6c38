"""Iterative Gaussian refinement: semantics, then centers, then covariances.

Each refinement sub-module owns a weight prefix ("opt0", "opt1", ...) and
runs the three updates in that fixed order.  The semantic update voxelizes
the scene, runs two sparse conv blocks plus a 1x1x1 category head, and
averages the head's softmax with the previous category distribution.  The
geometric updates are bounded: center steps by half the step range per axis,
and radii/angles are averaged with a bounded offset, so zero weights halve
the radii exactly.
"""

import dataclasses
import math

import numpy as np

from .gaussian_core import RADII_FLOOR, GaussianSet
from .nn_kernels import (
    SparseGrid,
    WeightSet,
    layernorm_gelu,
    mlp_forward,
    pack_coords,
    sigmoid,
    softmax,
    submanifold_conv3d,
)


@dataclasses.dataclass(frozen=True)
class OptimizeParams:
    num_submodules: int = 2
    voxel_size: float = 0.05  # meters
    max_center_step: float = 0.2  # meters; per-axis displacement < this / 2
    scale_offset_range: float = 0.4  # meters; radii offset lies in +-this/2
    rot_offset_range: float = math.pi / 4  # radians; angle offset in +-this/2

    def __post_init__(self):
        if self.num_submodules < 1:
            raise ValueError("need at least one refinement sub-module")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.max_center_step <= 0 or self.scale_offset_range <= 0:
            raise ValueError("step ranges must be positive")
        if self.rot_offset_range <= 0:
            raise ValueError("rot_offset_range must be positive")


@dataclasses.dataclass(frozen=True)
class VoxelMap:
    """Sparse voxel grid plus the Gaussian -> voxel-row assignment."""

    grid: SparseGrid
    gaussian_to_voxel: np.ndarray  # [N] row into grid.coords

    def members(self) -> list[np.ndarray]:
        """Gaussian indices per voxel row, each in ascending order."""
        order = np.argsort(self.gaussian_to_voxel, kind="stable")
        splits = np.searchsorted(
            self.gaussian_to_voxel[order], np.arange(1, len(self.grid))
        )
        return np.split(order, splits)


def voxelize_gaussians(gs: GaussianSet, voxel_size: float) -> VoxelMap:
    """Bucket Gaussians into voxels of the given edge; features are averaged.

    Voxel rows are ordered by packed coordinate key, so the layout is a
    deterministic function of the centers.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(gs) == 0:
        raise ValueError("cannot voxelize an empty scene")
    vox = np.floor(gs.centers / voxel_size).astype(np.int64)
    keys = pack_coords(vox)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    coords = vox[first]
    m = uniq.size
    feats = np.zeros((m, gs.feature_dim))
    np.add.at(feats, inverse, gs.features)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    feats /= counts[:, None]
    return VoxelMap(SparseGrid(coords, feats), inverse.astype(np.int64))


def refine_category(logits: np.ndarray, old: np.ndarray) -> np.ndarray:
    """Refined distribution: (softmax(logits) + old) / 2.

    Always a simplex point; uniform inputs are a fixed point, and any prior
    component keeps at least half its mass.
    """
    return (softmax(np.asarray(logits, dtype=np.float64)) + np.asarray(old)) / 2.0


def semantic_refine(
    gs: GaussianSet, weights: WeightSet, voxel_size: float, prefix: str = "opt0"
) -> GaussianSet:
    """Sparse-conv refinement of features and category distributions."""
    vm = voxelize_gaussians(gs, voxel_size)
    x = vm.grid
    for blk in (0, 1):
        x = submanifold_conv3d(
            x,
            weights.require(f"{prefix}/sem_conv{blk}/W"),
            weights.require(f"{prefix}/sem_conv{blk}/b"),
        )
        x = SparseGrid(
            x.coords,
            layernorm_gelu(
                x.features,
                weights.require(f"{prefix}/sem_ln{blk}/W"),
                weights.require(f"{prefix}/sem_ln{blk}/b"),
            ),
        )
    head = submanifold_conv3d(
        x,
        weights.require(f"{prefix}/sem_head/W"),
        weights.require(f"{prefix}/sem_head/b"),
    )
    scatter = vm.gaussian_to_voxel
    new_features = x.features[scatter]
    new_category = refine_category(head.features[scatter], gs.category)
    return dataclasses.replace(gs, features=new_features, category=new_category)


def center_refine(
    gs: GaussianSet, weights: WeightSet, max_step: float, prefix: str = "opt0"
) -> GaussianSet:
    """Bounded center update: displacement per axis lies in (-max_step/2, max_step/2)."""
    raw = mlp_forward(weights, f"{prefix}/center", gs.features)
    offsets = (sigmoid(raw) - 0.5) * max_step
    return dataclasses.replace(gs, centers=gs.centers + offsets)


def wrap_angle(x):
    """Wrap radians into [-pi, pi)."""
    return np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi


def covariance_refine(
    gs: GaussianSet,
    weights: WeightSet,
    scale_range: float,
    rot_range: float,
    prefix: str = "opt0",
) -> GaussianSet:
    """Average radii and angles with bounded predicted offsets.

    radii  <- clamp((radii + sc) / 2, RADII_FLOOR, r_max) with |sc| < scale_range/2
    euler  <- wrap((euler + ro) / 2) with |ro| < rot_range/2

    The averaging form means all-zero weights halve the radii exactly.
    """
    raw = mlp_forward(weights, f"{prefix}/cov", gs.features)
    if raw.shape[1] != 6:
        raise ValueError(f"{prefix}/cov stack must emit 6 values, got {raw.shape[1]}")
    sc = (sigmoid(raw[:, :3]) - 0.5) * scale_range
    ro = (sigmoid(raw[:, 3:]) - 0.5) * rot_range
    radii = np.clip((gs.radii + sc) / 2.0, RADII_FLOOR, gs.r_max)
    euler = wrap_angle((gs.euler + ro) / 2.0)
    return dataclasses.replace(gs, radii=radii, euler=euler)


def optimize(gs: GaussianSet, weights: WeightSet, params: OptimizeParams) -> GaussianSet:
    """Run every refinement sub-module in order; returns a new scene."""
    out = gs
    for i in range(params.num_submodules):
        prefix = f"opt{i}"
        out = semantic_refine(out, weights, params.voxel_size, prefix)
        out = center_refine(out, weights, params.max_center_step, prefix)
        out = covariance_refine(
            out, weights, params.scale_offset_range, params.rot_offset_range, prefix
        )
    out.validate()
    return out
