"""Differentiable semantic cubemap renderer.

Each Gaussian is splatted onto the six cube faces with an EWA projection:
the 3D covariance is pushed through the local affine approximation J of the
perspective map, the 2D eigenvalues are floored for a minimum footprint, and
splats composite front to back with per-pixel transmittance.  The rendered
per-category maps feed a binary cross-entropy loss against one-hot face
labels, and the backward pass returns analytic gradients for centers, radii,
Euler angles, and opacities.

The backward uses three sweeps per face so the suffix sums in the
transmittance gradient never require dividing accumulated products back out:
one forward sweep for the rendered maps, one to total the weighted
contributions, and one that peels the running prefix off that total.
"""

import dataclasses
import math

import numpy as np

from . import accel
from .gaussian_core import GaussianSet, covariance_from, rotation_from_euler
from .pano_geometry import FACE_BASES, FACE_ORDER
from .tensorio import read_archive, write_archive


class RenderError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RenderConfig:
    resolution: int = 256  # face edge, pixels
    near_plane: float = 0.01  # splats at forward depth <= this are culled
    eig_floor: float = 0.3  # px^2; minimum 2D covariance eigenvalue
    cutoff_sigma: float = 3.0  # Mahalanobis cutoff radius
    weight_clamp: float = 0.999  # per-splat alpha ceiling
    prob_eps: float = 1e-6  # BCE clamp: probs in [eps, 1 - eps]

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1")
        if self.near_plane <= 0:
            raise ValueError("near_plane must be positive")
        if self.eig_floor <= 0:
            raise ValueError("eig_floor must be positive")
        if self.cutoff_sigma <= 0:
            raise ValueError("cutoff_sigma must be positive")
        if not 0 < self.weight_clamp < 1:
            raise ValueError("weight_clamp must lie in (0, 1)")
        if not 0 < self.prob_eps < 0.5:
            raise ValueError("prob_eps must lie in (0, 0.5)")

    @property
    def power_cutoff(self) -> float:
        # power = 0.5 * squared Mahalanobis distance
        return 0.5 * self.cutoff_sigma**2


@dataclasses.dataclass
class CubeMap:
    """Rendered per-category probability maps plus accumulated alpha."""

    probs: np.ndarray  # [6, res, res, K] float64
    alpha: np.ndarray  # [6, res, res] float64

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.probs.ndim != 4 or self.probs.shape[0] != 6:
            raise RenderError(f"probs must be [6, res, res, K], got {self.probs.shape}")
        if self.alpha.shape != self.probs.shape[:3]:
            raise RenderError("alpha must match probs over its first three axes")
        if self.probs.shape[1] != self.probs.shape[2]:
            raise RenderError("cube faces must be square")

    @property
    def resolution(self) -> int:
        return self.probs.shape[1]

    @property
    def num_categories(self) -> int:
        return self.probs.shape[3]


@dataclasses.dataclass
class GaussianGrads:
    """Analytic loss gradients for every Gaussian, plus the loss itself."""

    centers: np.ndarray  # [N, 3]
    radii: np.ndarray  # [N, 3]
    euler: np.ndarray  # [N, 3]
    opacity: np.ndarray  # [N]
    loss: float


@dataclasses.dataclass
class FaceProjection:
    """Per-face EWA splat geometry for one set of Gaussians."""

    face: str
    valid: np.ndarray  # [N] bool; forward depth above the near plane
    depth: np.ndarray  # [S] forward depth of valid splats
    order: np.ndarray  # [S] indices into the valid arrays, front to back
    index: np.ndarray  # [S] rows of the original set
    mean2d: np.ndarray  # [S, 2] pixel coords (x, y) of projected centers
    jac: np.ndarray  # [S, 2, 3] d(mean2d)/d(center)
    cov3: np.ndarray  # [S, 3, 3]
    cov2_raw: np.ndarray  # [S, 2, 2] before eigenvalue flooring
    cov2: np.ndarray  # [S, 2, 2] floored
    conic: np.ndarray  # [S, 3] inverse of cov2 as (c00, c01, c11)
    radius_px: np.ndarray  # [S] splat extent in pixels


def _floor_eigenvalues(cov2: np.ndarray, floor: float):
    """Clamp both eigenvalues of symmetric 2x2 matrices to at least `floor`.

    Rows whose eigenvalues already sit above the floor pass through bitwise
    unchanged.  Returns (floored, lo, hi) with the eigenvalues of the input.
    """
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    mid = 0.5 * (a + c)
    gap = np.sqrt(np.square(0.5 * (a - c)) + np.square(b))
    lo = mid - gap
    hi = mid + gap
    out = cov2.copy()
    need = lo < floor
    if np.any(need):
        lam_hi = np.maximum(hi[need], floor)
        lam_lo = np.maximum(lo[need], floor)
        vh = _eigvec(a[need], b[need], c[need], hi[need])
        vl = np.stack([-vh[:, 1], vh[:, 0]], axis=1)  # perpendicular
        rebuilt = lam_hi[:, None, None] * vh[:, :, None] * vh[:, None, :]
        rebuilt += lam_lo[:, None, None] * vl[:, :, None] * vl[:, None, :]
        out[need] = rebuilt
    return out, lo, hi


def _eigvec(a, b, c, lam):
    """Unit eigenvector of [[a, b], [b, c]] for eigenvalue lam (vectorized)."""
    # For b == 0 the matrix is diagonal; pick the axis matching lam.
    off = b != 0
    vx = np.where(off, b, np.where(np.abs(a - lam) <= np.abs(c - lam), 1.0, 0.0))
    vy = np.where(off, lam - a, np.where(np.abs(a - lam) <= np.abs(c - lam), 0.0, 1.0))
    n = np.hypot(vx, vy)
    return np.stack([vx / n, vy / n], axis=1)


def _floor_backward(cov2_raw: np.ndarray, grad_floored: np.ndarray, floor: float):
    """Adjoint of `_floor_eigenvalues` at the unfloored input."""
    a = cov2_raw[:, 0, 0]
    b = cov2_raw[:, 0, 1]
    c = cov2_raw[:, 1, 1]
    mid = 0.5 * (a + c)
    gap = np.sqrt(np.square(0.5 * (a - c)) + np.square(b))
    lo = mid - gap
    hi = mid + gap
    out = grad_floored.copy()
    dead = hi < floor  # output is constant floor * I
    out[dead] = 0.0
    mixed = (lo < floor) & ~dead
    if np.any(mixed):
        vh = _eigvec(a[mixed], b[mixed], c[mixed], hi[mixed])
        vl = np.stack([-vh[:, 1], vh[:, 0]], axis=1)
        q = np.stack([vh, vl], axis=2)  # columns are eigenvectors
        gp = np.einsum("sji,sjk,skl->sil", q, grad_floored[mixed], q)
        kap = (hi[mixed] - floor) / (hi[mixed] - lo[mixed])
        scale = np.empty_like(gp)
        scale[:, 0, 0] = 1.0
        scale[:, 0, 1] = kap
        scale[:, 1, 0] = kap
        scale[:, 1, 1] = 0.0
        out[mixed] = np.einsum("sij,sjk,slk->sil", q, gp * scale, q)
    return out


def project_face(gs: GaussianSet, face: str, config: RenderConfig) -> FaceProjection:
    """EWA-project every Gaussian onto one cube face.

    The pinhole for each face has focal length res/2 and its principal point
    at the face center; pixel (i, j) is sampled at (j + 0.5, i + 0.5).
    """
    if face not in FACE_BASES:
        raise RenderError(f"unknown face {face!r}")
    fw, rt, dn = (np.asarray(v, dtype=np.float64) for v in FACE_BASES[face])
    res = config.resolution
    half = res / 2.0

    w = gs.centers @ fw
    valid = w > config.near_plane
    index = np.flatnonzero(valid)
    cw = w[index]
    cr = gs.centers[index] @ rt
    cd = gs.centers[index] @ dn

    mean2d = np.stack([half * cr / cw + half, half * cd / cw + half], axis=1)

    # J rows are the derivatives of the pixel coords wrt the 3D center.
    jac = np.empty((index.size, 2, 3))
    jac[:, 0, :] = half * (rt[None, :] / cw[:, None] - (cr / cw**2)[:, None] * fw)
    jac[:, 1, :] = half * (dn[None, :] / cw[:, None] - (cd / cw**2)[:, None] * fw)

    cov3 = covariance_from(gs.radii[index], gs.euler[index])
    cov2_raw = np.einsum("sab,sbc,sdc->sad", jac, cov3, jac)
    cov2_raw = 0.5 * (cov2_raw + cov2_raw.transpose(0, 2, 1))
    cov2, _, hi = _floor_eigenvalues(cov2_raw, config.eig_floor)

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    conic = np.stack(
        [cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=1
    )
    # one guard pixel so every point within the cutoff stays strictly inside
    # the box under a small parameter perturbation
    radius_px = config.cutoff_sigma * np.sqrt(np.maximum(hi, config.eig_floor)) + 1.0
    order = np.argsort(cw, kind="stable")
    return FaceProjection(
        face=face,
        valid=valid,
        depth=cw,
        order=order,
        index=index,
        mean2d=mean2d,
        jac=jac,
        cov3=cov3,
        cov2_raw=cov2_raw,
        cov2=cov2,
        conic=conic,
        radius_px=radius_px,
    )


@dataclasses.dataclass(frozen=True)
class Splat2D:
    """One Gaussian projected onto one cube face."""

    face: str
    mean: np.ndarray  # [2] pixel coords (x, y)
    cov2d: np.ndarray  # [2, 2] pixels^2, eigenvalue-floored
    depth: float  # forward distance, meters
    opacity: float
    category: np.ndarray  # [K]


def project_gaussian_to_face(gs: GaussianSet, i: int, face: str, config: RenderConfig):
    """Project Gaussian row i onto one face; None when behind the near plane."""
    proj = project_face(gs, face, config)
    where = np.flatnonzero(proj.index == i)
    if where.size == 0:
        return None
    s = int(where[0])
    return Splat2D(
        face=face,
        mean=proj.mean2d[s],
        cov2d=proj.cov2[s],
        depth=float(proj.depth[s]),
        opacity=float(gs.opacity[i]),
        category=gs.category[i],
    )


def _bbox(cx, cy, rad, res):
    x0 = max(0, int(math.floor(cx - rad)))
    x1 = min(res - 1, int(math.ceil(cx + rad)))
    y0 = max(0, int(math.floor(cy - rad)))
    y1 = min(res - 1, int(math.ceil(cy + rad)))
    return x0, x1, y0, y1


def _splat_weights(proj, s, x0, x1, y0, y1, opacity, config):
    """Per-pixel clamped weights and Gaussian values for one splat's box."""
    dx = np.arange(x0, x1 + 1) + 0.5 - proj.mean2d[s, 0]
    dy = np.arange(y0, y1 + 1) + 0.5 - proj.mean2d[s, 1]
    c00, c01, c11 = proj.conic[s]
    power = 0.5 * (
        c00 * np.square(dx)[None, :]
        + 2.0 * c01 * dy[:, None] * dx[None, :]
        + c11 * np.square(dy)[:, None]
    )
    inside = power <= config.power_cutoff
    gval = np.where(inside, np.exp(-power), 0.0)
    weight = np.minimum(opacity * gval, config.weight_clamp)
    return weight, gval, dx, dy


def _composite_forward_np(proj, opacity, category, config):
    res = config.resolution
    k = category.shape[1]
    probs = np.zeros((res, res, k))
    alpha = np.zeros((res, res))
    trans = np.ones((res, res))
    for s in proj.order:
        x0, x1, y0, y1 = _bbox(*proj.mean2d[s], proj.radius_px[s], res)
        if x0 > x1 or y0 > y1:
            continue
        weight, _, _, _ = _splat_weights(proj, s, x0, x1, y0, y1, opacity[s], config)
        tl = trans[y0 : y1 + 1, x0 : x1 + 1]
        contrib = tl * weight
        probs[y0 : y1 + 1, x0 : x1 + 1] += contrib[:, :, None] * category[s]
        alpha[y0 : y1 + 1, x0 : x1 + 1] += contrib
        trans[y0 : y1 + 1, x0 : x1 + 1] = tl * (1.0 - weight)
    return probs, alpha


def _composite_backward_np(proj, opacity, category, grad_map, config):
    """Pixel-space gradients for one face.

    Returns per-valid-splat (grad_opacity, grad_mean2d, grad_conic) where
    grad_conic holds d(loss)/d(c00, c01, c11).
    """
    res = config.resolution
    s_count = proj.index.size
    g_op = np.zeros(s_count)
    g_mean = np.zeros((s_count, 2))
    g_conic = np.zeros((s_count, 3))

    # sweep 1: total weighted contribution B = sum_j T_j w_j A_j per pixel
    total = np.zeros((res, res))
    trans = np.ones((res, res))
    boxes = {}
    for s in proj.order:
        x0, x1, y0, y1 = _bbox(*proj.mean2d[s], proj.radius_px[s], res)
        if x0 > x1 or y0 > y1:
            continue
        boxes[s] = (x0, x1, y0, y1)
        weight, _, _, _ = _splat_weights(proj, s, x0, x1, y0, y1, opacity[s], config)
        a_val = grad_map[y0 : y1 + 1, x0 : x1 + 1] @ category[s]
        tl = trans[y0 : y1 + 1, x0 : x1 + 1]
        total[y0 : y1 + 1, x0 : x1 + 1] += tl * weight * a_val
        trans[y0 : y1 + 1, x0 : x1 + 1] = tl * (1.0 - weight)

    # sweep 2: peel the prefix off the total to get each splat's suffix sum
    prefix = np.zeros((res, res))
    trans = np.ones((res, res))
    for s in proj.order:
        if s not in boxes:
            continue
        x0, x1, y0, y1 = boxes[s]
        weight, gval, dx, dy = _splat_weights(
            proj, s, x0, x1, y0, y1, opacity[s], config
        )
        a_val = grad_map[y0 : y1 + 1, x0 : x1 + 1] @ category[s]
        tl = trans[y0 : y1 + 1, x0 : x1 + 1]
        term = tl * weight * a_val
        box = np.s_[y0 : y1 + 1, x0 : x1 + 1]
        suffix = total[box] - prefix[box] - term
        dldw = tl * a_val - suffix / (1.0 - weight)
        live = opacity[s] * gval < config.weight_clamp  # clamp kills the grad
        dldw = np.where(live, dldw, 0.0)
        g_op[s] = np.sum(dldw * gval)
        dldpow = dldw * -(opacity[s] * gval)
        c00, c01, c11 = proj.conic[s]
        mdx = c00 * dx[None, :] + c01 * dy[:, None]
        mdy = c01 * dx[None, :] + c11 * dy[:, None]
        g_mean[s, 0] = -np.sum(dldpow * mdx)
        g_mean[s, 1] = -np.sum(dldpow * mdy)
        g_conic[s, 0] = 0.5 * np.sum(dldpow * np.square(dx)[None, :])
        g_conic[s, 1] = np.sum(dldpow * dy[:, None] * dx[None, :])
        g_conic[s, 2] = 0.5 * np.sum(dldpow * np.square(dy)[:, None])
        prefix[box] += term
        trans[box] = tl * (1.0 - weight)
    return g_op, g_mean, g_conic


def render_face(gs: GaussianSet, face: str, config: RenderConfig):
    """Render one face; returns (probs [res, res, K], alpha [res, res])."""
    proj = project_face(gs, face, config)
    opacity = gs.opacity[proj.index]
    category = gs.category[proj.index]
    if accel.mode() == "numba":
        from . import _numba_impl

        return _numba_impl.composite_forward(
            proj.mean2d,
            proj.conic,
            proj.radius_px,
            proj.order,
            np.ascontiguousarray(opacity),
            np.ascontiguousarray(category),
            config.resolution,
            config.power_cutoff,
            config.weight_clamp,
        )
    return _composite_forward_np(proj, opacity, category, config)


def render_cubemap(gs: GaussianSet, config: RenderConfig) -> CubeMap:
    """Render all six faces front to back."""
    k = gs.num_categories
    res = config.resolution
    probs = np.zeros((6, res, res, k))
    alpha = np.zeros((6, res, res))
    for fi, face in enumerate(FACE_ORDER):
        probs[fi], alpha[fi] = render_face(gs, face, config)
    return CubeMap(probs=probs, alpha=alpha)


def faces_to_onehot(labels: np.ndarray, num_categories: int) -> np.ndarray:
    """One-hot encode integer face labels into [6, res, res, K] float64."""
    labels = np.asarray(labels)
    if labels.ndim != 3 or labels.shape[0] != 6:
        raise RenderError(f"labels must be [6, res, res], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_categories:
        raise RenderError("label ids must lie in [0, num_categories)")
    return np.identity(num_categories)[labels.astype(np.int64)]


def _check_target(target: np.ndarray, res: int, k: int):
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (6, res, res, k):
        raise RenderError(
            f"target shape {target.shape} does not match rendering (6, {res}, {res}, {k})"
        )
    return target


def semantic_loss(cubemap: CubeMap, target: np.ndarray, config: RenderConfig) -> float:
    """Mean binary cross-entropy between rendered maps and one-hot targets.

    Probabilities are clamped to [prob_eps, 1 - prob_eps] before the logs, so
    empty pixels cost a large but finite amount.
    """
    target = _check_target(target, cubemap.resolution, cubemap.num_categories)
    p = np.clip(cubemap.probs, config.prob_eps, 1.0 - config.prob_eps)
    bce = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    return float(np.mean(bce))


def _loss_grad_map(probs: np.ndarray, target: np.ndarray, config: RenderConfig):
    """d(mean BCE)/d(rendered probs); zero where the clamp is active."""
    p = np.clip(probs, config.prob_eps, 1.0 - config.prob_eps)
    grad = -(target / p - (1.0 - target) / (1.0 - p)) / probs.size
    inside = (probs >= config.prob_eps) & (probs <= 1.0 - config.prob_eps)
    return np.where(inside, grad, 0.0)


def _geometry_backward(proj, g_op, g_mean, g_conic, gs, config, grads):
    """Chain pixel-space gradients back to center/radii/euler/opacity."""
    if proj.index.size == 0:
        return
    fw, rt, dn = (np.asarray(v, dtype=np.float64) for v in FACE_BASES[proj.face])
    idx = proj.index
    half = config.resolution / 2.0

    # conic = inverse(cov2); d(loss)/d(cov2) = -conic @ G_M @ conic
    m = np.empty((idx.size, 2, 2))
    m[:, 0, 0] = proj.conic[:, 0]
    m[:, 0, 1] = proj.conic[:, 1]
    m[:, 1, 0] = proj.conic[:, 1]
    m[:, 1, 1] = proj.conic[:, 2]
    gm = np.empty_like(m)
    gm[:, 0, 0] = g_conic[:, 0]
    gm[:, 0, 1] = 0.5 * g_conic[:, 1]
    gm[:, 1, 0] = 0.5 * g_conic[:, 1]
    gm[:, 1, 1] = g_conic[:, 2]
    g_cov2f = -np.einsum("sab,sbc,scd->sad", m, gm, m)

    g_cov2 = _floor_backward(proj.cov2_raw, g_cov2f, config.eig_floor)

    # cov2 = J cov3 J^T
    g_cov3 = np.einsum("sba,sbc,scd->sad", proj.jac, g_cov2, proj.jac)
    g_jac = 2.0 * np.einsum("sab,sbc,scd->sad", g_cov2, proj.jac, proj.cov3)

    # mean2d depends on the center through J itself
    g_center = np.einsum("sba,sb->sa", proj.jac, g_mean)

    w = proj.depth
    cr = gs.centers[idx] @ rt
    cd = gs.centers[idx] @ dn
    q0 = g_jac[:, 0, :] @ rt
    q1 = g_jac[:, 1, :] @ dn
    s0 = g_jac[:, 0, :] @ fw
    s1 = g_jac[:, 1, :] @ fw
    inv2 = half / w**2
    g_center += (
        -(inv2 * (q0 + q1))[:, None] * fw
        - (inv2 * s0)[:, None] * rt
        - (inv2 * s1)[:, None] * dn
        + (2.0 * half * (cr * s0 + cd * s1) / w**3)[:, None] * fw
    )

    # cov3 = (R D)(R D)^T with D = diag(radii)
    rot = rotation_from_euler(gs.euler[idx])
    rgr = np.einsum("sba,sbc,scd->sad", rot, g_cov3, rot)
    g_radii = 2.0 * gs.radii[idx] * rgr[:, np.arange(3), np.arange(3)]
    g_rot = 2.0 * np.einsum(
        "sab,sbc,sc->sac", g_cov3, rot, np.square(gs.radii[idx])
    )

    g_euler = _euler_backward(gs.euler[idx], g_rot)

    np.add.at(grads.centers, idx, g_center)
    np.add.at(grads.radii, idx, g_radii)
    np.add.at(grads.euler, idx, g_euler)
    np.add.at(grads.opacity, idx, g_op)


def _axis_rotations(euler: np.ndarray):
    """Per-axis rotation factors and their angle derivatives, batched."""
    n = euler.shape[0]
    ca, sa = np.cos(euler[:, 0]), np.sin(euler[:, 0])
    cb, sb = np.cos(euler[:, 1]), np.sin(euler[:, 1])
    cg, sg = np.cos(euler[:, 2]), np.sin(euler[:, 2])
    z = np.zeros(n)
    o = np.ones(n)

    def mat(rows):
        return np.stack([np.stack(r, axis=1) for r in rows], axis=1)

    rx = mat([[o, z, z], [z, ca, -sa], [z, sa, ca]])
    ry = mat([[cb, z, sb], [z, o, z], [-sb, z, cb]])
    rz = mat([[cg, -sg, z], [sg, cg, z], [z, z, o]])
    drx = mat([[z, z, z], [z, -sa, -ca], [z, ca, -sa]])
    dry = mat([[-sb, z, cb], [z, z, z], [-cb, z, -sb]])
    drz = mat([[-sg, -cg, z], [cg, -sg, z], [z, z, z]])
    return rx, ry, rz, drx, dry, drz


def _euler_backward(euler: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """d(loss)/d(euler) given d(loss)/dR for R = Rz @ Ry @ Rx."""
    rx, ry, rz, drx, dry, drz = _axis_rotations(euler)
    da = np.einsum("sab,sbc,scd,sad->s", rz, ry, drx, g_rot)
    db = np.einsum("sab,sbc,scd,sad->s", rz, dry, rx, g_rot)
    dg = np.einsum("sab,sbc,scd,sad->s", drz, ry, rx, g_rot)
    return np.stack([da, db, dg], axis=1)


def semantic_loss_grad(
    gs: GaussianSet, target: np.ndarray, config: RenderConfig
) -> GaussianGrads:
    """Render, evaluate the BCE loss, and backpropagate analytically."""
    n = len(gs)
    target = _check_target(target, config.resolution, gs.num_categories)
    grads = GaussianGrads(
        centers=np.zeros((n, 3)),
        radii=np.zeros((n, 3)),
        euler=np.zeros((n, 3)),
        opacity=np.zeros(n),
        loss=0.0,
    )
    loss_total = 0.0
    use_numba = accel.mode() == "numba"
    if use_numba:
        from . import _numba_impl
    for fi, face in enumerate(FACE_ORDER):
        proj = project_face(gs, face, config)
        opacity = np.ascontiguousarray(gs.opacity[proj.index])
        category = np.ascontiguousarray(gs.category[proj.index])
        if use_numba:
            probs, _ = _numba_impl.composite_forward(
                proj.mean2d,
                proj.conic,
                proj.radius_px,
                proj.order,
                opacity,
                category,
                config.resolution,
                config.power_cutoff,
                config.weight_clamp,
            )
        else:
            probs, _ = _composite_forward_np(proj, opacity, category, config)
        p = np.clip(probs, config.prob_eps, 1.0 - config.prob_eps)
        tgt = target[fi]
        loss_total += float(
            np.sum(-(tgt * np.log(p) + (1.0 - tgt) * np.log1p(-p)))
        )
        grad_map = _loss_grad_map(probs, tgt, config) / 6.0
        if use_numba:
            g_op, g_mean, g_conic = _numba_impl.composite_backward(
                proj.mean2d,
                proj.conic,
                proj.radius_px,
                proj.order,
                opacity,
                category,
                grad_map,
                config.resolution,
                config.power_cutoff,
                config.weight_clamp,
            )
        else:
            g_op, g_mean, g_conic = _composite_backward_np(
                proj, opacity, category, grad_map, config
            )
        _geometry_backward(proj, g_op, g_mean, g_conic, gs, config, grads)
    grads.loss = loss_total / (6 * config.resolution**2 * gs.num_categories)
    return grads


def save_cubemap(path, cubemap: CubeMap, extra_entries=None):
    """Write one probs_<face> and alpha_<face> tensor per cube face."""
    entries = {}
    for fi, face in enumerate(FACE_ORDER):
        entries[f"probs_{face}"] = cubemap.probs[fi]
        entries[f"alpha_{face}"] = cubemap.alpha[fi]
    if extra_entries:
        entries.update(extra_entries)
    write_archive(path, entries)


def load_cubemap(path) -> CubeMap:
    entries = read_archive(path)
    probs = []
    alpha = []
    for face in FACE_ORDER:
        for name in (f"probs_{face}", f"alpha_{face}"):
            if name not in entries:
                raise RenderError(f"cubemap archive is missing entry {name!r}")
        probs.append(entries[f"probs_{face}"])
        alpha.append(entries[f"alpha_{face}"])
    return CubeMap(probs=np.stack(probs), alpha=np.stack(alpha))
