"""Gaussian-guided 3D box detection.

Foreground Gaussians act directly as box proposals: a small MLP head
regresses a center offset, log sizes, a (sin, cos) yaw pair, and a
confidence logit from each feature vector.  Targets are assigned by a
point-in-rotated-box test, the regression loss is smooth-L1 over the eight
box channels, confidence uses a focal loss, and same-category duplicates
are removed with greedy rotated-IoU NMS.
"""

import math

import numpy as np

from .eval3d import box_iou_rotated
from .gaussian_core import GaussianSet
from .nn_kernels import WeightSet, mlp_forward, sigmoid
from .tensorio import AnnotationError, _annotation_rows, _validate_box_fields

HEAD_NAME = "head"
RAW_DIM = 9  # dc(3), log-size(3), sin, cos, confidence logit
NMS_IOU_THRESHOLD = 0.25
NMS_MAX_KEEP = 100  # per category
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
CONF_EPS = 1e-6
SMOOTH_L1_DELTA = 1.0


class DetectError(ValueError):
    pass


class Box3D:
    """Detected 3D box: category, center, size, yaw about z, confidence."""

    __slots__ = ("category_id", "center", "size", "yaw", "confidence")

    def __init__(self, category_id, center, size, yaw, confidence):
        self.category_id = int(category_id)
        self.center = (float(center[0]), float(center[1]), float(center[2]))
        self.size = (float(size[0]), float(size[1]), float(size[2]))
        self.yaw = float(yaw)
        self.confidence = float(confidence)
        if not all(s > 0 for s in self.size):
            raise DetectError(f"non-positive box size {self.size}")
        if not -math.pi <= self.yaw <= math.pi:
            raise DetectError(f"yaw {self.yaw} outside [-pi, pi]")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectError(f"confidence {self.confidence} outside [0, 1]")

    def __repr__(self):
        return (
            f"Box3D(category_id={self.category_id}, center={self.center}, "
            f"size={self.size}, yaw={self.yaw}, confidence={self.confidence})"
        )

    def __eq__(self, other):
        return (
            isinstance(other, Box3D)
            and self.category_id == other.category_id
            and self.center == other.center
            and self.size == other.size
            and self.yaw == other.yaw
            and self.confidence == other.confidence
        )


def filter_foreground(gs: GaussianSet, foreground_ids) -> GaussianSet:
    """Keep Gaussians whose argmax category is a foreground id.

    Argmax ties resolve to the lowest class id.
    """
    ids = sorted(set(int(i) for i in foreground_ids))
    if any(i < 0 or i >= gs.num_categories for i in ids):
        raise DetectError(f"foreground ids {ids} outside [0, {gs.num_categories})")
    if len(gs) == 0:
        return gs.select(np.zeros(0, dtype=bool))
    best = np.argmax(gs.category, axis=1)
    return gs.select(np.isin(best, ids))


def head_forward(gs: GaussianSet, weights: WeightSet) -> np.ndarray:
    """Raw per-Gaussian head output [N, 9], order preserved."""
    if len(gs) == 0:
        return np.zeros((0, RAW_DIM))
    raw = mlp_forward(weights, HEAD_NAME, gs.features)
    if raw.shape[1] != RAW_DIM:
        raise DetectError(f"head must emit {RAW_DIM} values, got {raw.shape[1]}")
    return raw


def decode_boxes(gs: GaussianSet, raw: np.ndarray) -> list[Box3D]:
    """Decode raw head output into world-space boxes.

    center = gaussian center + dc, size = exp(log-size), yaw = atan2(sin, cos)
    (atan2(0, 0) = 0), confidence = sigmoid(logit), category = argmax.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (len(gs), RAW_DIM):
        raise DetectError(f"raw shape {raw.shape} does not match ({len(gs)}, {RAW_DIM})")
    centers = gs.centers + raw[:, 0:3]
    sizes = np.exp(raw[:, 3:6])
    yaws = np.arctan2(raw[:, 6], raw[:, 7])
    confs = sigmoid(raw[:, 8])
    cats = np.argmax(gs.category, axis=1) if len(gs) else np.zeros(0, dtype=int)
    return [
        Box3D(cats[i], centers[i], sizes[i], yaws[i], confs[i]) for i in range(len(gs))
    ]


def assign_targets(gs: GaussianSet, gt_boxes) -> np.ndarray:
    """Match each Gaussian to a ground-truth box, or -1.

    A Gaussian is positive iff its center lies inside at least one box
    (boundaries inclusive); among containing boxes it takes the one with the
    nearest center, lowest index on ties.
    """
    n = len(gs)
    out = np.full(n, -1, dtype=np.int64)
    if n == 0 or not gt_boxes:
        return out
    centers = np.asarray([b.center for b in gt_boxes])
    sizes = np.asarray([b.size for b in gt_boxes])
    yaws = np.asarray([b.yaw for b in gt_boxes])
    cos = np.cos(yaws)
    sin = np.sin(yaws)
    d = gs.centers[:, None, :] - centers[None, :, :]  # [N, B, 3]
    lx = cos * d[:, :, 0] + sin * d[:, :, 1]
    ly = -sin * d[:, :, 0] + cos * d[:, :, 1]
    lz = d[:, :, 2]
    inside = (
        (np.abs(lx) <= sizes[None, :, 0] / 2)
        & (np.abs(ly) <= sizes[None, :, 1] / 2)
        & (np.abs(lz) <= sizes[None, :, 2] / 2)
    )
    dist = np.linalg.norm(d, axis=2)
    dist = np.where(inside, dist, np.inf)
    best = np.argmin(dist, axis=1)
    has = inside.any(axis=1)
    out[has] = best[has]
    return out


def _smooth_l1(x: np.ndarray, delta: float = SMOOTH_L1_DELTA) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * np.square(x), delta * (ax - 0.5 * delta))


def detection_loss(decoded, assignment, gt_boxes):
    """(L_reg, L_conf) for foreground proposals against assigned targets.

    L_reg averages smooth-L1 (delta 1) over positives and the eight box
    channels: center residual (3), log-size residual (3), sin and cos of the
    yaw.  L_conf is a focal loss (gamma 2, alpha 0.25) over every proposal
    with positive/negative labels from the assignment.  No positives gives
    L_reg = 0 by definition.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (len(decoded),):
        raise DetectError("assignment must align with decoded boxes")
    pos = np.flatnonzero(assignment >= 0)
    if pos.size and (assignment[pos].max() >= len(gt_boxes)):
        raise DetectError("assignment references a missing ground-truth box")

    l_reg = 0.0
    if pos.size:
        acc = 0.0
        for i in pos:
            b = decoded[i]
            g = gt_boxes[assignment[i]]
            res = np.empty(8)
            res[0:3] = np.subtract(b.center, g.center)
            res[3:6] = np.log(b.size) - np.log(g.size)
            res[6] = math.sin(b.yaw) - math.sin(g.yaw)
            res[7] = math.cos(b.yaw) - math.cos(g.yaw)
            acc += float(np.sum(_smooth_l1(res)))
        l_reg = acc / (8.0 * pos.size)

    l_conf = 0.0
    if len(decoded):
        conf = np.clip([b.confidence for b in decoded], CONF_EPS, 1.0 - CONF_EPS)
        is_pos = assignment >= 0
        p_t = np.where(is_pos, conf, 1.0 - conf)
        alpha_t = np.where(is_pos, FOCAL_ALPHA, 1.0 - FOCAL_ALPHA)
        focal = -alpha_t * (1.0 - p_t) ** FOCAL_GAMMA * np.log(p_t)
        l_conf = float(np.mean(focal))
    return l_reg, l_conf


def total_loss(l_sem: float, l_reg: float, l_conf: float) -> float:
    """Exact sum of the three loss terms."""
    for v in (l_sem, l_reg, l_conf):
        if not math.isfinite(v):
            raise DetectError(f"non-finite loss term {v}")
    return l_sem + l_reg + l_conf


def nms_rotated(boxes, iou_threshold: float = NMS_IOU_THRESHOLD, max_keep: int = NMS_MAX_KEEP):
    """Greedy per-category NMS by descending confidence.

    A box is suppressed when its rotated IoU with an already-kept box of the
    same category exceeds the threshold; at most max_keep boxes survive per
    category.  Output preserves the input order of the kept boxes.
    """
    keep = []
    by_cat = {}
    for i, b in enumerate(boxes):
        by_cat.setdefault(b.category_id, []).append(i)
    for cat in sorted(by_cat):
        idx = by_cat[cat]
        # stable sort: equal confidences keep their input order
        order = sorted(idx, key=lambda i: -boxes[i].confidence)
        kept = []
        for i in order:
            if len(kept) >= max_keep:
                break
            if all(box_iou_rotated(boxes[i], boxes[j]) <= iou_threshold for j in kept):
                kept.append(i)
        keep.extend(kept)
    return [boxes[i] for i in sorted(keep)]


def save_detections(path, boxes, header_lines=()) -> None:
    """Annotation text format plus a ninth confidence field."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for b in boxes:
            fields = [str(b.category_id)]
            fields += [repr(v) for v in (*b.center, *b.size, b.yaw, b.confidence)]
            fh.write(" ".join(fields) + "\n")


def load_detections(path, num_categories: int) -> list[Box3D]:
    boxes = []
    for lineno, cat, vals in _annotation_rows(path, 9):
        center, size, yaw, conf = vals[0:3], vals[3:6], vals[6], vals[7]
        _validate_box_fields(cat, size, yaw, num_categories, lineno)
        if not 0.0 <= conf <= 1.0:
            raise AnnotationError(f"line {lineno}: confidence {conf} outside [0, 1]")
        boxes.append(Box3D(cat, center, size, yaw, conf))
    return boxes
