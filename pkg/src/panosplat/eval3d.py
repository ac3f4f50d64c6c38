"""Rotated-box detection metrics: IoU, greedy matching, AP, and mAP report.

Boxes rotate about the vertical axis only, so the 3D IoU factors into a 2D
footprint intersection (convex polygon clipping) times the vertical-extent
overlap.  AP uses all-point precision-recall interpolation; the report pools
match flags across scenes before integrating, and averages per-category AP
over categories that have at least one ground-truth box.
"""

import math

import numpy as np

CATEGORY_NAMES = (
    "bed",
    "chair",
    "sofa",
    "table",
    "desk",
    "dresser",
    "cabinet",
    "fridge",
    "sink",
    "lamp",
    "bathtub",
)
DEFAULT_THRESHOLDS = (0.25, 0.5)


class EvalError(ValueError):
    pass


def _footprint(box) -> np.ndarray:
    """CCW corners of the yaw-rotated footprint, [4, 2]."""
    hx, hy = box.size[0] / 2.0, box.size[1] / 2.0
    local = np.array([(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([(c, -s), (s, c)])
    return local @ rot.T + np.array(box.center[:2])


def _clip_polygon(poly: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of poly on the left of directed edge a -> b."""
    ex, ey = b[0] - a[0], b[1] - a[1]
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        dq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        if dp >= 0.0:
            out.append(p)
        if (dp >= 0.0) != (dq >= 0.0):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return np.asarray(out).reshape(-1, 2)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def _z_overlap(a, b) -> float:
    lo = max(a.center[2] - a.size[2] / 2.0, b.center[2] - b.size[2] / 2.0)
    hi = min(a.center[2] + a.size[2] / 2.0, b.center[2] + b.size[2] / 2.0)
    return max(0.0, hi - lo)


def box_iou_rotated(a, b) -> float:
    """Volume IoU of two boxes rotated about the vertical axis."""
    fa, fb = _footprint(a), _footprint(b)
    poly = fa
    for i in range(4):
        poly = _clip_polygon(poly, fb[i], fb[(i + 1) % 4])
        if len(poly) < 3:
            return 0.0
    inter = _polygon_area(poly) * _z_overlap(a, b)
    if inter <= 0.0:
        return 0.0
    # volumes via the same area/extent pipeline so iou(a, a) is exactly 1
    vol_a = _polygon_area(fa) * _z_overlap(a, a)
    vol_b = _polygon_area(fb) * _z_overlap(b, b)
    return inter / (vol_a + vol_b - inter)


def match_detections(preds, gts, iou_threshold: float) -> np.ndarray:
    """Per-prediction TP flags against one scene's ground truth.

    Assumes predictions are already sorted by descending confidence.  Each
    prediction greedily takes the unmatched ground-truth box of highest IoU
    when that IoU reaches the threshold (ties to the lowest index); every
    ground-truth box matches at most once.
    """
    flags = np.zeros(len(preds), dtype=bool)
    taken = np.zeros(len(gts), dtype=bool)
    for i, p in enumerate(preds):
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            iou = box_iou_rotated(p, g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            flags[i] = True
    return flags


def average_precision(flags, n_gt: int) -> float:
    """All-point interpolated AP from ordered TP/FP flags.

    AP = sum over recall steps of (R_k - R_{k-1}) times the maximum precision
    at recall >= R_k.  No ground truth or no flags gives 0.
    """
    if n_gt < 0:
        raise EvalError(f"negative ground-truth count {n_gt}")
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0 or flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    recall = tp / n_gt
    precision = tp / np.arange(1, flags.size + 1)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _as_scenes(boxes):
    if len(boxes) == 0:
        return [[]]
    if hasattr(boxes[0], "center"):
        return [list(boxes)]
    return [list(scene) for scene in boxes]


class EvalReport:
    """Per-category AP at each IoU threshold plus mAP and box counts."""

    def __init__(self, ap, map_at, n_gt, n_pred):
        self.ap = ap  # {threshold: {category_id: ap}}
        self.map_at = map_at  # {threshold: map}
        self.n_gt = n_gt  # {category_id: count}
        self.n_pred = n_pred
        for per_cat in ap.values():
            for cat, val in per_cat.items():
                if not 0.0 <= val <= 1.0 + 1e-12:
                    raise EvalError(f"AP {val} for category {cat} outside [0, 1]")

    def table(self) -> str:
        """Fixed-column text table; categories without GT print a dash."""
        names = CATEGORY_NAMES + ("mAP",)
        width = max(len(n) for n in names) + 2
        lines = ["PR interpolation: all-point"]
        header = f"{'':<10}" + "".join(f"{n:>{width}}" for n in names)
        lines.append(header)
        for thr in sorted(self.ap):
            cells = []
            for cat in range(len(CATEGORY_NAMES)):
                if self.n_gt.get(cat, 0) > 0:
                    cells.append(f"{self.ap[thr][cat]:>{width}.4f}")
                else:
                    cells.append(f"{'-':>{width}}")
            cells.append(f"{self.map_at[thr]:>{width}.4f}")
            label = f"AP@{round(thr * 100)}"
            lines.append(f"{label:<10}" + "".join(cells))
        return "\n".join(lines)


def map_report(preds, gts, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Pooled multi-scene mAP report.

    Accepts one scene (flat box lists) or many (list of per-scene lists).
    Matching runs per scene and per category on confidence-sorted
    predictions; flags pool across scenes before the PR integration.
    """
    pred_scenes = _as_scenes(preds)
    gt_scenes = _as_scenes(gts)
    if len(pred_scenes) != len(gt_scenes):
        # an empty flat list is ambiguous; treat it as empty in every scene
        if pred_scenes == [[]]:
            pred_scenes = [[] for _ in gt_scenes]
        elif gt_scenes == [[]]:
            gt_scenes = [[] for _ in pred_scenes]
        else:
            raise EvalError(
                f"{len(pred_scenes)} prediction scenes vs "
                f"{len(gt_scenes)} ground-truth scenes"
            )

    cats = sorted(
        {b.category_id for scene in gt_scenes for b in scene}
        | {b.category_id for scene in pred_scenes for b in scene}
    )
    n_gt = {
        c: sum(b.category_id == c for scene in gt_scenes for b in scene) for c in cats
    }
    n_pred = {
        c: sum(b.category_id == c for scene in pred_scenes for b in scene) for c in cats
    }

    ap = {}
    map_at = {}
    for thr in sorted(thresholds):
        per_cat = {}
        for cat in cats:
            pooled = []  # (confidence, scene index, in-scene rank, flag)
            for si, (ps, gs) in enumerate(zip(pred_scenes, gt_scenes)):
                cat_preds = [b for b in ps if b.category_id == cat]
                cat_preds.sort(key=lambda b: -b.confidence)
                cat_gts = [b for b in gs if b.category_id == cat]
                flags = match_detections(cat_preds, cat_gts, thr)
                pooled += [
                    (p.confidence, si, rank, bool(f))
                    for rank, (p, f) in enumerate(zip(cat_preds, flags))
                ]
            pooled.sort(key=lambda item: -item[0])  # stable: scene/rank order kept
            per_cat[cat] = average_precision([f for *_, f in pooled], n_gt[cat])
        scored = {c: v for c, v in per_cat.items() if n_gt[c] > 0}
        ap[thr] = scored
        map_at[thr] = sum(scored.values()) / len(scored) if scored else 0.0
    return EvalReport(ap, map_at, n_gt, n_pred)
