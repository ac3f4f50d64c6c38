import math

import numpy as np
import pytest

from panosplat import detect
from panosplat import gaussian_core as gc
from panosplat.eval3d import box_iou_rotated
from panosplat.nn_kernels import WeightSet, pipeline_weights
from panosplat.pano_geometry import ErpGrid
from panosplat.tensorio import AnnotationError, BoxAnnotation


def make_set(n=4, k=4, f=8, seed=0):
    rng = np.random.default_rng(seed)
    cat = rng.uniform(0.1, 1.0, size=(n, k))
    cat /= cat.sum(axis=1, keepdims=True)
    gs = gc.GaussianSet(
        centers=rng.normal(scale=1.5, size=(n, 3)),
        radii=rng.uniform(0.05, 0.4, size=(n, 3)),
        euler=rng.uniform(-np.pi, np.pi, size=(n, 3)),
        opacity=rng.uniform(0.1, 0.9, size=n),
        category=cat,
        features=rng.normal(size=(n, f)),
        grid=ErpGrid(16, 32),
        stride=4,
        r_max=0.5,
    )
    gs.validate()
    return gs


def box(cat=0, center=(0, 0, 0), size=(1, 1, 1), yaw=0.0, conf=0.9):
    return detect.Box3D(cat, center, size, yaw, conf)


# ---------------------------------------------------------------- Box3D


def test_box3d_validates_fields():
    with pytest.raises(detect.DetectError):
        box(size=(1, 0, 1))
    with pytest.raises(detect.DetectError):
        box(yaw=4.0)
    with pytest.raises(detect.DetectError):
        box(conf=1.5)


def test_box3d_equality():
    assert box() == box()
    assert box() != box(conf=0.5)


# ---------------------------------------------------- foreground filter


def test_filter_all_background_gives_empty_set():
    gs = make_set(n=3)
    gs.category[:] = 0.0
    gs.category[:, 3] = 1.0  # last class plays background
    out = detect.filter_foreground(gs, [0, 1, 2])
    assert len(out) == 0


def test_filter_keeps_one_hot_match():
    gs = make_set(n=1)
    gs.category[:] = 0.0
    gs.category[0, 3] = 1.0
    assert len(detect.filter_foreground(gs, {3})) == 1


def test_filter_uniform_ties_to_lowest_id():
    gs = make_set(n=1)
    gs.category[:] = 0.25
    assert len(detect.filter_foreground(gs, {0})) == 1
    assert len(detect.filter_foreground(gs, {1})) == 0


def test_filter_all_categories_is_identity():
    gs = make_set(n=5)
    out = detect.filter_foreground(gs, range(gs.num_categories))
    assert np.array_equal(out.centers, gs.centers)
    assert np.array_equal(out.features, gs.features)


def test_filter_rejects_bad_ids():
    gs = make_set()
    with pytest.raises(detect.DetectError):
        detect.filter_foreground(gs, {gs.num_categories})


# ------------------------------------------------------------ head/decode


def test_head_forward_zero_weights_is_zero():
    gs = make_set(n=3, f=8, k=4)
    w = pipeline_weights(feature_dim=8, num_categories=4, init="zero")
    raw = detect.head_forward(gs, w)
    assert raw.shape == (3, 9)
    assert np.all(raw == 0.0)


def test_head_forward_single_layer_hand_computed():
    gs = make_set(n=1, f=2)
    gs.features[0] = [1.0, 2.0]
    w_mat = np.arange(18, dtype=float).reshape(2, 9)
    bias = np.full(9, 0.5)
    w = WeightSet({"head/0/W": w_mat, "head/0/b": bias})
    raw = detect.head_forward(gs, w)
    assert np.allclose(raw[0], gs.features[0] @ w_mat + bias, atol=1e-12)


def test_head_forward_preserves_order():
    gs = make_set(n=6, f=8, k=4)
    w = pipeline_weights(feature_dim=8, num_categories=4, init="random", seed=3)
    raw = detect.head_forward(gs, w)
    flipped = detect.head_forward(gs.select(slice(None, None, -1)), w)
    assert np.allclose(raw, flipped[::-1], atol=0)


def test_decode_zero_raw_recovers_gaussian_centers():
    gs = make_set(n=3)
    boxes = detect.decode_boxes(gs, np.zeros((3, 9)))
    for i, b in enumerate(boxes):
        assert b.center == tuple(gs.centers[i])
        assert b.size == (1.0, 1.0, 1.0)
        assert b.yaw == 0.0  # atan2(0, 0) convention
        assert b.confidence == 0.5
        assert b.category_id == int(np.argmax(gs.category[i]))


def test_decode_log_size_and_yaw():
    gs = make_set(n=1)
    raw = np.zeros((1, 9))
    raw[0, 3] = math.log(2.0)
    raw[0, 6], raw[0, 7] = 1.0, 0.0  # sin, cos
    b = detect.decode_boxes(gs, raw)[0]
    assert abs(b.size[0] - 2.0) < 1e-12
    assert b.size[1] == 1.0 and b.size[2] == 1.0
    assert abs(b.yaw - math.pi / 2) < 1e-15


def test_decode_rejects_misaligned_raw():
    gs = make_set(n=3)
    with pytest.raises(detect.DetectError):
        detect.decode_boxes(gs, np.zeros((2, 9)))


def test_decode_head_zero_weights_invariant():
    gs = make_set(n=5, f=8, k=4)
    w = pipeline_weights(feature_dim=8, num_categories=4, init="zero")
    boxes = detect.decode_boxes(gs, detect.head_forward(gs, w))
    for i, b in enumerate(boxes):
        assert b.center == tuple(gs.centers[i])
        assert b.category_id == int(np.argmax(gs.category[i]))


# ------------------------------------------------------------------- NMS


def test_nms_identical_boxes_keeps_lower_index():
    a = box(conf=0.8)
    b = box(conf=0.8)
    out = detect.nms_rotated([a, b], iou_threshold=0.25)
    assert out == [a]


def test_nms_disjoint_boxes_keeps_both():
    a = box(center=(0, 0, 0))
    b = box(center=(5, 0, 0), conf=0.4)
    assert detect.nms_rotated([a, b]) == [a, b]


def test_nms_chain_suppression_trace():
    # A suppresses B; C overlaps only B, so both A and C survive
    a = box(center=(0.0, 0, 0), conf=0.9)
    b = box(center=(0.2, 0, 0), conf=0.8)
    c = box(center=(0.7, 0, 0), conf=0.7)
    thr = 0.25
    assert box_iou_rotated(a, b) > thr
    assert box_iou_rotated(b, c) > thr
    assert box_iou_rotated(a, c) <= thr
    assert detect.nms_rotated([a, b, c], iou_threshold=thr) == [a, c]


def test_nms_categories_do_not_interact():
    a = box(cat=0, conf=0.9)
    b = box(cat=1, conf=0.8)
    assert detect.nms_rotated([a, b]) == [a, b]


def test_nms_max_keep_caps_per_category():
    boxes = [box(center=(3 * i, 0, 0), conf=0.9 - 0.1 * i) for i in range(4)]
    out = detect.nms_rotated(boxes, max_keep=2)
    assert out == boxes[:2]


def test_nms_kept_pairs_below_threshold():
    rng = np.random.default_rng(7)
    boxes = [
        box(
            cat=int(rng.integers(0, 2)),
            center=rng.uniform(-1, 1, 3),
            size=rng.uniform(0.5, 1.5, 3),
            yaw=rng.uniform(-math.pi, math.pi),
            conf=rng.uniform(0.1, 1.0),
        )
        for _ in range(20)
    ]
    out = detect.nms_rotated(boxes, iou_threshold=0.3)
    assert all(b in boxes for b in out)
    for i, a in enumerate(out):
        for b in out[i + 1 :]:
            if a.category_id == b.category_id:
                assert box_iou_rotated(a, b) <= 0.3


# ------------------------------------------------------------ assignment


def test_assign_center_hit():
    gs = make_set(n=1)
    gs.centers[0] = [1.0, 2.0, 0.5]
    gt = [BoxAnnotation(0, (1.0, 2.0, 0.5), (1, 1, 1), 0.3)]
    assert detect.assign_targets(gs, gt).tolist() == [0]


def test_assign_far_outside_is_negative():
    gs = make_set(n=1)
    gs.centers[0] = [10.0, 0.0, 0.0]
    gt = [BoxAnnotation(0, (0, 0, 0), (1, 1, 1), 0.0)]
    assert detect.assign_targets(gs, gt).tolist() == [-1]


def test_assign_prefers_nearest_center():
    gs = make_set(n=1)
    gs.centers[0] = [0.4, 0.0, 0.0]
    gt = [
        BoxAnnotation(0, (0.0, 0, 0), (2, 2, 2), 0.0),
        BoxAnnotation(0, (0.5, 0, 0), (2, 2, 2), 0.0),
    ]
    assert detect.assign_targets(gs, gt).tolist() == [1]


def test_assign_respects_rotation():
    # point on the long axis of a thin box yawed 45 degrees
    gs = make_set(n=2)
    gs.centers[0] = [0.6, 0.6, 0.0]
    gs.centers[1] = [0.6, -0.6, 0.0]
    gt = [BoxAnnotation(0, (0, 0, 0), (2.0, 0.2, 1.0), math.pi / 4)]
    assert detect.assign_targets(gs, gt).tolist() == [0, -1]


def test_assign_empty_inputs():
    gs = make_set(n=2)
    assert detect.assign_targets(gs, []).tolist() == [-1, -1]
    empty = gs.select(np.zeros(0, dtype=bool))
    assert detect.assign_targets(empty, [BoxAnnotation(0, (0, 0, 0), (1, 1, 1), 0)]).size == 0


# ----------------------------------------------------------------- losses


def test_detection_loss_frozen_half_residual():
    gt = [BoxAnnotation(0, (0, 0, 0), (1, 1, 1), 0.0)]
    pred = [box(center=(0.5, 0, 0), conf=0.9), box(center=(9, 9, 9), conf=0.1)]
    l_reg, l_conf = detect.detection_loss(pred, [0, -1], gt)
    assert l_reg == 0.015625  # smooth-L1(0.5)/8
    assert l_conf > 0.0


def test_detection_loss_perfect_predictions():
    gt = [BoxAnnotation(2, (1, 0, 0), (1, 2, 1), 0.4)]
    pred = [
        detect.Box3D(2, (1, 0, 0), (1, 2, 1), 0.4, 1.0),
        detect.Box3D(2, (8, 8, 8), (1, 1, 1), 0.0, 0.0),
    ]
    l_reg, l_conf = detect.detection_loss(pred, [0, -1], gt)
    assert l_reg == 0.0
    assert l_conf < 1e-6


def test_detection_loss_no_positives():
    pred = [box(conf=0.2)]
    l_reg, l_conf = detect.detection_loss(pred, [-1], [])
    assert l_reg == 0.0
    expected = -0.75 * 0.2**2 * math.log(0.8)
    assert abs(l_conf - expected) < 1e-12


def test_detection_loss_empty_set():
    assert detect.detection_loss([], [], []) == (0.0, 0.0)


def test_detection_loss_rejects_bad_assignment():
    with pytest.raises(detect.DetectError):
        detect.detection_loss([box()], [1], [])


def test_smooth_l1_branches():
    assert detect._smooth_l1(np.array([0.5]))[0] == 0.125
    assert detect._smooth_l1(np.array([1.0]))[0] == 0.5  # continuous at delta
    assert detect._smooth_l1(np.array([2.0]))[0] == 1.5


def test_total_loss_is_exact_sum():
    assert detect.total_loss(0.0, 0.0, 0.0) == 0.0
    assert detect.total_loss(1.0, 2.0, 3.0) == 6.0
    assert detect.total_loss(3.0, 1.0, 2.0) == detect.total_loss(1.0, 2.0, 3.0)
    with pytest.raises(detect.DetectError):
        detect.total_loss(float("nan"), 0.0, 0.0)


# -------------------------------------------------------------------- io


def test_detection_roundtrip(tmp_path):
    boxes = [
        box(cat=1, center=(0.25, -1.5, 0.125), size=(0.5, 2.0, 1.0), yaw=0.7, conf=0.875),
        box(cat=0, center=(3, 4, 5), size=(1, 1, 1), yaw=-3.0, conf=1.0),
    ]
    path = tmp_path / "det.txt"
    detect.save_detections(path, boxes, header_lines=["demo scene"])
    loaded = detect.load_detections(path, num_categories=4)
    assert loaded == boxes
    assert open(path).readline().startswith("# demo scene")


def test_load_detections_rejects_bad_confidence(tmp_path):
    path = tmp_path / "det.txt"
    path.write_text("0 0 0 0 1 1 1 0.0 1.5\n")
    with pytest.raises(AnnotationError, match="line 1"):
        detect.load_detections(path, num_categories=4)


def test_load_detections_rejects_bad_category(tmp_path):
    path = tmp_path / "det.txt"
    path.write_text("9 0 0 0 1 1 1 0.0 0.5\n")
    with pytest.raises(AnnotationError):
        detect.load_detections(path, num_categories=4)
