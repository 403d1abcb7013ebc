import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daedalus.geometry import (
    REFERENCE_MIN_AREA,
    Box,
    DetectionSet,
    brute_force_nms_oracle,
    dimension_floor_filter,
    iou,
    iou_matrix,
    nms,
    scaled_min_area,
    soft_nms,
)


def pair_with_iou(target, score2=0.8):
    """Two same-class boxes of equal size with the requested IoU (horizontal shift)."""
    # IoU of two unit-height, width-10 boxes shifted by s: (10-s)/(10+s)
    s = 10.0 * (1 - target) / (1 + target)
    return DetectionSet([[5, 5, 10, 10], [5 + s, 5, 10, 10]], [0.9, score2], [0, 0])


def random_set(rng, n, k=4, side=64.0):
    cx, cy = rng.uniform(0, side, n), rng.uniform(0, side, n)
    w, h = rng.uniform(1, side / 3, n), rng.uniform(1, side / 3, n)
    # mixed overlaps: some clusters of near-duplicates
    dup = rng.random(n) < 0.3
    if n > 1:
        src = rng.integers(0, n, n)
        cx = np.where(dup, cx[src] + rng.normal(0, 1.5, n), cx)
        cy = np.where(dup, cy[src] + rng.normal(0, 1.5, n), cy)
    scores = rng.random(n)
    # a few exact score ties
    tie = rng.random(n) < 0.05
    scores = np.where(tie, 0.5, scores)
    return DetectionSet(np.stack([cx, cy, w, h], 1), scores, rng.integers(0, k, n))


def test_iou_identical():
    b = Box(3, 4, 2, 5)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0


def test_iou_corner_example():
    a = Box.from_corners(0, 0, 2, 2)
    b = Box.from_corners(1, 1, 3, 3)
    assert abs(iou(a, b) - 1 / 7) <= 1e-12


def test_iou_zero_area():
    assert iou(Box(1, 1, 0, 0), Box(1, 1, 0, 0)) == 0.0


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(0)
    a, b = random_set(rng, 20), random_set(rng, 15)
    m = iou_matrix(a, b)
    for i, bi in enumerate(a.boxes()):
        for j, bj in enumerate(b.boxes()):
            assert m[i, j] == pytest.approx(iou(bi, bj), abs=1e-15)


boxes = st.builds(
    Box,
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 30), st.floats(0.01, 30),
)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes)
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


@given(boxes, boxes, st.floats(-20, 20), st.floats(-20, 20))
def test_iou_translation_invariant(a, b, dx, dy):
    shift = lambda x: Box(x.cx + dx, x.cy + dy, x.w, x.h)  # noqa: E731
    assert iou(shift(a), shift(b)) == pytest.approx(iou(a, b), abs=1e-9)


@given(boxes, boxes, st.floats(0.1, 10))
def test_iou_scale_invariant(a, b, k):
    scale = lambda x: Box(x.cx * k, x.cy * k, x.w * k, x.h * k)  # noqa: E731
    assert iou(scale(a), scale(b)) == pytest.approx(iou(a, b), abs=1e-9)


def test_nms_single_box():
    d = DetectionSet([[1, 1, 2, 2]], [0.3], [1])
    assert list(nms(d, 0.5).index) == [0]


def test_nms_pair_trace():
    d = pair_with_iou(0.6)
    assert iou(*d.boxes()) == pytest.approx(0.6)
    assert list(nms(d, 0.5).index) == [0]
    assert list(nms(d, 0.7).index) == [0, 1]


def test_nms_threshold_is_inclusive():
    # two identical boxes: IoU exactly 1 >= Nt = 1
    d = DetectionSet([[5, 5, 4, 4], [5, 5, 4, 4]], [0.9, 0.8], [0, 0])
    assert list(nms(d, 1.0).index) == [0]


def test_nms_classes_do_not_interact():
    d = DetectionSet([[5, 5, 4, 4], [5, 5, 4, 4]], [0.9, 0.8], [0, 1])
    assert sorted(nms(d, 0.5).index) == [0, 1]


def test_nms_empty_and_validation():
    assert len(nms(DetectionSet.empty(), 0.5)) == 0
    d = DetectionSet([[5, 5, 4, 4]], [0.9], [0])
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            nms(d, bad)
    with pytest.raises(ValueError):
        nms(DetectionSet([[5, 5, 4, 4]], [np.nan], [0]), 0.5)


def test_nms_score_ties_prefer_lower_index():
    d = DetectionSet([[5, 5, 4, 4], [5.1, 5, 4, 4]], [0.5, 0.5], [0, 0])
    assert list(nms(d, 0.5).index) == [0]
    assert list(brute_force_nms_oracle(d, 0.5).index) == [0]


def test_oracle_identical_boxes_single_survivor():
    d = DetectionSet(np.tile([[5, 5, 4, 4]], (6, 1)), np.linspace(0.1, 0.6, 6), np.zeros(6))
    assert len(brute_force_nms_oracle(d, 0.9)) == 1
    assert len(brute_force_nms_oracle(DetectionSet.empty(), 0.5)) == 0


def test_nms_matches_oracle_200_boxes():
    rng = np.random.default_rng(11)
    for _ in range(5):
        d = random_set(rng, 200)
        nt = float(rng.uniform(0.3, 0.9))
        assert list(nms(d, nt).index) == list(brute_force_nms_oracle(d, nt).index)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 60), st.floats(0.05, 1.0))
def test_nms_properties(seed, n, nt):
    rng = np.random.default_rng(seed)
    d = random_set(rng, n)
    out = nms(d, nt)
    kept = set(out.index.tolist())
    assert kept <= set(d.index.tolist())
    boxes = {int(i): b for i, b in zip(d.index, d.boxes())}
    for i in kept:
        for j in kept:
            if i < j and boxes[i].class_id == boxes[j].class_id:
                assert iou(boxes[i], boxes[j]) < nt
    for i in set(boxes) - kept:
        bi = boxes[i]
        assert any(boxes[j].class_id == bi.class_id and iou(boxes[j], bi) >= nt
                   and (boxes[j].score, -j) > (bi.score, -i) for j in kept)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100), st.floats(-5, 5))
def test_nms_invariant_under_affine_score_rescale(seed, a, b):
    rng = np.random.default_rng(seed)
    d = random_set(rng, 80)
    d2 = DetectionSet(d.xywh, a * d.scores + b, d.class_ids)
    assert list(nms(d, 0.5).index) == list(nms(d2, 0.5).index)


def test_soft_nms_disjoint_unchanged():
    d = DetectionSet([[5, 5, 4, 4], [30, 30, 4, 4]], [0.9, 0.8], [0, 0])
    for method in ("linear", "gaussian"):
        out = soft_nms(d, 0.5, method)
        np.testing.assert_array_equal(out.scores, [0.9, 0.8])


def test_soft_nms_linear_decay():
    out = soft_nms(pair_with_iou(0.6), 0.5, "linear")
    assert out.scores[1] == pytest.approx(0.8 * 0.4, abs=1e-12)


def test_soft_nms_gaussian_decay():
    out = soft_nms(pair_with_iou(0.6), 0.5, "gaussian", sigma=0.5)
    assert out.scores[1] == pytest.approx(0.8 * math.exp(-0.72), abs=1e-12)
    assert out.scores[1] == pytest.approx(0.3895, abs=1e-4)


def test_soft_nms_linear_below_threshold_untouched():
    out = soft_nms(pair_with_iou(0.4), 0.5, "linear")
    assert out.scores[1] == 0.8


def test_soft_nms_floor_drops_boxes():
    d = pair_with_iou(0.9, score2=0.05)
    out = soft_nms(d, 0.5, "linear", score_floor=0.01)
    assert list(out.index) == [0]


def test_soft_nms_linear_zero_floor_keeps_all():
    rng = np.random.default_rng(3)
    d = random_set(rng, 150)
    out = soft_nms(d, 0.3, "linear", score_floor=0.0)
    assert sorted(out.index) == sorted(d.index)


def test_soft_nms_validation():
    d = pair_with_iou(0.5)
    with pytest.raises(ValueError):
        soft_nms(d, 0.5, "cubic")
    with pytest.raises(ValueError):
        soft_nms(d, 0.5, "gaussian", sigma=0.0)
    with pytest.raises(ValueError):
        soft_nms(d, 0.5, "linear", score_floor=1.0)


def test_dimension_floor():
    d = DetectionSet([[5, 5, 10, 10], [20, 20, 20, 20]], [0.9, 0.8], [0, 0])
    assert dimension_floor_filter(d, 0.0) is d
    assert list(dimension_floor_filter(d, 200).index) == [1]
    with pytest.raises(ValueError):
        dimension_floor_filter(d, -1)


def test_scaled_min_area():
    assert REFERENCE_MIN_AREA == pytest.approx(4168.69, abs=0.01)
    assert scaled_min_area(416) == REFERENCE_MIN_AREA
    assert scaled_min_area(64) == pytest.approx(REFERENCE_MIN_AREA * (64 / 416) ** 2)


def test_clipped_stays_in_frame():
    d = DetectionSet([[-2, 3, 10, 10], [60, 60, 20, 8]], [0.9, 0.8], [0, 1])
    x1, y1, x2, y2 = d.clipped(64, 64).corners()
    assert (x1 >= 0).all() and (y1 >= 0).all() and (x2 <= 64).all() and (y2 <= 64).all()


def test_detection_set_column_check():
    with pytest.raises(ValueError):
        DetectionSet(np.zeros((2, 4)), np.zeros(3), np.zeros(2))
