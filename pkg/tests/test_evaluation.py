import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ioucal.data import Box, Category, Dataset, DetectionSet, GroundTruthObject, ImageInfo
from ioucal.evaluation import (COCO_THRESHOLDS, RECALL_LEVELS, average_precision, map_metrics, match,
                               match_many, pr_curve)
from ioucal.suppression import NMS

from conftest import make_dets, make_gt, random_boxes
from oracles import brute_force_ap, greedy_match_trace


def test_threshold_grids():
    assert COCO_THRESHOLDS.tolist() == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
    assert len(RECALL_LEVELS) == 101 and RECALL_LEVELS[1] == 0.01


def test_single_match():
    gt = make_gt([(0, 0, 10, 10)])
    res = match(make_dets([(0, 0, 10, 6, 0.9, 1)]), gt, 0.5)  # IoU 0.6
    assert res.tp.tolist() == [True] and res.matched_gt.tolist() == [1] and res.gt_matched.tolist() == [True]


def test_duplicate_is_fp():
    gt = make_gt([(0, 0, 10, 10)])
    res = match(make_dets([(0, 0, 10, 10, 0.9, 1), (0, 0, 10, 9, 0.8, 1)]), gt, 0.5)
    assert res.tp.tolist() == [True, False] and res.fp.tolist() == [False, True]


def test_category_mismatch_is_fp():
    gt = make_gt([(0, 0, 10, 10)], n_categories=2)
    assert match(make_dets([(0, 0, 10, 9, 0.9, 2)]), gt, 0.5).tp.tolist() == [False]


def test_prefers_highest_iou_unmatched_gt():
    gt = make_gt([(0, 0, 10, 10), (0, 0, 10, 8)])
    res = match(make_dets([(0, 0, 10, 8, 0.9, 1), (0, 0, 10, 10, 0.8, 1)]), gt, 0.5)
    assert res.matched_gt.tolist() == [2, 1]


def test_crowd_absorbs_unmatched():
    gt = make_gt([(0, 0, 10, 10), (20, 0, 60, 40)], crowd=[False, True])
    dets = make_dets([(0, 0, 10, 10, 0.9, 1), (22, 2, 30, 10, 0.8, 1), (80, 80, 90, 90, 0.7, 1)])
    res = match(dets, gt, 0.5)
    assert res.tp.tolist() == [True, False, False]
    assert res.ignored.tolist() == [False, True, False]
    assert average_precision(dets, res, gt, 1) == pytest.approx(1.0)


def test_tp_monotone_in_threshold():
    rng = np.random.default_rng(0)
    gt = make_gt([tuple(b) for b in random_boxes(rng, 8)])
    dets = make_dets([(*b, s, 1) for b, s in zip(random_boxes(rng, 20), rng.uniform(size=20))])
    tp, _, _, _ = match_many(dets, gt, COCO_THRESHOLDS)
    assert np.all(np.diff(tp.sum(axis=1)) <= 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.75]))
def test_greedy_matches_trace(seed, t):
    rng = np.random.default_rng(seed)
    n_d, n_g = int(rng.integers(0, 9)), int(rng.integers(0, 9))
    g_boxes = random_boxes(rng, n_g, size=30)
    d_boxes = random_boxes(rng, n_d, size=30)
    scores = np.round(rng.uniform(size=n_d), 1)
    gt = make_gt([tuple(b) for b in g_boxes]) if n_g else Dataset((ImageInfo(1, 100, 100),), (), (Category(1, "a"),))
    dets = make_dets([(*b, s, 1, k) for k, (b, s) in enumerate(zip(d_boxes, scores))])
    res = match(dets, gt, t)
    expected = greedy_match_trace(d_boxes, scores, list(range(n_d)), g_boxes, t)
    assert res.tp.tolist() == [expected[i] for i in dets.ids]
    # each GT used at most once
    hits = res.matched_gt[res.matched_gt >= 0]
    assert len(hits) == len(set(hits.tolist()))


def test_ap_examples():
    gt = make_gt([(0, 0, 10, 10)])
    single = make_dets([(0, 0, 10, 10, 0.9, 1)])
    assert average_precision(single, match(single, gt), gt, 1) == 1.0
    fp_first = make_dets([(50, 50, 60, 60, 0.9, 1), (0, 0, 10, 10, 0.8, 1)])
    assert abs(average_precision(fp_first, match(fp_first, gt), gt, 1) - 0.5) < 1e-12
    empty = DetectionSet.empty()
    assert average_precision(empty, match(empty, gt), gt, 1) == 0.0
    assert average_precision(empty, match(empty, gt), make_gt([(0, 0, 1, 1)], n_categories=2), 2) is None


@settings(max_examples=150, deadline=None)
@given(st.lists(st.booleans(), max_size=30), st.integers(1, 10))
def test_ap_matches_brute_force(flags, extra):
    n_pos = sum(flags) + extra
    n = len(flags)
    curve = pr_curve(flags, np.linspace(1, 0.01, n) if n else [], np.arange(n), n_pos)
    assert curve.ap == pytest.approx(brute_force_ap(flags, n_pos), abs=1e-12)
    assert np.all(np.diff(curve.interpolated) <= 0)


def test_map_examples():
    boxes = [(0, 0, 10, 10), (30, 30, 50, 40)]
    gt = make_gt(boxes, categories=[1, 2])
    perfect = make_dets([(*b, 1.0, c) for b, c in zip(boxes, [1, 2])])
    assert map_metrics(perfect, gt) == {"mAP": 1.0, "mAP50": 1.0}
    # IoU exactly 0.7 with each GT
    jittered = make_dets([(0, 0, 10, 7, 1.0, 1), (30, 30, 44, 40, 1.0, 2)])
    m = map_metrics(jittered, gt)
    assert m["mAP"] == pytest.approx(0.5, abs=1e-12) and m["mAP50"] == 1.0
    assert map_metrics(DetectionSet.empty(), gt) == {"mAP": 0.0, "mAP50": 0.0}


def test_map_applies_cap():
    gt = make_gt([(0, 0, 10, 10)])
    fps = [(50 + k, 50, 60 + k, 60, 0.9, 1) for k in range(100)]
    dets = make_dets(fps + [(0, 0, 10, 10, 0.5, 1)])
    assert map_metrics(dets, gt)["mAP50"] == 0.0
    assert map_metrics(dets, gt, cap=None)["mAP50"] > 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_adding_fp_never_increases_ap(seed, above):
    rng = np.random.default_rng(seed)
    gt = make_gt([tuple(b) for b in random_boxes(rng, 4, size=40)])
    rows = [(*b, s, 1) for b, s in zip(random_boxes(rng, 8, size=40), rng.uniform(0.1, 0.9, 8))]
    base = make_dets(rows)
    fp_score = 0.95 if above else 0.05
    worse = make_dets(rows + [(200, 200, 210, 210, fp_score, 1)])
    for t in (0.5, 0.75):
        a = average_precision(base, match(base, gt, t), gt, 1)
        b = average_precision(worse, match(worse, gt, t), gt, 1)
        assert b <= a + 1e-12


def test_nms_improves_map50_with_duplicates():
    gt = make_gt([(0, 0, 10, 10), (40, 40, 60, 60)])
    dets = make_dets([(0, 0, 10, 10, 0.9, 1), (0, 0, 10, 9, 0.85, 1), (40, 40, 60, 60, 0.6, 1),
                      (40, 40, 60, 58, 0.5, 1)])
    raw = map_metrics(dets, gt)["mAP50"]
    assert map_metrics(NMS("hard", t_nms=0.5).transform(dets), gt)["mAP50"] > raw


def test_multi_image_matching_is_per_image():
    gt = Dataset((ImageInfo(1, 100, 100), ImageInfo(2, 100, 100)),
                 (GroundTruthObject(Box(0, 0, 10, 10), 1, 1, False, 1),),
                 (Category(1, "a"),))
    dets = DetectionSet([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.8], [1, 1], [2, 1], [0, 1])
    res = match(dets, gt)
    assert dict(zip(res.detection_ids.tolist(), res.tp.tolist())) == {0: False, 1: True}
