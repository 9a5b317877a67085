import numpy as np
import pytest

from ioucal.calibration import FeatureRecipe, fit_values
from ioucal.evaluation import map_metrics, tp_labels
from ioucal.geometry import pairwise_iou
from ioucal.metrics import ece
from ioucal.suppression import NMS
from ioucal.synth import SynthConfig, generate, jitter_to_iou, write_world
from ioucal.exceptions import SynthError


def test_same_seed_same_bytes(tmp_path):
    cfg = SynthConfig(seed=5, images=30, duplicate_count=(1, 3), fp_rate=0.7)
    write_world(cfg, tmp_path / "a")
    write_world(cfg, tmp_path / "b")
    for name in ("gt.json", "dets.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = SynthConfig(seed=6, images=30, duplicate_count=(1, 3), fp_rate=0.7)
    assert generate(other)[1] != generate(cfg)[1]


def test_duplicates_in_range_and_below_primary():
    cfg = SynthConfig(seed=1, images=80, duplicate_count=(2, 4), duplicate_iou=(0.6, 0.9))
    _, dets, roles = generate(cfg, with_roles=True)
    row_of = {int(i): k for k, i in enumerate(dets.ids)}
    dup = np.flatnonzero(roles["role"] == 1)
    assert len(dup) >= 2 * 80
    for k in dup:
        p = row_of[int(roles["parent"][k])]
        overlap = pairwise_iou(dets.boxes[[k]], dets.boxes[[p]])[0, 0]
        assert 0.6 - 1e-9 <= overlap <= 0.9 + 1e-9
        assert dets.scores[k] < dets.scores[p]


def test_spurious_detections_miss_all_gt():
    gt, dets, roles = generate(SynthConfig(seed=2, images=60, fp_rate=2.0), with_roles=True)
    fp = roles["role"] == 2
    assert fp.any()
    tp, _ = tp_labels(dets, gt, 0.05)
    assert not tp[fp].any()


def test_boxes_stay_inside_image():
    cfg = SynthConfig(seed=3, images=50, duplicate_count=(0, 3), fp_rate=1.0)
    _, dets = generate(cfg)
    w, h = cfg.image_size
    b = dets.boxes
    assert b[:, 0].min() >= 0 and b[:, 1].min() >= 0 and b[:, 2].max() <= w and b[:, 3].max() <= h


def test_jitter_hits_target():
    rng = np.random.default_rng(0)
    box = (100.0, 100.0, 180.0, 160.0)
    for target in (0.1, 0.5, 0.77, 0.95):
        out = jitter_to_iou(box, target, rng, 640, 480)
        got = pairwise_iou(np.array([box]), np.array([out]))[0, 0]
        assert target <= got < target + 1e-9


def test_infeasible_configs_rejected():
    with pytest.raises(SynthError):
        SynthConfig(box_scale=(100, 400))
    with pytest.raises(SynthError):
        SynthConfig(duplicate_iou=(0.9, 0.6))
    with pytest.raises(SynthError):
        SynthConfig(duplicate_iou=(0.5, 1.0))
    with pytest.raises(SynthError):
        SynthConfig(confidence_law="cubic")
    with pytest.raises(SynthError):
        jitter_to_iou((0.0, 0.0, 600.0, 400.0), 0.3, np.random.default_rng(0), 640, 480, tries=5)


def test_perfect_world_scores_one():
    # every primary is placed on its object; one object per image so no primary can reach a neighbour
    cfg = SynthConfig(seed=4, images=60, objects_per_image=(1, 1), confidence_law="overconfident_pow",
                      law_param=0.0)
    gt, dets = generate(cfg)
    assert len(dets) == len(gt.ground_truth)
    assert map_metrics(dets, gt)["mAP50"] == 1.0
    assert map_metrics(NMS("hard", t_nms=0.5).transform(dets), gt)["mAP50"] == 1.0


def test_duplicates_hurt_raw_map50():
    cfg = SynthConfig(seed=5, images=150, duplicate_count=(3, 3), duplicate_iou=(0.7, 0.9))
    gt, dets = generate(cfg)
    assert map_metrics(dets, gt)["mAP50"] < map_metrics(NMS("hard", t_nms=0.5).transform(dets), gt)["mAP50"]


def test_match_probability_laws():
    s = np.array([0.25, 0.5, 0.81])
    np.testing.assert_allclose(SynthConfig().match_probability(s), s)
    np.testing.assert_allclose(SynthConfig(confidence_law="overconfident_pow", law_param=2).match_probability(s),
                               s ** 2)
    skew = SynthConfig(confidence_law="logistic_skew", law_param=1.0).match_probability(s)
    np.testing.assert_allclose(skew, s, rtol=1e-12)


def test_overconfident_law_is_miscalibrated_then_fixed():
    cfg = SynthConfig(seed=6, images=12_500, objects_per_image=(8, 8), confidence_law="overconfident_pow",
                      law_param=2.0)
    gt, dets = generate(cfg)
    assert len(dets) >= 100_000
    y, _ = tp_labels(dets, gt, 0.5)
    assert ece(y, dets.scores) > 0.05
    model = fit_values(dets.scores[:, None], y, FeatureRecipe("beta", ("confidence",), False))
    assert ece(y, model.predict(dets.scores[:, None])) < 0.02
