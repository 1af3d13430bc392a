import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaisnet.evaluation import (Detection, EvalResult, GroundTruth, coco_ap, format_table,
                                interpolated_ap, mask_iou, match_and_score, write_report)
from gaisnet.geometry import RoiBox

import ap_oracle

SHAPE = (20, 30)


def rect_mask(x0, y0, x1, y1, shape=SHAPE):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


def gt_rect(x0, y0, x1, y1, cat=0, img=0):
    return GroundTruth(img, cat, RoiBox(x0, y0, x1, y1), rect_mask(x0, y0, x1, y1))


def det_from_gt(g, score=0.9, det_id=0, cat=None):
    box = g.box
    m = g.mask[int(box.y0):int(box.y1), int(box.x0):int(box.x1)]
    return Detection(box, g.category if cat is None else cat, score, m, image_id=g.image_id,
                     det_id=det_id)


# IoU -----------------------------------------------------------------------------


def test_mask_iou_cases():
    a = rect_mask(2, 2, 6, 6)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, rect_mask(10, 10, 12, 12)) == 0.0
    two = np.zeros((1, 4), bool)
    two[0, :2] = True
    four = np.ones((1, 4), bool)
    assert mask_iou(two, four) == 0.5
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


@settings(max_examples=100, deadline=None)
@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_mask_iou_symmetric_and_exact(a, b):
    assert mask_iou(a, b) == mask_iou(b, a)
    assert mask_iou(a, b) == float(ap_oracle.exact_mask_iou(a, b))
    if a.any():
        assert mask_iou(a, a) == 1.0


def test_mask_iou_rejects_bad_masks():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        mask_iou(np.full((2, 2), 0.5), np.zeros((2, 2)))


# matching --------------------------------------------------------------------------


def test_exact_detection_is_tp():
    g = gt_rect(3, 3, 10, 12)
    assert match_and_score([det_from_gt(g)], [g], 0.5).tolist() == [True]


def test_two_detections_one_gt():
    g = gt_rect(3, 3, 10, 12)
    dets = [det_from_gt(g, 0.9, 0), det_from_gt(g, 0.6, 1)]
    assert match_and_score(dets, [g], 0.5).tolist() == [True, False]


def test_wrong_category_is_fp():
    g = gt_rect(3, 3, 10, 12)
    assert match_and_score([det_from_gt(g, cat=1)], [g], 0.5).tolist() == [False]


# AP ------------------------------------------------------------------------------


def scene_gts():
    return [gt_rect(1, 1, 8, 9, 0), gt_rect(12, 2, 26, 17, 1), gt_rect(3, 12, 9, 19, 2, img=1)]


def test_perfect_detections_score_100():
    gts = scene_gts()
    res = coco_ap([det_from_gt(g, det_id=i) for i, g in enumerate(gts)], gts)
    assert res.AP == res.AP50 == res.AP75 == 100.0
    box = coco_ap([det_from_gt(g, det_id=i) for i, g in enumerate(gts)], gts, "bbox")
    assert box.AP == 100.0


def test_no_detections_score_zero():
    assert coco_ap([], scene_gts()).AP == 0.0


def test_empty_strata_are_none():
    # a single mid-sized object: neither small (< 600/64) nor large (> 600/9)
    g = gt_rect(0, 0, 5, 4)
    res = coco_ap([det_from_gt(g)], [g])
    assert res.AP == 100.0
    assert res.AP_S is None and res.AP_L is None
    tiny = gt_rect(0, 0, 2, 2)
    assert coco_ap([det_from_gt(tiny)], [tiny]).AP_S == 100.0


def test_small_stratum_ignores_large_objects():
    small, large = gt_rect(0, 0, 3, 3, 0), gt_rect(5, 2, 25, 18, 0)
    res = coco_ap([det_from_gt(small, det_id=0)], [small, large])
    assert res.AP_S == 100.0
    assert res.AP_L == 0.0
    assert res.AP < 100.0


def test_max_dets_caps_per_image_and_category():
    g = gt_rect(3, 3, 10, 12)
    junk = [Detection(RoiBox(20, 10, 25, 15), 0, 0.99, np.ones((5, 5), bool), det_id=i)
            for i in range(3)]
    good = det_from_gt(g, score=0.5, det_id=10)
    assert coco_ap(junk + [good], [g], max_dets=3).AP == 0.0
    assert coco_ap(junk + [good], [g], max_dets=4).AP > 0.0


def test_interpolated_ap_hand_case():
    # TP, FP, TP with two positives: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    ap, q = interpolated_ap(np.array([True, False, True]), np.zeros(3, bool), 2)
    assert q[50] == 1.0 and q[51] == pytest.approx(2 / 3) and q[100] == pytest.approx(2 / 3)
    assert ap == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101)
    assert interpolated_ap(np.array([True]), np.zeros(1, bool), 0) is None


def test_oracle_on_hand_case():
    gts = [gt_rect(0, 0, 6, 6), gt_rect(10, 0, 16, 6), gt_rect(20, 10, 26, 16)]
    dets = [det_from_gt(gts[0], 0.9, 0), det_from_gt(gts[1], 0.4, 1),
            Detection(RoiBox(0, 10, 6, 16), 0, 0.7, np.ones((6, 6), bool), det_id=2)]
    ap, _ = ap_oracle.brute_force(dets, gts)
    assert coco_ap(dets, gts).AP == pytest.approx(float(ap), abs=1e-12)
    # ranks TP, FP, TP over three positives: precision 1 up to recall 1/3 (34
    # recall points), 2/3 up to recall 2/3 (33 points), 0 beyond
    assert float(ap) == pytest.approx(100 * 56 / 101, abs=1e-9)


def _precision_as_float(q):
    return np.array([[[float(x) for x in qk] for qk in qt] for qt in q]).transpose(0, 2, 1)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        dets, gts = ap_oracle.random_case(rng)
        ap, q = ap_oracle.brute_force(dets, gts)
        res = coco_ap(dets, gts)
        np.testing.assert_array_equal(res.precision, _precision_as_float(q))
        assert res.AP == pytest.approx(float(ap), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_input_order_invariance(seed):
    rng = np.random.default_rng(seed)
    dets, gts = ap_oracle.random_case(rng)
    a = coco_ap(dets, gts)
    b = coco_ap([dets[i] for i in rng.permutation(len(dets))], gts)
    assert a.as_dict() == b.as_dict()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_monotonicity(seed):
    rng = np.random.default_rng(seed)
    dets, gts = ap_oracle.random_case(rng)
    base = coco_ap(dets, gts)
    g = gts[rng.integers(len(gts))]
    top = Detection(RoiBox(0, 0, 6, 6), g.category, 1.0, g.mask, image_id=g.image_id, det_id=-1)
    assert coco_ap([top] + dets, gts).AP >= base.AP - 1e-12
    fp = Detection(RoiBox(0, 0, 6, 6), g.category, 1e-6, np.zeros((6, 6), bool),
                   image_id=g.image_id, det_id=999)
    assert coco_ap(dets + [fp], gts).AP50 <= base.AP50


# detections and reports --------------------------------------------------------


def test_detection_round_trip_and_paste():
    m = rect_mask(0, 0, 3, 2, (4, 5))
    d = Detection(RoiBox(28, 18, 33, 22), 2, 0.8, m, mask_score=0.5, image_id=3, det_id=7)
    assert d.score == pytest.approx(0.4)
    back = Detection.from_dict(json.loads(json.dumps(d.to_dict())))
    np.testing.assert_array_equal(back.mask, d.mask)
    assert back.box == d.box and back.det_id == 7
    pasted = d.paste(SHAPE)
    assert pasted.sum() == 4  # clipped at the image border
    with pytest.raises(ValueError):
        Detection(RoiBox(0, 0, 5, 5), 0, 0.5, np.ones((4, 4), bool))


def test_report_and_table_agree(tmp_path):
    gts = scene_gts()
    res = coco_ap([det_from_gt(gts[0]), det_from_gt(gts[1], det_id=1)], gts)
    text = format_table({"full": res})
    write_report(tmp_path / "r.json", {"full": {"segm": res}})
    stored = json.loads((tmp_path / "r.json").read_text())["full"]["segm"]
    row = text.splitlines()[2].split("|")
    assert float(row[1]) == pytest.approx(stored["AP"], abs=0.05)
    assert isinstance(res, EvalResult)
