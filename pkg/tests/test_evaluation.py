import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcal.evaluation import average_precision, evaluate, match_frame, postprocess_frame

from conftest import det, gt_obj


def gt_as_dets(gt, num_classes=2):
    return {v: [[det(o.box.to_list(), o.class_id, 0.9, num_classes) for o in objs] for objs in frames]
            for v, frames in gt.items()}


GT = {"v": [[gt_obj([0, 0, 10, 10], 0), gt_obj([20, 20, 40, 40], 1)], [], [gt_obj([5, 5, 15, 25], 0)]]}


def test_gt_as_detections_is_perfect():
    rep = evaluate(gt_as_dets(GT), GT, 2)
    assert rep.mAP == 1.0
    assert rep.per_class_ap == {0: 1.0, 1: 1.0}
    assert (rep.tp, rep.fp, rep.fn) == (3, 0, 0)


def test_empty_detections_score_zero():
    rep = evaluate({"v": [[], [], []]}, GT, 2)
    assert rep.mAP == 0.0
    assert rep.fn == 3


def test_two_gt_one_tp_one_fp():
    # ranked: TP (recall 1/2, precision 1), then FP; area under the envelope is 1/2
    gt = {"v": [[gt_obj([0, 0, 10, 10]), gt_obj([50, 50, 60, 60])]]}
    dets = {"v": [[det([0, 0, 10, 10], 0, 0.9), det([100, 50, 110, 60], 0, 0.8)]]}
    rep = evaluate(dets, gt, 2)
    assert rep.per_class_ap == {0: 0.5}
    assert rep.mAP == 0.5
    # eleven-point: precision 1 at recall 0, 0.1, ..., 0.5, zero above
    assert evaluate(dets, gt, 2, interpolation="11pt").mAP == pytest.approx(6 / 11)


def test_fp_ranked_first_halves_precision():
    # FP first then TP: precision 1/2 at recall 1
    tp = np.array([False, True])
    assert average_precision(tp, 1) == 0.5


def test_duplicate_detection_counts_as_fp():
    gts = [gt_obj([0, 0, 10, 10])]
    tp, used = match_frame([det([0, 0, 10, 10], 0, 0.9), det([0, 0, 10, 11], 0, 0.95)], gts)
    assert tp == [False, True] and used == [True]


def test_match_takes_best_unmatched_gt_of_same_class():
    gts = [gt_obj([0, 0, 10, 10], 0), gt_obj([2, 0, 12, 10], 0), gt_obj([2, 0, 12, 10], 1)]
    tp, used = match_frame([det([2, 0, 12, 10], 0, 0.9), det([0, 0, 10, 10], 0, 0.8)], gts)
    assert tp == [True, True] and used == [True, True, False]


def test_iou_threshold_is_strict():
    # IoU exactly 0.5 does not match
    tp, _ = match_frame([det([0, 0, 20, 10])], [gt_obj([0, 0, 10, 10])], 0.5)
    assert tp == [False]


def test_postprocess_nms_then_threshold():
    frame = [det([0, 0, 10, 10], 0, 0.9), det([0, 0, 10, 11], 0, 0.6), det([30, 30, 40, 40], 0, 0.4)]
    assert postprocess_frame(frame, 0.5, 0.5) == [frame[0]]
    assert postprocess_frame(frame, 0.0, None) == frame


def test_classes_without_gt_are_skipped_in_mean():
    gt = {"v": [[gt_obj([0, 0, 10, 10], 0)]]}
    dets = {"v": [[det([0, 0, 10, 10], 0), det([50, 50, 60, 60], 1)]]}
    rep = evaluate(dets, gt, 2)
    assert rep.per_class_ap == {0: 1.0} and rep.mAP == 1.0 and rep.fp == 1


def test_report_json(tmp_path):
    rep = evaluate(gt_as_dets(GT), GT, 2)
    rep.save(tmp_path / "e.json", ("a", "b"))
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["mAP"] == 1.0 and doc["classes"] == ["a", "b"] and doc["per_class_ap"] == {"0": 1.0, "1": 1.0}


def test_class_count_mismatch_rejected():
    with pytest.raises(ValueError):
        evaluate({"v": [[det([0, 0, 1, 1], 0, 0.9, num_classes=3)], [], []]}, GT, 2)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.booleans(), max_size=30), st.integers(1, 30))
def test_ap_bounded_and_monotone_in_hits(flags, extra_gt):
    num_gt = sum(flags) + extra_gt - 1 or 1
    ap = average_precision(np.array(flags, dtype=bool), num_gt)
    assert 0.0 <= ap <= 1.0
    # turning the first miss into a hit never lowers AP
    if False in flags and sum(flags) < num_gt:
        better = list(flags)
        better[better.index(False)] = True
        assert average_precision(np.array(better), num_gt) >= ap - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.integers(0, 1)), max_size=4),
                min_size=1, max_size=5))
def test_ground_truth_as_detections_always_perfect(frames):
    gt = {"v": [[gt_obj([x, y, x + 12, y + 12], c, i) for i, (x, y, c) in enumerate(fr)] for fr in frames]}
    if not any(gt["v"]):
        return
    # overlapping same-class GT boxes could be merged by NMS, so evaluate without it
    rep = evaluate(gt_as_dets(gt), gt, 2, nms_thresh=None)
    assert rep.mAP == 1.0
