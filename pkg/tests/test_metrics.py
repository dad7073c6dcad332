import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ap_oracle
from defectnet.boxes import Box, iou
from defectnet.detector import Detection
from defectnet.metrics import (ConfusionCounts, average_precision, confusion_counts, evaluate, mean_ap,
                               per_class_recall, pr_curve, write_report_csv)


def test_hand_fixture_fp_then_tp():
    gts = {"a": [(0, 0, 10, 10)]}
    dets = [("a", 0.9, (50, 50, 60, 60)), ("a", 0.8, (0, 0, 10, 10))]
    assert average_precision(dets, gts) == 0.5


def test_perfect_and_empty():
    gts = {"a": [(0, 0, 10, 10), (20, 20, 30, 30)], "b": [(5, 5, 9, 9)]}
    dets = [("a", 0.9, (0, 0, 10, 10)), ("b", 0.8, (5, 5, 9, 9)), ("a", 0.7, (20, 20, 30, 30)),
            ("a", 0.1, (70, 70, 80, 80))]
    assert average_precision(dets, gts) == 1.0
    assert average_precision([], gts) == 0.0
    assert average_precision(dets, {"a": []}) is None


def test_duplicate_detection_is_false_positive():
    gts = {"a": [(0, 0, 10, 10)]}
    dets = [("a", 0.9, (0, 0, 10, 10)), ("a", 0.8, (0, 0, 10, 10))]
    assert pr_curve(dets, gts).tp.tolist() == [True, False]


def test_ties_keep_insertion_order():
    gts = {"a": [(0, 0, 10, 10)]}
    tp_first = [("a", 0.5, (0, 0, 10, 10)), ("a", 0.5, (40, 40, 50, 50))]
    assert average_precision(tp_first, gts) == 1.0
    assert average_precision(tp_first[::-1], gts) == 0.5


def test_eleven_point_mode():
    gts = {"a": [(0, 0, 10, 10)]}
    dets = [("a", 0.9, (50, 50, 60, 60)), ("a", 0.8, (0, 0, 10, 10))]
    assert average_precision(dets, gts, mode="11point") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        average_precision(dets, gts, mode="coco")


# fixtures: up to 3 GT boxes on two images; detections are GT copies, shifted copies or background
GT_POOL = [("i0", (0, 0, 10, 10)), ("i0", (20, 0, 30, 10)), ("i1", (0, 0, 12, 12))]
fixture_st = st.tuples(
    st.integers(1, 3),
    st.lists(st.tuples(st.integers(0, 2), st.sampled_from(["exact", "shift", "far", "other_image"])),
             min_size=0, max_size=6),
    st.permutations(list(range(6))),
)


def _build_fixture(n_gt, spec, ranks):
    gts = {"i0": [], "i1": []}
    for img, box in GT_POOL[:n_gt]:
        gts[img].append(box)
    dets = []
    for k, (g, kind) in enumerate(spec):
        img, (x1, y1, x2, y2) = GT_POOL[g % n_gt]
        if kind == "shift":
            box = (x1 + 3, y1 + 2, x2 + 3, y2 + 2)
        elif kind == "far":
            box = (x1 + 60, y1 + 60, x2 + 60, y2 + 60)
        else:
            box = (x1, y1, x2, y2)
        if kind == "other_image":
            img = "i1" if img == "i0" else "i0"
        dets.append((img, 1.0 - ranks[k] / 10.0, box))
    return dets, gts


@settings(max_examples=300, deadline=None)
@given(fixture=fixture_st)
def test_ap_equals_threshold_enumeration_oracle(fixture):
    dets, gts = _build_fixture(*fixture)
    assert average_precision(dets, gts) == float(ap_oracle(dets, gts))


@settings(max_examples=100, deadline=None)
@given(fixture=fixture_st)
def test_ap_invariant_under_monotone_score_transform(fixture):
    dets, gts = _build_fixture(*fixture)
    squashed = [(i, math.exp(5 * s) - 3.0, b) for i, s, b in dets]
    assert average_precision(dets, gts) == average_precision(squashed, gts)


@settings(max_examples=100, deadline=None)
@given(fixture=fixture_st)
def test_recall_nondecreasing(fixture):
    dets, gts = _build_fixture(*fixture)
    curve = pr_curve(dets, gts)
    assert np.all(np.diff(curve.recall) >= 0)


def test_mean_ap():
    assert mean_ap({"a": 1.0, "b": 0.5}) == 0.75
    assert mean_ap([0.3]) == 0.3
    assert mean_ap({"a": 1.0, "b": None, "c": 0.0}) == 0.5
    with pytest.raises(ValueError):
        mean_ap({"a": None})


def test_per_class_recall():
    gts = {"a": [(0, 0, 10, 10), (20, 20, 30, 30), (40, 40, 50, 50)]}
    dets = [("a", 0.9, (0, 0, 10, 10)), ("a", 0.6, (20, 20, 30, 30)), ("a", 0.4, (40, 40, 50, 50))]
    assert per_class_recall(dets, gts, conf_thr=0.5) == pytest.approx(2 / 3)
    assert per_class_recall(dets, gts, conf_thr=0.0) == 1.0
    assert per_class_recall([], gts) == 0.0
    assert per_class_recall(dets, {"a": []}) is None


# ---------------------------------------------------------------- image level


def test_confusion_examples():
    c = ConfusionCounts(tp=3, fp=1, tn=5, fn=1)
    assert (c.precision, c.recall, c.accuracy) == (75.0, 75.0, 80.0)
    counts = confusion_counts([("a", []), ("b", [0.2])], {"a": [], "b": []}, 0.5)
    assert counts == ConfusionCounts(tn=2)
    assert counts.accuracy == 100.0


def test_confusion_thresholding_and_duplicates():
    ann = {"a": [(0, 0, 1, 1)], "b": [], "c": [(0, 0, 1, 1)], "d": []}
    dets = [("a", [0.9]), ("b", [0.7]), ("c", [0.3]), ("d", [])]
    assert confusion_counts(dets, ann, 0.5) == ConfusionCounts(tp=1, fp=1, tn=1, fn=1)
    with pytest.raises(ValueError, match="duplicate"):
        confusion_counts([("a", []), ("a", [])], ann)


def test_zero_denominator_warns():
    c = ConfusionCounts(tn=4)
    with pytest.warns(RuntimeWarning, match="precision"):
        assert c.precision == 0.0
    with pytest.warns(RuntimeWarning):
        assert c.recall == 0.0


@settings(max_examples=100, deadline=None)
@given(tp=st.integers(0, 20), fp=st.integers(0, 20), tn=st.integers(0, 20), fn=st.integers(0, 20))
def test_confusion_ratios_in_range(tp, fp, tn, fn):
    c = ConfusionCounts(tp, fp, tn, fn)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for v in (c.precision, c.recall, c.accuracy):
            assert 0.0 <= v <= 100.0
    assert c.total == tp + fp + tn + fn


# ---------------------------------------------------------------- dataset report


def _det(box, cls, score):
    return Detection(Box(*map(float, box)), cls, score)


def six_detection_fixture():
    """Two images, four GT boxes over three classes, six ranked detections."""
    ann = {
        "x": [((0, 0, 10, 10), "brokenend"), ((20, 20, 30, 30), "sundries")],
        "y": [((0, 0, 20, 20), "oilstains"), ((30, 30, 40, 40), "sundries")],
        "z": [],
    }
    dets = [
        ("x", [_det((0, 0, 10, 10), 0, 0.95), _det((21, 21, 31, 31), 4, 0.6), _det((50, 50, 60, 60), 4, 0.8)]),
        ("y", [_det((0, 0, 20, 20), 3, 0.7), _det((30, 30, 40, 40), 3, 0.55)]),
        ("z", [_det((0, 0, 5, 5), 1, 0.3)]),
    ]
    return dets, ann


def test_six_detection_fixture_hand_trace():
    dets, ann = six_detection_fixture()
    rep = evaluate(dets, ann, iou_thr=0.5, conf_thr=0.5)
    # brokenend: one TP -> 1. oilstains: TP(0.7) then FP(0.55) -> 1.
    # sundries: FP(0.8), TP(0.6 at IoU 81/119) with 2 GT -> recall 1/2 at precision 1/2 -> 0.25
    assert rep.ap["brokenend"] == 1.0
    assert rep.ap["oilstains"] == 1.0
    assert rep.ap["sundries"] == 0.25
    assert rep.ap["brokenpick"] is None and rep.ap["felter"] is None
    assert rep.map == pytest.approx(0.75)
    assert rep.recall["sundries"] == 0.5
    # images x, y predicted defective and are defective; z has only a 0.3 detection
    assert (rep.counts.tp, rep.counts.fp, rep.counts.tn, rep.counts.fn) == (2, 0, 1, 0)


def test_report_csv(tmp_path):
    dets, ann = six_detection_fixture()
    rep = evaluate(dets, ann)
    rep.time_per_image = 0.125
    write_report_csv(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "class,AP,recall"
    assert lines[1] == "brokenend,100.0000,100.0000"
    assert lines[2] == "brokenpick,,"
    assert lines[6] == "summary,mAP,precision,recall,accuracy,conf_thr,iou_thr"
    assert lines[7] == "all,75.0000,100.0000,100.0000,100.0000,0.5,0.5"
    assert lines[8:] == ["timing,testing_time_s_per_image", "all,0.125000"]
