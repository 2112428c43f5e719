import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hierseg.masks import MFP, MTP
from hierseg.metrics import (METRICS, REPORT_CLASSES, AggregationError, ConfusionCounts, aggregate_folds,
                             binary_confusion, confusion, dice, full_contact_metrics, image_metrics, iou, mean_std,
                             precision, recall, report_from_rows)
from oracles import confusion_by_loops

pairs = st.tuples(st.integers(1, 16), st.integers(1, 16)).flatmap(
    lambda s: st.tuples(arrays(np.bool_, s), arrays(np.bool_, s)))


@given(pairs)
def test_confusion_matches_loops(pair):
    pred, target = pair
    c = binary_confusion(pred, target)
    assert (c.tp, c.fp, c.fn, c.tn) == confusion_by_loops(pred, target)
    assert c.total == pred.size


@given(pairs)
def test_dice_iou_identity(pair):
    c = binary_confusion(*pair)
    j, d = iou(c), dice(c)
    if j is None:
        assert d is None
    else:
        assert abs(d - 2 * j / (1 + j)) < 1e-12


def test_hand_values():
    c = ConfusionCounts(tp=3, fp=1, fn=2, tn=10)
    assert iou(c) == pytest.approx(0.5)
    assert dice(c) == pytest.approx(6 / 9)
    assert precision(c) == pytest.approx(0.75)
    assert recall(c) == pytest.approx(0.6)


def test_undefined_metrics():
    empty = ConfusionCounts(0, 0, 0, 4)
    assert iou(empty) is None and dice(empty) is None
    assert precision(empty) is None and recall(empty) is None
    missed = ConfusionCounts(0, 0, 5, 4)
    assert precision(missed) is None and recall(missed) == 0.0


def test_class_and_full_confusion():
    pred = np.array([[0, 1, 2, 2]])
    target = np.array([[0, 2, 2, 1]])
    assert confusion(pred, target, MTP) == ConfusionCounts(0, 1, 1, 2)
    assert confusion(pred, target, MFP) == ConfusionCounts(1, 1, 1, 1)
    assert full_contact_metrics(pred, target) == ConfusionCounts(3, 0, 0, 1)
    assert set(image_metrics(pred, target)) == set(REPORT_CLASSES)


def test_mean_std():
    assert mean_std([0.5, 0.7]) == pytest.approx((0.6, 0.1414213562373095, 2))
    assert mean_std([0.9]) == (0.9, 0.0, 1)
    assert mean_std([None, None]) == (None, None, 0)
    assert mean_std([1.0, None]) == (1.0, 0.0, 1)


def _images(values):
    return {img: {cls: {m: v for m in METRICS} for cls in REPORT_CLASSES} for img, v in values.items()}


def test_two_fold_aggregation():
    per_image = _images({"a": 0.5, "b": 0.7, "c": 0.9})
    report = aggregate_folds(per_image, {"a": 0, "b": 0, "c": 1})
    mean, mean_sd = report.summary["MTP"]["Dice"]
    assert mean == pytest.approx(0.75, abs=1e-12)
    assert mean_sd == pytest.approx(0.07071067811865475, abs=1e-12)
    assert report.folds[1]["FULL"]["IoU"] == (0.9, 0.0, 1)
    assert len(report.to_table().strip().splitlines()) == 1 + 12
    assert len(report.rows) == 9


def test_undefined_images_are_excluded():
    per_image = _images({"a": 0.5, "b": None, "c": 0.9})
    report = aggregate_folds(per_image, {"a": 0, "b": 0, "c": 1})
    assert report.folds[0]["MTP"]["Dice"] == (0.5, 0.0, 1)
    assert report.summary["MTP"]["Dice"] == pytest.approx((0.7, 0.0))
    all_none = aggregate_folds(_images({"a": None}), {"a": 0})
    assert all_none.summary["MFP"]["Recall"] == (None, None)
    assert "undefined" in all_none.to_table()


def test_aggregation_errors():
    per_image = _images({"a": 0.5})
    with pytest.raises(AggregationError):
        aggregate_folds(per_image, {})
    with pytest.raises(AggregationError):
        aggregate_folds(per_image, {"a": 0}, folds=[0, 1])


def test_report_recomputes_from_rows():
    rng = np.random.default_rng(1)
    per_image = {f"img{i}": {c: {m: float(rng.random()) for m in METRICS} for c in REPORT_CLASSES}
                 for i in range(9)}
    folds = {f"img{i}": i % 3 for i in range(9)}
    report = aggregate_folds(per_image, folds)
    rows = [json.loads(line) for line in report.rows_jsonl().splitlines()]
    again = report_from_rows(rows)
    for cls in REPORT_CLASSES:
        for m in METRICS:
            np.testing.assert_allclose(again[cls][m], report.summary[cls][m], atol=1e-12)
    json.loads(report.to_json())
