import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surgseg import metrics as M
from surgseg.data import TaskSpec
from surgseg.errors import DataError

# ---------------------------------------------------------------------------
# brute-force oracles (kept deliberately dumb)
# ---------------------------------------------------------------------------


def dice_oracle(a, b):
    pa = {tuple(p) for p in np.argwhere(a)}
    pb = {tuple(p) for p in np.argwhere(b)}
    if not pa and not pb:
        return 1.0
    return 2.0 * len(pa & pb) / (len(pa) + len(pb))


def hausdorff_oracle(a, b):
    pa = [tuple(p) for p in np.argwhere(a)]
    pb = [tuple(p) for p in np.argwhere(b)]
    if not pa or not pb:
        return None

    def directed(u, v):
        return max(min(math.dist(p, q) for q in v) for p in u)

    return max(directed(pa, pb), directed(pb, pa))


def confusion_oracle(pred, gt, cls):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p == cls and g == cls:
            tp += 1
        elif p == cls:
            fp += 1
        elif g == cls:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


# ---------------------------------------------------------------------------
# frozen examples
# ---------------------------------------------------------------------------


def _mask(points, shape=(4, 4)):
    m = np.zeros(shape, bool)
    for r, c in points:
        m[r, c] = True
    return m


def test_dice_frozen_examples():
    assert M.dice(_mask([(0, 0), (0, 1)]), _mask([(0, 0)])) == pytest.approx(2 / 3)
    assert M.dice(_mask([]), _mask([])) == 1.0
    assert M.dice(_mask([(0, 0)]), _mask([(3, 3)])) == 0.0
    assert M.dice(_mask([(1, 2)]), _mask([(1, 2)])) == 1.0


def test_hausdorff_frozen_examples():
    assert M.hausdorff(_mask([(0, 0)], (5, 5)), _mask([(3, 4)], (5, 5))) == pytest.approx(5.0)
    assert M.hausdorff(_mask([]), _mask([(0, 0)])) is None
    assert M.hausdorff(_mask([(2, 2)]), _mask([(2, 2)])) == 0.0


def test_specificity_sensitivity_frozen():
    counts = M.ConfusionCounts(tp=3, fp=1, tn=10, fn=2)
    assert M.specificity(counts) == pytest.approx(10 / 11)
    assert M.sensitivity(counts) == pytest.approx(3 / 5)
    # zero-denominator conventions
    assert M.specificity(M.ConfusionCounts(tp=4, fp=0, tn=0, fn=0)) == 1.0
    assert M.sensitivity(M.ConfusionCounts(tp=0, fp=2, tn=2, fn=0)) == 1.0


def test_confusion_counts_small_example():
    pred = np.array([[0, 1], [1, 2]])
    gt = np.array([[0, 1], [2, 2]])
    c = M.confusion_counts(pred, gt, 1)
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 2, 0)
    assert c.total == pred.size


# ---------------------------------------------------------------------------
# oracle equivalence on random masks
# ---------------------------------------------------------------------------


def test_oracle_equivalence_random_pairs(rng):
    task = TaskSpec.from_kind("parts")
    for _ in range(150):
        pred = rng.integers(0, task.num_classes, size=(8, 8))
        gt = rng.integers(0, task.num_classes, size=(8, 8))
        for cls in range(task.num_classes):
            pm, gm = pred == cls, gt == cls
            assert M.dice(pm, gm) == pytest.approx(dice_oracle(pm, gm), abs=1e-12)
            expected_hd = hausdorff_oracle(pm, gm)
            got_hd = M.hausdorff(pm, gm)
            if expected_hd is None:
                assert got_hd is None
            else:
                assert got_hd == pytest.approx(expected_hd, abs=1e-9)
            c = M.confusion_counts(pred, gt, cls)
            assert (c.tp, c.fp, c.tn, c.fn) == confusion_oracle(pred, gt, cls)


# ---------------------------------------------------------------------------
# metric axioms
# ---------------------------------------------------------------------------

mask_strategy = arrays(bool, (6, 6), elements=st.booleans())


@settings(max_examples=60, deadline=None)
@given(a=mask_strategy, b=mask_strategy)
def test_dice_symmetry_and_bounds(a, b):
    d = M.dice(a, b)
    assert 0.0 <= d <= 1.0
    assert d == M.dice(b, a)
    assert M.dice(a, a) == 1.0


@settings(max_examples=40, deadline=None)
@given(a=mask_strategy, b=mask_strategy, c=mask_strategy)
def test_hausdorff_metric_properties(a, b, c):
    if not (a.any() and b.any() and c.any()):
        return
    dab, dba = M.hausdorff(a, b), M.hausdorff(b, a)
    assert dab == pytest.approx(dba, abs=1e-9)  # symmetry
    assert dab >= 0.0
    assert M.hausdorff(a, a) == 0.0
    dac, dcb = M.hausdorff(a, c), M.hausdorff(c, b)
    assert dab <= dac + dcb + 1e-9  # triangle inequality


# ---------------------------------------------------------------------------
# multiclass reports
# ---------------------------------------------------------------------------


def test_evaluate_multiclass_rows(rng):
    task = TaskSpec.from_kind("parts")
    pred = rng.integers(0, 4, size=(8, 8))
    gt = rng.integers(0, 4, size=(8, 8))
    report = M.evaluate_multiclass(pred, gt, task)
    assert report.task == "parts"
    assert [m.class_index for m in report.per_class] == [0, 1, 2, 3]
    assert [m.class_name for m in report.per_class] == list(task.class_names)
    for m in report.per_class:
        assert m.dice == pytest.approx(dice_oracle(pred == m.class_index, gt == m.class_index))
        assert m.gt_pixels == int((gt == m.class_index).sum())
        assert m.pred_pixels == int((pred == m.class_index).sum())


def test_evaluate_multiclass_rejects_out_of_range():
    task = TaskSpec.from_kind("binary")
    with pytest.raises(DataError, match="outside"):
        M.evaluate_multiclass(np.array([[2]]), np.array([[0]]), task)
    with pytest.raises(DataError, match="shape"):
        M.evaluate_multiclass(np.zeros((2, 2), int), np.zeros((2, 3), int), task)


def test_mean_foreground_dice_conventions():
    task = TaskSpec.from_kind("parts")
    gt = np.zeros((4, 4), int)
    gt[0, 0] = 1
    pred = np.zeros((4, 4), int)
    pred[0, 0] = 1
    pred[1, 1] = 2  # class 2 absent from gt: ignored by the headline
    assert M.mean_foreground_dice(pred, gt, task) == 1.0
    # gt all background: fall back to predicted classes
    assert M.mean_foreground_dice(pred, np.zeros((4, 4), int), task) == 0.0
    # nothing anywhere: perfect agreement on absence
    assert M.mean_foreground_dice(np.zeros((4, 4), int), np.zeros((4, 4), int), task) == 1.0


def test_aggregate_reports(rng):
    task = TaskSpec.from_kind("binary")
    r1 = M.evaluate_multiclass(np.ones((4, 4), int), np.ones((4, 4), int), task)
    r2 = M.evaluate_multiclass(np.zeros((4, 4), int), np.ones((4, 4), int), task)
    agg = M.aggregate_reports([r1, r2])
    assert agg.num_samples == 2
    assert agg.mean_foreground_dice == pytest.approx((1.0 + 0.0) / 2)
    fg = agg.per_class[1]
    assert fg.dice == pytest.approx((1.0 + 0.0) / 2)
    # r1 foreground hausdorff defined (0.0), r2 undefined: average over defined only
    assert fg.hausdorff == pytest.approx(0.0)
    # background: r1 has empty gt+pred background (hd None), r2 pred all background
    assert agg.per_class[0].hausdorff is None  # never defined on both sides
    with pytest.raises(DataError, match="zero reports"):
        M.aggregate_reports([])


def test_report_serialization(rng):
    task = TaskSpec.from_kind("binary")
    report = M.evaluate_multiclass(
        rng.integers(0, 2, size=(6, 6)), rng.integers(0, 2, size=(6, 6)), task
    )
    text = report.to_text()
    assert "mean_foreground_dice" in text and "instrument" in text
    import json

    parsed = json.loads(report.to_json())
    assert parsed["task"] == "binary"
    assert len(parsed["per_class"]) == 2
