import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nicelab.metrics import (SPLITS, THRESHOLDS, MetricsReport, PhraseResult, average_recall, box_iou,
                             evaluate_dataset, inconsistency_error, mask_iou, recall_curve, report_from_results)


def test_mask_iou_examples():
    a = np.zeros((4, 4))
    a[:, :2] = 1
    b = np.zeros((4, 4))
    b[:, 1:3] = 1
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, 1 - a) == 0.0
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_box_iou_examples():
    assert box_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert box_iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0


def test_box_iou_monte_carlo():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a = np.concatenate([np.sort(rng.random(2) * 10), np.sort(rng.random(2) * 10)])[[0, 2, 1, 3]]
        b = np.concatenate([np.sort(rng.random(2) * 10), np.sort(rng.random(2) * 10)])[[0, 2, 1, 3]]
        # sample the enclosing rectangle so small boxes still get many points
        lo = np.minimum(a[:2], b[:2])
        hi = np.maximum(a[2:], b[2:])
        pts = lo + rng.random((40000, 2)) * (hi - lo)
        ina = (pts[:, 0] >= a[0]) & (pts[:, 0] < a[2]) & (pts[:, 1] >= a[1]) & (pts[:, 1] < a[3])
        inb = (pts[:, 0] >= b[0]) & (pts[:, 0] < b[2]) & (pts[:, 1] >= b[1]) & (pts[:, 1] < b[3])
        est = np.count_nonzero(ina & inb) / np.count_nonzero(ina | inb)
        worst = max(worst, abs(est - box_iou(a, b)))
    assert worst < 0.02


def test_average_recall_examples():
    assert average_recall([1.0, 1.0])[0] == pytest.approx(1.0)
    rec = recall_curve([0.2, 0.6, 0.9])
    assert rec[50] == pytest.approx(2 / 3)
    assert THRESHOLDS[50] == 0.5


def test_average_recall_counting_oracle():
    rng = np.random.default_rng(1)
    ious = rng.random(57)
    ar, curve = average_recall(ious)
    recalls = [sum(1 for v in ious if v >= t) / len(ious) for t in [i / 100 for i in range(101)]]
    expect = sum((recalls[i] + recalls[i + 1]) / 2 * 0.01 for i in range(100))
    assert abs(ar - expect) < 1e-9
    assert len(curve) == 101


def test_average_recall_empty_raises():
    with pytest.raises(ValueError):
        average_recall([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_ar_bounded_and_curve_monotone(ious):
    ar, curve = average_recall(ious)
    assert 0.0 <= ar <= 1.0
    rec = [r for _, r in curve]
    assert all(x >= y for x, y in zip(rec, rec[1:]))


def test_inconsistency_examples():
    assert inconsistency_error([0.9, 0.9, 0.1], [0.9, 0.1, 0.1]) == pytest.approx(1 / 3)
    assert inconsistency_error([0.9, 0.1], [0.8, 0.2]) == 0.0


def test_inconsistency_xor_oracle():
    rng = np.random.default_rng(2)
    m, b = rng.random(200), rng.random(200)
    expect = sum((x >= 0.5) ^ (y >= 0.5) for x, y in zip(m, b)) / 200
    assert inconsistency_error(m, b) == pytest.approx(expect)


def test_perfect_predictions():
    gm = np.zeros((2, 4, 4))
    gm[0, :2] = 1
    gm[1, 2:] = 1
    gb = np.array([[0, 0, 4, 2], [0, 2, 4, 4]], dtype=float)
    rep = evaluate_dataset([(gm, gb)], [(gm, gb, [True, False], [False, False])])
    assert rep.ar_mask["all"] == pytest.approx(1.0) and rep.ar_box["all"] == pytest.approx(1.0)
    assert rep.ie["all"] == 0.0
    assert rep.counts["plural"] == 0 and rep.ar_mask["plural"] is None


def test_one_scene_composition():
    rng = np.random.default_rng(3)
    pm = rng.random((3, 5, 5))
    gm = (rng.random((3, 5, 5)) < 0.5).astype(float)
    pb = np.array([[0, 0, 3, 3], [1, 1, 4, 5], [2, 0, 5, 2]], dtype=float)
    gb = np.array([[0, 0, 2, 3], [1, 2, 4, 4], [0, 0, 5, 5]], dtype=float)
    rep = evaluate_dataset([(pm, pb)], [(gm, gb, [True, True, False], [True, False, False])])
    mi = [mask_iou(pm[i], gm[i]) for i in range(3)]
    bi = [box_iou(pb[i], gb[i]) for i in range(3)]
    assert rep.ar_mask["all"] == average_recall(mi)[0]
    assert rep.ar_box["thing"] == average_recall(bi[:2])[0]
    assert rep.ie["all"] == inconsistency_error(mi, bi)


def test_split_partition():
    rng = np.random.default_rng(4)
    results = [PhraseResult(rng.random(), rng.random(), bool(rng.random() < 0.5), bool(rng.random() < 0.3))
               for _ in range(40)]
    rep = report_from_results(results)
    c = rep.counts
    assert c["thing"] + c["stuff"] == c["all"] == 40
    assert c["single"] + c["plural"] == c["all"]
    assert set(rep.ar_mask) == set(SPLITS)


def test_report_text_round_trip_and_csv():
    results = [PhraseResult(0.7, 0.4, True, False), PhraseResult(0.2, 0.9, False, False)]
    rep = report_from_results(results)
    back = MetricsReport.from_text(rep.to_text())
    assert back.summary() == rep.summary()
    assert rep.to_text() == report_from_results(results).to_text()
    lines = rep.curves_csv().splitlines()
    assert lines[0] == "split,threshold,recall_mask,recall_box"
    assert len(lines) == 1 + 101 * 4  # plural split is empty
    assert "ie-v1" in rep.to_text()


def test_length_mismatch():
    with pytest.raises(ValueError):
        evaluate_dataset([(np.zeros((1, 2, 2)), np.zeros((1, 4)))], [])
