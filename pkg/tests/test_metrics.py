import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorlane.autodiff import Tensor
from priorlane.errors import DataError, FormatError, UsageError
from priorlane.metrics import (
    REPORT_SCHEMA, EvalReport, LanePolyline, confusion_matrix, culane_f1, decode_lane_maps, decode_lanes,
    exhaustive_assignment, lane_ious, lanes_from_label, miou, optimal_assignment, rasterize_lane, read_lanes,
    tusimple_accuracy, write_lanes,
)
from priorlane.model import SegOutput


def vertical(x, rows=range(0, 60, 10)):
    rows = np.asarray(list(rows), dtype=float)
    return LanePolyline(np.stack([np.full(len(rows), float(x)), rows], axis=1))


# -- mIoU ----------------------------------------------------------------------------------

def test_hand_computed_two_by_two():
    rep = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
    assert rep.per_class_iou == {"0": pytest.approx(0.5), "1": pytest.approx(2 / 3)}
    assert rep.miou == pytest.approx(7 / 12)


def test_identical_masks_score_one():
    m = np.random.default_rng(0).integers(0, 4, size=(8, 9))
    rep = miou(m, m, 4)
    assert rep.miou == 1.0 and all(v == 1.0 for v in rep.per_class_iou.values())


def test_confusion_matches_pixel_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        shape = tuple(rng.integers(1, 12, size=2))
        gt, pred = rng.integers(0, k, size=shape), rng.integers(0, k, size=shape)
        oracle = np.zeros((k, k), dtype=np.int64)
        for g, p in zip(gt.ravel(), pred.ravel()):
            oracle[g, p] += 1
        np.testing.assert_array_equal(confusion_matrix(pred, gt, k), oracle)
        ious = [oracle[c, c] / (oracle[c].sum() + oracle[:, c].sum() - oracle[c, c])
                for c in range(k) if oracle[c].sum() + oracle[:, c].sum()]
        assert miou(pred, gt, k).miou == pytest.approx(float(np.mean(ious)), abs=1e-15)


def test_absent_classes_are_excluded():
    rep = miou(np.zeros((3, 3), int), np.zeros((3, 3), int), 4)
    assert list(rep.per_class_iou) == ["0"] and rep.miou == 1.0


def test_split_accumulation_is_concatenation():
    rng = np.random.default_rng(2)
    preds = [rng.integers(0, 3, size=(4, 5)) for _ in range(6)]
    gts = [rng.integers(0, 3, size=(4, 5)) for _ in range(6)]
    total = sum((miou(p, g, 3) for p, g in zip(preds, gts)), EvalReport())
    whole = miou(np.concatenate(preds), np.concatenate(gts), 3)
    np.testing.assert_array_equal(total.confusion, whole.confusion)
    assert total.miou == whole.miou
    perm = rng.permutation(6)
    shuffled = sum((miou(preds[i], gts[i], 3) for i in perm), EvalReport())
    assert shuffled.miou == whole.miou


def test_miou_errors():
    with pytest.raises(UsageError):
        miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(DataError):
        miou(np.full((2, 2), 2), np.zeros((2, 2), int), 2)


# -- CULane F1 -----------------------------------------------------------------------------

def test_identical_sets_are_perfect():
    lanes = [vertical(20), vertical(80)]
    rep = culane_f1(lanes, lanes, 64, 128)
    assert (rep.precision, rep.recall, rep.f1) == (1.0, 1.0, 1.0)


def test_one_of_two_hand_example():
    rep = culane_f1([vertical(20)], [vertical(20), vertical(100)], 64, 128)
    assert (rep.tp, rep.fp, rep.fn) == (1, 0, 1)
    assert rep.precision == 1.0 and rep.recall == 0.5
    assert rep.f1 == pytest.approx(2 / 3)


def test_iou_threshold_is_strict():
    # a pair whose IoU equals the threshold is not a match
    a, b = vertical(40, range(0, 64)), vertical(50, range(0, 64))
    iou = lane_ious([a], [b], 64, 128)[0, 0]
    assert culane_f1([a], [b], 64, 128, iou_thr=iou).tp == 0
    assert culane_f1([a], [b], 64, 128, iou_thr=iou - 1e-9).tp == 1


def test_swap_exchanges_precision_and_recall():
    rng = np.random.default_rng(3)
    for _ in range(10):
        preds = [vertical(x) for x in rng.uniform(10, 118, size=rng.integers(0, 4))]
        gts = [vertical(x) for x in rng.uniform(10, 118, size=rng.integers(1, 4))]
        a, b = culane_f1(preds, gts, 64, 128), culane_f1(gts, preds, 64, 128)
        assert (a.precision, a.recall) == (b.recall, b.precision)
        assert a.f1 == b.f1


def test_lane_order_does_not_matter():
    rng = np.random.default_rng(4)
    preds = [vertical(x) for x in (15, 40, 70, 100)]
    gts = [vertical(x) for x in (18, 60, 98)]
    ref = culane_f1(preds, gts, 64, 128)
    for _ in range(5):
        p = [preds[i] for i in rng.permutation(4)]
        g = [gts[i] for i in rng.permutation(3)]
        out = culane_f1(p, g, 64, 128)
        assert (out.tp, out.fp, out.fn) == (ref.tp, ref.fp, ref.fn)


def test_optimal_assignment_matches_exhaustive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(300):
        n, m = (int(v) for v in rng.integers(1, 5, size=2))
        ious = rng.permutation(n * m).reshape(n, m) / (n * m) + rng.uniform(0, 1e-3, size=(n, m))
        opt, brute = optimal_assignment(ious), exhaustive_assignment(ious)
        assert sorted(opt) == sorted(brute)


def test_optimal_assignment_on_rasterised_three_lane_sets():
    rng = np.random.default_rng(6)
    for _ in range(10):
        preds = [vertical(x) for x in rng.uniform(10, 118, size=3)]
        gts = [vertical(x) for x in rng.uniform(10, 118, size=3)]
        ious = lane_ious(preds, gts, 64, 128)
        total = lambda pairs: sum(ious[i, j] for i, j in pairs)
        assert total(optimal_assignment(ious)) == pytest.approx(total(exhaustive_assignment(ious)), abs=1e-12)


def test_empty_extent_is_usage_error():
    with pytest.raises(UsageError):
        culane_f1([vertical(1)], [vertical(1)], 0, 10)


def test_disc_brush_width():
    mask = rasterize_lane(vertical(60, range(0, 64)), 64, 128, 30)
    assert mask[32].sum() == 31  # centres with |dx| <= 15
    single = rasterize_lane(LanePolyline(np.array([[10.0, 10.0]])), 32, 32, 4)
    assert single.sum() == 13  # lattice points in a radius-2 disc


# -- TuSimple --------------------------------------------------------------------------------

def shifted(lane, dx):
    return LanePolyline(lane.points + np.array([dx, 0.0]))


def test_tusimple_equal_is_one():
    gts = [vertical(30), vertical(90)]
    rep = tusimple_accuracy(gts, gts)
    assert rep.tusimple_accuracy == 1.0 and rep.fp_rate == 0.0 and rep.fn_rate == 0.0


def test_tusimple_tolerance_boundary():
    gts = [vertical(30), vertical(90)]
    assert tusimple_accuracy([shifted(g, 20) for g in gts], gts).tusimple_accuracy == 1.0
    rep = tusimple_accuracy([shifted(g, 21) for g in gts], gts)
    assert rep.tusimple_accuracy == 0.0
    assert rep.fn_rate == 1.0 and rep.fp_rate == 1.0


def test_tusimple_three_of_four():
    gt = vertical(50, rows=(10, 20, 30, 40))
    pred = LanePolyline(np.array([[50, 10], [55, 20], [69, 30], [71, 40]], dtype=float))
    rep = tusimple_accuracy([pred], [gt])
    assert rep.tusimple_accuracy == 0.75
    assert rep.tusimple_fn == 1  # 75% < 85% matched points


def test_tusimple_missing_rows_do_not_count():
    gt = vertical(50, rows=(10, 20, 30, 40))
    pred = vertical(50, rows=(10, 20))
    assert tusimple_accuracy([pred], [gt]).tusimple_accuracy == 0.5


# -- decoding -----------------------------------------------------------------------------

def test_vertical_stripe_decodes_to_its_column():
    probs = np.zeros((3, 20, 30))
    probs[0] = 1.0
    probs[2, :, 17] = 1.0
    probs[0, :, 17] = 0.0
    lanes = decode_lane_maps(probs, np.array([0.9, 0.9]), 0.5)
    assert len(lanes) == 1
    np.testing.assert_array_equal(lanes[0].xs, 17.0)
    np.testing.assert_array_equal(lanes[0].ys, np.arange(20))


def test_existence_gate():
    probs = np.zeros((2, 10, 10))
    probs[1, :, 4] = 1.0
    assert decode_lane_maps(probs, np.array([0.4]), 0.5) == []


def test_diagonal_ramp_within_half_pixel():
    h, w = 60, 120
    yy, xx = np.mgrid[0:h, 0:w]
    line = 0.7 * yy + 13.3
    probs = np.zeros((2, h, w))
    probs[1] = (np.abs(xx - line) <= 3.0).astype(float)
    probs[0] = 1.0 - probs[1]
    lane = decode_lane_maps(probs, np.array([1.0]))[0]
    assert np.max(np.abs(lane.xs - (0.7 * lane.ys + 13.3))) <= 0.5


@given(st.floats(-1.0, 1.0), st.floats(40.0, 80.0))
@settings(max_examples=40, deadline=None)
def test_decode_recovers_rasterised_line(slope, x0):
    h, w = 48, 128
    ys = np.array([0.0, h - 1.0])
    src = LanePolyline(np.stack([x0 + slope * ys, ys], axis=1))
    mask = rasterize_lane(src, h, w, 6.0)
    probs = np.stack([1.0 - mask, mask]).astype(float)
    lane = decode_lane_maps(probs, np.array([1.0]), rows=np.arange(4, h - 4))[0]
    assert np.max(np.abs(lane.xs - (x0 + slope * lane.ys))) <= 0.5


def test_decode_lanes_from_model_output():
    logits = np.full((1, 3, 8, 16), -10.0)
    logits[0, 0] = 10.0
    logits[0, 1, :, 5] = 20.0
    seg = SegOutput(Tensor(logits), Tensor(np.array([[5.0, -5.0]])))
    lanes = decode_lanes(seg, size=(8, 16))
    assert len(lanes) == 1 and len(lanes[0]) == 1
    np.testing.assert_allclose(lanes[0][0].xs, 5.0, atol=0.5)


def test_lanes_from_instance_label():
    label = np.zeros((10, 20), np.uint8)
    label[:, 3] = 1
    label[5:, 12] = 3
    lanes = lanes_from_label(label, 4)
    assert len(lanes) == 2
    assert lanes[1].ys[0] == 5 and np.all(lanes[1].xs == 12)


# -- polylines, files, report ---------------------------------------------------------------

def test_rows_must_increase():
    with pytest.raises(DataError):
        LanePolyline(np.array([[1.0, 5.0], [2.0, 5.0]]))


def test_lane_file_round_trip(tmp_path):
    lanes = [vertical(10.5), LanePolyline(np.array([[3.25, 1.0], [4.0, 7.0]]))]
    write_lanes(tmp_path / "a.lines.txt", lanes)
    back = read_lanes(tmp_path / "a.lines.txt")
    assert len(back) == 2
    for a, b in zip(lanes, back):
        np.testing.assert_array_equal(a.points, b.points)
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(FormatError):
        read_lanes(tmp_path / "bad.txt")
    (tmp_path / "bad2.txt").write_text("1 x\n")
    with pytest.raises(FormatError):
        read_lanes(tmp_path / "bad2.txt")


def test_report_json_validates_against_schema():
    rng = np.random.default_rng(7)
    rep = miou(rng.integers(0, 4, size=(5, 5)), rng.integers(0, 4, size=(5, 5)), 4,
               class_names=("bg", "white", "yellow", "stop"))
    rep = rep + culane_f1([vertical(20)], [vertical(20), vertical(90)], 64, 128)
    rep = rep + tusimple_accuracy([vertical(20)], [vertical(22)])
    doc = json.loads(rep.to_json())
    jsonschema.validate(doc, REPORT_SCHEMA)
    for key in ("miou", "per_class_iou", "f1", "precision", "recall", "tp", "fp", "fn", "tusimple_accuracy"):
        assert key in doc
    assert set(doc["per_class_iou"]) <= {"bg", "white", "yellow", "stop"}
    jsonschema.validate(json.loads(EvalReport().to_json()), REPORT_SCHEMA)
