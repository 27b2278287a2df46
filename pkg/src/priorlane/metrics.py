"""Lane evaluation: mIoU, CULane-style F1, TuSimple accuracy, and lane decoding.

Reports are count-based so that per-image results add up to split results.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError, FormatError, UsageError


@dataclass
class LanePolyline:
    points: np.ndarray  # n x 2, columns (x, y) in pixels, one point per sampled row

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) > 1 and not np.all(np.diff(pts[:, 1]) > 0):
            raise DataError("lane rows must be strictly increasing")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xs(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.points[:, 1]

    def inside(self, height: int, width: int) -> bool:
        p = self.points
        return bool(np.all((p[:, 0] >= 0) & (p[:, 0] <= width - 1) & (p[:, 1] >= 0) & (p[:, 1] <= height - 1)))

    def to_list(self) -> list:
        return [[float(x), float(y)] for x, y in self.points]


# -- reports ----------------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: np.ndarray | None = None  # gt x pred counts
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tusimple_correct: int = 0
    tusimple_total: int = 0
    tusimple_fp: int = 0
    tusimple_fn: int = 0
    tusimple_pred: int = 0
    tusimple_gt: int = 0
    class_names: tuple | None = field(default=None, compare=False)

    def __add__(self, other: "EvalReport") -> "EvalReport":
        if self.confusion is None:
            conf = None if other.confusion is None else other.confusion.copy()
        elif other.confusion is None:
            conf = self.confusion.copy()
        else:
            if self.confusion.shape != other.confusion.shape:
                raise UsageError("cannot merge reports with different class counts")
            conf = self.confusion + other.confusion
        return EvalReport(conf, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.tusimple_correct + other.tusimple_correct,
                          self.tusimple_total + other.tusimple_total,
                          self.tusimple_fp + other.tusimple_fp, self.tusimple_fn + other.tusimple_fn,
                          self.tusimple_pred + other.tusimple_pred, self.tusimple_gt + other.tusimple_gt,
                          self.class_names or other.class_names)

    # segmentation
    @property
    def per_class_iou(self) -> dict:
        if self.confusion is None:
            return {}
        c = self.confusion
        tp = np.diag(c)
        union = c.sum(axis=0) + c.sum(axis=1) - tp
        names = self.class_names or tuple(str(i) for i in range(len(c)))
        return {names[i]: float(tp[i] / union[i]) for i in range(len(c)) if union[i] > 0}

    @property
    def miou(self) -> float | None:
        ious = list(self.per_class_iou.values())
        return float(np.mean(ious)) if ious else None

    # lane F1
    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    # TuSimple
    @property
    def tusimple_accuracy(self) -> float | None:
        return self.tusimple_correct / self.tusimple_total if self.tusimple_total else None

    @property
    def fp_rate(self) -> float | None:
        return self.tusimple_fp / self.tusimple_pred if self.tusimple_pred else None

    @property
    def fn_rate(self) -> float | None:
        return self.tusimple_fn / self.tusimple_gt if self.tusimple_gt else None

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "tp": int(self.tp),
            "fp": int(self.fp),
            "fn": int(self.fn),
            "tusimple_accuracy": self.tusimple_accuracy,
            "tusimple_fp_rate": self.fp_rate,
            "tusimple_fn_rate": self.fn_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_RATE = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_COUNT = {"type": "integer", "minimum": 0}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["miou", "per_class_iou", "f1", "precision", "recall", "tp", "fp", "fn", "tusimple_accuracy"],
    "properties": {
        "miou": _RATE,
        "per_class_iou": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "f1": _RATE,
        "precision": _RATE,
        "recall": _RATE,
        "tp": _COUNT,
        "fp": _COUNT,
        "fn": _COUNT,
        "tusimple_accuracy": _RATE,
        "tusimple_fp_rate": _RATE,
        "tusimple_fn_rate": _RATE,
    },
    "additionalProperties": False,
}


# -- mIoU -------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p = pred.astype(np.int64).ravel()
    g = gt.astype(np.int64).ravel()
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} labels outside [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred_mask, gt_mask, num_classes: int, class_names=None) -> EvalReport:
    """Confusion-count report; sum reports across images to evaluate a split."""
    return EvalReport(confusion=confusion_matrix(pred_mask, gt_mask, num_classes),
                      class_names=tuple(class_names) if class_names else None)


# -- rasterisation & lane decoding --------------------------------------------------

def rasterize_lane(lane: LanePolyline, height: int, width: int, width_px: float = 30.0) -> np.ndarray:
    """Disc-brush stroke of the polyline: pixel centres within width/2 of any segment."""
    if height < 1 or width < 1:
        raise UsageError(f"empty image extent {height}x{width}")
    mask = np.zeros((height, width), dtype=bool)
    pts = lane.points
    if len(pts) == 0:
        return mask
    r = width_px / 2.0
    yy, xx = np.mgrid[0:height, 0:width]
    segs = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)] or [(pts[0], pts[0])]
    for a, b in segs:
        lo = np.floor(np.minimum(a, b) - r).astype(int)
        hi = np.ceil(np.maximum(a, b) + r).astype(int) + 1
        x0, x1 = max(lo[0], 0), min(hi[0], width)
        y0, y1 = max(lo[1], 0), min(hi[1], height)
        if x0 >= x1 or y0 >= y1:
            continue
        px = xx[y0:y1, x0:x1] - a[0]
        py = yy[y0:y1, x0:x1] - a[1]
        d = b - a
        dd = float(d @ d)
        t = np.clip((px * d[0] + py * d[1]) / dd, 0.0, 1.0) if dd > 0 else 0.0
        dist2 = (px - t * d[0]) ** 2 + (py - t * d[1]) ** 2
        mask[y0:y1, x0:x1] |= dist2 <= r * r
    return mask


def decode_lane_maps(probs: np.ndarray, exist_prob: np.ndarray, threshold: float = 0.5,
                     rows=None) -> list[LanePolyline]:
    """Lane polylines from per-lane probability maps.

    ``probs`` is (C, H, W) with channel 0 the background and channel k + 1 lane
    slot k. Lanes whose existence probability is below ``threshold`` are dropped.
    """
    probs = np.asarray(probs, dtype=np.float64)
    _, h, w = probs.shape
    rows = np.arange(h) if rows is None else np.asarray(rows, dtype=np.int64)
    cols = np.arange(w, dtype=np.float64)
    lanes = []
    for k in range(probs.shape[0] - 1):
        if exist_prob[k] < threshold:
            continue
        ch = probs[k + 1][rows]
        mass = np.where(ch > threshold, ch, 0.0)
        total = mass.sum(axis=1)
        keep = total > 0
        if not keep.any():
            continue
        xs = (mass[keep] @ cols) / total[keep]
        lanes.append(LanePolyline(np.stack([xs, rows[keep].astype(np.float64)], axis=1)))
    return lanes


def decode_lanes(seg, threshold: float = 0.5, size=None, rows=None) -> list[list[LanePolyline]]:
    """Decode a model output batch into per-image lane lists.

    Logits are upsampled to ``size`` (H, W) first when given.
    """
    from .autodiff import functional as F, no_grad

    with no_grad():
        logits = seg.upsampled(*size) if size is not None else seg.logits
        probs = F.softmax(logits, axis=1).data
    exist = 1.0 / (1.0 + np.exp(-seg.existence.data))
    return [decode_lane_maps(probs[i], exist[i], threshold, rows) for i in range(probs.shape[0])]


def lanes_from_label(label: np.ndarray, max_lanes: int, rows=None) -> list[LanePolyline]:
    """Ground-truth polylines from an instance label mask (0 = background, k + 1 = lane k)."""
    label = np.asarray(label)
    onehot = np.stack([(label == c).astype(np.float64) for c in range(max_lanes + 1)])
    present = onehot[1:].reshape(max_lanes, -1).any(axis=1).astype(np.float64)
    return decode_lane_maps(onehot, present, 0.5, rows)


# -- CULane F1 --------------------------------------------------------------------

def lane_ious(preds, gts, height: int, width: int, width_px: float = 30.0) -> np.ndarray:
    pm = [rasterize_lane(p, height, width, width_px) for p in preds]
    gm = [rasterize_lane(g, height, width, width_px) for g in gts]
    out = np.zeros((len(pm), len(gm)))
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            union = np.count_nonzero(a | b)
            out[i, j] = np.count_nonzero(a & b) / union if union else 0.0
    return out


def optimal_assignment(ious: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one pairs maximising the total IoU."""
    if ious.size == 0:
        return []
    r, c = linear_sum_assignment(ious, maximize=True)
    return list(zip(r.tolist(), c.tolist()))


def exhaustive_assignment(ious: np.ndarray) -> list[tuple[int, int]]:
    """Brute-force counterpart of optimal_assignment for small sets."""
    n, m = ious.shape
    if n == 0 or m == 0:
        return []
    best, best_pairs = -1.0, []
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(ious[i, perm[i]] for i in range(n))
            if total > best:
                best, best_pairs = total, [(i, perm[i]) for i in range(n)]
    else:
        for perm in itertools.permutations(range(n), m):
            total = sum(ious[perm[j], j] for j in range(m))
            if total > best:
                best, best_pairs = total, sorted((perm[j], j) for j in range(m))
    return best_pairs


def culane_f1(preds, gts, height: int, width: int, width_px: float = 30.0,
              iou_thr: float = 0.5) -> EvalReport:
    if height < 1 or width < 1:
        raise UsageError(f"empty image extent {height}x{width}")
    ious = lane_ious(preds, gts, height, width, width_px)
    tp = sum(1 for i, j in optimal_assignment(ious) if ious[i, j] > iou_thr)
    return EvalReport(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp)


# -- TuSimple accuracy ---------------------------------------------------------------

def _matched_points(pred: LanePolyline, gt: LanePolyline, tol: float) -> int:
    lookup = dict(zip(pred.ys.tolist(), pred.xs.tolist()))
    hits = 0
    for x, y in gt.points:
        px = lookup.get(float(y))
        if px is not None and abs(px - x) <= tol:
            hits += 1
    return hits


def tusimple_accuracy(preds, gts, tol: float = 20.0, lane_thr: float = 0.85) -> EvalReport:
    """Point accuracy against gt row anchors; each gt lane scores its best prediction.

    A gt lane whose best prediction matches fewer than ``lane_thr`` of its points
    is a false negative; predictions not matched by any gt lane are false positives.
    """
    correct = total = fn = 0
    matched = set()
    for gt in gts:
        total += len(gt)
        if not preds or len(gt) == 0:
            fn += 1
            continue
        hits = [_matched_points(p, gt, tol) for p in preds]
        best = int(np.argmax(hits))
        correct += hits[best]
        if hits[best] < lane_thr * len(gt):
            fn += 1
        else:
            matched.add(best)
    return EvalReport(tusimple_correct=correct, tusimple_total=total,
                      tusimple_fp=len(preds) - len(matched), tusimple_fn=fn,
                      tusimple_pred=len(preds), tusimple_gt=len(gts))


# -- lane files ---------------------------------------------------------------------

def write_lanes(path, lanes) -> None:
    lines = [" ".join(f"{x:.6g} {y:.6g}" for x, y in lane.points) for lane in lanes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_lanes(path) -> list[LanePolyline]:
    lanes = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: non-numeric lane coordinate") from exc
        if len(vals) % 2:
            raise FormatError(f"{path}:{n}: odd number of coordinates")
        lanes.append(LanePolyline(np.array(vals).reshape(-1, 2)))
    return lanes
