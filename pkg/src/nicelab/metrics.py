"""Evaluation: mask/box IoU, Average Recall with splits, inconsistency error."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("all", "thing", "stuff", "single", "plural")
THRESHOLDS = np.arange(101) / 100.0  # exact k/100, unlike linspace
IE_DEFINITION = "ie-v1: fraction of phrases where exactly one of mask IoU >= 0.5, box IoU >= 0.5 holds"


def mask_iou(pred, gt, thresh: float = 0.5) -> float:
    pred = np.asarray(getattr(pred, "data", pred))
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask_iou: shapes {pred.shape} and {gt.shape} differ")
    p = pred >= thresh
    g = gt.astype(bool)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def box_iou(a, b) -> float:
    """Rectangle IoU; a box with non-positive width or height scores 0."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def recall_curve(ious) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    return (ious[None, :] >= THRESHOLDS[:, None]).mean(axis=1)


def average_recall(ious):
    """Trapezoidal integral over [0, 1] of recall(t) = fraction of IoUs >= t.

    Returns ``(ar, [(t, recall), ...])`` at 101 uniform thresholds.
    """
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("average_recall needs at least one IoU")
    if np.any(ious < 0) or np.any(ious > 1):
        raise ValueError("IoUs must lie in [0, 1]")
    rec = recall_curve(ious)
    step = THRESHOLDS[1] - THRESHOLDS[0]
    ar = float(np.sum((rec[1:] + rec[:-1]) * 0.5) * step)
    return ar, list(zip(THRESHOLDS.tolist(), rec.tolist()))


def inconsistency_error(mask_ious, box_ious, hit_thresh: float = 0.5) -> float:
    m = np.asarray(mask_ious, dtype=np.float64)
    b = np.asarray(box_ious, dtype=np.float64)
    if m.shape != b.shape:
        raise ValueError(f"inconsistency_error: {m.size} mask IoUs vs {b.size} box IoUs")
    if m.size == 0:
        return 0.0
    return float(np.mean((m >= hit_thresh) != (b >= hit_thresh)))


@dataclass
class MetricsReport:
    ar_mask: dict = field(default_factory=dict)
    ar_box: dict = field(default_factory=dict)
    ie: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)  # split -> [(t, recall_mask, recall_box)]
    ie_definition: str = IE_DEFINITION

    def summary(self) -> dict:
        return {"ar_mask": self.ar_mask, "ar_box": self.ar_box, "ie": self.ie, "counts": self.counts}

    def to_text(self) -> str:
        """Structured text report (JSON)."""
        doc = {"ie_definition": self.ie_definition, **self.summary()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "threshold", "recall_mask", "recall_box"])
        for split in SPLITS:
            for t, rm, rb in self.curves.get(split, []):
                w.writerow([split, f"{t:.2f}", repr(rm), repr(rb)])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(doc["ar_mask"], doc["ar_box"], doc["ie"], doc["counts"], {}, doc["ie_definition"])


@dataclass
class PhraseResult:
    mask_iou: float
    box_iou: float
    is_thing: bool
    is_plural: bool


def split_members(results, split: str) -> list:
    if split == "all":
        return list(results)
    if split == "thing":
        return [r for r in results if r.is_thing]
    if split == "stuff":
        return [r for r in results if not r.is_thing]
    if split == "single":
        return [r for r in results if not r.is_plural]
    if split == "plural":
        return [r for r in results if r.is_plural]
    raise ValueError(f"unknown split {split!r}")


def report_from_results(results) -> MetricsReport:
    rep = MetricsReport()
    for split in SPLITS:
        members = split_members(results, split)
        rep.counts[split] = len(members)
        if not members:
            rep.ar_mask[split] = rep.ar_box[split] = rep.ie[split] = None
            rep.curves[split] = []
            continue
        mi = [r.mask_iou for r in members]
        bi = [r.box_iou for r in members]
        rep.ar_mask[split], cm = average_recall(mi)
        rep.ar_box[split], cb = average_recall(bi)
        rep.ie[split] = inconsistency_error(mi, bi)
        rep.curves[split] = [(t, rm, rb) for (t, rm), (_, rb) in zip(cm, cb)]
    return rep


def evaluate_dataset(outputs, targets) -> MetricsReport:
    """Aggregate per-phrase IoUs over a dataset.

    ``outputs``: per scene, ``(masks N x H x W, boxes N x 4)`` on the evaluation
    grid, boxes already clamped. ``targets``: per scene, ``(masks, boxes,
    is_thing, is_plural)`` on the same grid.
    """
    if len(outputs) != len(targets):
        raise ValueError(f"{len(outputs)} outputs for {len(targets)} scenes")
    results = []
    for (pm, pb), (gm, gb, things, plurals) in zip(outputs, targets):
        if len(pm) != len(gm):
            raise ValueError(f"scene has {len(gm)} phrases but {len(pm)} predictions")
        for n in range(len(gm)):
            results.append(PhraseResult(mask_iou(pm[n], gm[n]), box_iou(pb[n], gb[n]),
                                        bool(things[n]), bool(plurals[n])))
    if not results:
        raise ValueError("no phrases to evaluate")
    return report_from_results(results)
