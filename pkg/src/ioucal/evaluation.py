"""TP/FP matching and COCO-style average precision.

Conventions: detections are processed in canonical order (confidence
descending, ties by ascending detection id); each takes the unmatched
ground-truth object of its category with the highest IoU >= t_iou (ties
by lowest annotation id). A detection left unmatched whose overlap with a
crowd region (intersection over detection area) reaches t_iou is ignored,
neither TP nor FP. AP is the mean interpolated precision at the 101 recall
levels 0.00, 0.01, ..., 1.00.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import Dataset, DetectionSet, apply_cap
from .geometry import pairwise_ioa, pairwise_iou

COCO_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_LEVELS = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass(frozen=True)
class MatchResult:
    """Match outcome for one threshold; per-detection arrays follow the set's order."""

    t_iou: float
    detection_ids: np.ndarray
    tp: np.ndarray
    ignored: np.ndarray
    matched_gt: np.ndarray
    gt_ids: np.ndarray
    gt_matched: np.ndarray

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp & ~self.ignored

    def to_csv(self, dets: DetectionSet) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["detection_id", "image_id", "category_id", "confidence", "tp", "ignored", "t_iou"])
        for i, im, c, s, tp, ig in zip(dets.ids.tolist(), dets.images.tolist(),
                                       dets.categories.tolist(), dets.scores.tolist(),
                                       self.tp.tolist(), self.ignored.tolist()):
            w.writerow([i, im, c, repr(s), int(tp), int(ig), repr(float(self.t_iou))])
        return buf.getvalue()


def match_many(dets: DetectionSet, gt: Dataset, thresholds):
    """Greedy matching at several thresholds at once.

    Returns ``(tp, ignored, matched_gt, gt_matched)`` with shapes (T, n),
    (T, n), (T, n) and (T, n_gt); ``matched_gt`` holds annotation ids or -1.
    """
    th = np.atleast_1d(np.asarray(thresholds, dtype=float))
    n_t = len(th)
    n = len(dets)
    garr = gt.gt_arrays
    tp = np.zeros((n_t, n), dtype=bool)
    ignored = np.zeros((n_t, n), dtype=bool)
    matched = np.full((n_t, n), -1, dtype=np.int64)
    gt_matched = np.zeros((n_t, len(garr["ids"])), dtype=bool)
    groups = gt.gt_groups
    empty = (np.zeros(0, dtype=np.int64),) * 2
    t_min = th.min() if n_t else 1.0
    for image, sl in dets.image_slices():
        cats = dets.categories[sl]
        for c in np.unique(cats):
            d_idx = np.flatnonzero(cats == c) + sl.start
            regular, crowd = groups.get((image, int(c)), empty)
            d_boxes = dets.boxes[d_idx]
            overlap = pairwise_iou(d_boxes, garr["boxes"][regular])
            if len(crowd):
                crowd_hit = pairwise_ioa(d_boxes, garr["boxes"][crowd]).max(axis=1)[None, :] >= th[:, None]
            else:
                crowd_hit = np.zeros((n_t, len(d_idx)), dtype=bool)
            taken = np.zeros((n_t, len(regular)), dtype=bool)
            if len(regular):
                for j, d in enumerate(d_idx):
                    row = overlap[j]
                    if row.max() < t_min:
                        continue
                    cand = (row[None, :] >= th[:, None]) & ~taken
                    hit = cand.any(axis=1)
                    if not hit.any():
                        continue
                    best = np.argmax(np.where(cand, row[None, :], -1.0), axis=1)
                    rows = np.flatnonzero(hit)
                    taken[rows, best[rows]] = True
                    tp[rows, d] = True
                    matched[rows, d] = garr["ids"][regular[best[rows]]]
                gt_matched[:, regular] = taken
            ignored[:, d_idx] = crowd_hit & ~tp[:, d_idx]
    return tp, ignored, matched, gt_matched


def match(dets: DetectionSet, gt: Dataset, t_iou: float = 0.5) -> MatchResult:
    if not 0.0 < t_iou <= 1.0:
        raise ValueError("t_iou must lie in (0, 1]")
    tp, ign, mgt, gtm = match_many(dets, gt, [t_iou])
    return MatchResult(float(t_iou), dets.ids, tp[0], ign[0], mgt[0], gt.gt_arrays["ids"], gtm[0])


@dataclass(frozen=True)
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    interpolated: np.ndarray

    @property
    def ap(self) -> float:
        return float(self.interpolated.mean())


def pr_curve(tp, scores, ids, n_positives: int) -> PRCurve:
    """Ranked precision/recall and the 101-point interpolated precision.

    ``tp`` marks TPs among already-filtered (non-ignored) detections.
    """
    tp = np.asarray(tp, dtype=bool)
    if n_positives <= 0:
        raise ValueError("precision/recall needs at least one positive")
    order = np.lexsort((np.asarray(ids), -np.asarray(scores, dtype=float)))
    tp = tp[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_positives
    precision = tps / np.maximum(tps + fps, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    pos = np.searchsorted(recall, RECALL_LEVELS, side="left")
    interp = np.zeros(len(RECALL_LEVELS))
    ok = pos < len(envelope)
    interp[ok] = envelope[pos[ok]]
    return PRCurve(precision, recall, interp)


def average_precision(dets: DetectionSet, result: MatchResult, gt: Dataset, category: int) -> float | None:
    """AP of one category from a :class:`MatchResult`; ``None`` when the category has no GT."""
    garr = gt.gt_arrays
    n_pos = int(np.sum((garr["categories"] == category) & ~garr["is_crowd"]))
    if n_pos == 0:
        return None
    m = (dets.categories == category) & ~result.ignored
    return pr_curve(result.tp[m], dets.scores[m], dets.ids[m], n_pos).ap


def ap_table(dets: DetectionSet, gt: Dataset, thresholds=COCO_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """AP for every (threshold, category with GT); returns ``(table, category_ids)``."""
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=float))
    garr = gt.gt_arrays
    cats, counts = np.unique(garr["categories"][~garr["is_crowd"]], return_counts=True)
    tp, ign, _, _ = match_many(dets, gt, thresholds)
    table = np.zeros((len(thresholds), len(cats)))
    for k, (c, n_pos) in enumerate(zip(cats, counts)):
        in_cat = dets.categories == c
        for t in range(len(thresholds)):
            m = in_cat & ~ign[t]
            table[t, k] = pr_curve(tp[t, m], dets.scores[m], dets.ids[m], int(n_pos)).ap
    return table, cats


def map_metrics(dets: DetectionSet, gt: Dataset, cap: int | None = 100) -> dict[str, float]:
    """COCO mAP (mean over t_iou 0.50:0.95 and categories) and mAP50."""
    if cap is not None:
        dets = apply_cap(dets, cap)
    table, cats = ap_table(dets, gt, COCO_THRESHOLDS)
    if len(cats) == 0:
        return {"mAP": 0.0, "mAP50": 0.0}
    return {"mAP": float(table.mean()), "mAP50": float(table[0].mean())}


def tp_labels(dets: DetectionSet, gt: Dataset, t_iou: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Binary TP labels and the ignore mask (crowd absorption) at ``t_iou``."""
    res = match(dets, gt, t_iou)
    return res.tp.astype(int), res.ignored
