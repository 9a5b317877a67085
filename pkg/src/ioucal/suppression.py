"""Greedy NMS and Gaussian soft-NMS baselines.

Two implementations are kept side by side: :func:`suppress_arrays` follows
the classic select-then-discount loop and computes overlaps on the fly,
while :func:`suppress_matrix` works from a precomputed IoU matrix. They are
expected to agree exactly and are cross-checked in the test-suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data import Detection, DetectionSet
from .exceptions import ContractError
from .geometry import pairwise_iou


@dataclass(frozen=True)
class SuppressionConfig:
    kind: Literal["hard", "soft_gaussian"] = "hard"
    t_nms: float | None = 0.5
    sigma: float | None = None
    score_floor: float | None = None
    class_agnostic: bool = False

    def __post_init__(self):
        if self.kind == "hard":
            if self.t_nms is None or self.sigma is not None:
                raise ValueError("hard NMS takes t_nms and no sigma")
            if not 0.0 <= self.t_nms <= 1.0:
                raise ValueError("t_nms must lie in [0, 1]")
        elif self.kind == "soft_gaussian":
            if self.sigma is None or self.t_nms is not None:
                raise ValueError("soft NMS takes sigma and no t_nms")
            if not self.sigma > 0:
                raise ValueError("sigma must be positive")
        else:
            raise ValueError(f"unknown suppression kind {self.kind!r}")
        if not 0.0 <= self.floor < 1.0:
            raise ValueError("score_floor must lie in [0, 1)")

    @classmethod
    def hard(cls, t_nms=0.5, score_floor=None, class_agnostic=False):
        return cls("hard", t_nms, None, score_floor, class_agnostic)

    @classmethod
    def soft(cls, sigma=0.2, score_floor=None, class_agnostic=False):
        return cls("soft_gaussian", None, sigma, score_floor, class_agnostic)

    @property
    def floor(self) -> float:
        if self.score_floor is not None:
            return self.score_floor
        return 0.001 if self.kind == "soft_gaussian" else 0.0

    def discount(self, overlap):
        """Multiplicative confidence factor for the given IoU value(s)."""
        overlap = np.asarray(overlap, dtype=float)
        if self.kind == "hard":
            return np.where(overlap >= self.t_nms, 0.0, 1.0)
        return np.exp(-(overlap ** 2) / self.sigma)


def _iou_one_to_many(box, others):
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (box[2] - box[0]) * (box[3] - box[1]) + \
        (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1]) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


def _removed(scores, cfg):
    # A zero floor disables removal for soft NMS even if a factor underflows to 0.
    if cfg.kind == "soft_gaussian" and cfg.floor == 0.0:
        return np.zeros(np.shape(scores), dtype=bool)
    return scores <= cfg.floor


def _final_order(kept, scores, ids):
    kept = np.asarray(kept, dtype=np.int64)
    order = np.lexsort((ids[kept], -scores[kept]))
    return kept[order], scores[kept][order]


def suppress_arrays(boxes, scores, categories, ids, cfg: SuppressionConfig):
    """Iterative NMS over one image.

    Returns ``(index, confidences)``: indices into the inputs of the surviving
    detections and their final confidences, sorted by final confidence
    descending (ties by ascending id).
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    s = np.array(scores, dtype=float)
    cats = np.asarray(categories)
    ids = np.asarray(ids)
    remaining = list(range(len(s)))
    kept = []
    while remaining:
        rem = np.array(remaining)
        top = s[rem].max()
        tied = rem[s[rem] == top]
        i = int(tied[np.argmin(ids[tied])])
        remaining.remove(i)
        kept.append(i)
        if not remaining:
            break
        rem = np.array(remaining)
        if not cfg.class_agnostic:
            rem = rem[cats[rem] == cats[i]]
        if len(rem) == 0:
            continue
        factor = cfg.discount(_iou_one_to_many(boxes[i], boxes[rem]))
        touched = rem[factor < 1.0]
        s[rem] = s[rem] * factor
        dropped = set(touched[_removed(s[touched], cfg)].tolist())
        if dropped:
            remaining = [j for j in remaining if j not in dropped]
    return _final_order(kept, s, ids)


def suppress_matrix(boxes, scores, categories, ids, cfg: SuppressionConfig):
    """Matrix formulation of :func:`suppress_arrays` (same contract).

    All overlaps are computed up front. Hard NMS then reduces to a single
    scan in canonical order; soft NMS repeatedly selects the best live row
    and rescales every live row by the selected row of the discount matrix.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    s = np.array(scores, dtype=float)
    ids = np.asarray(ids)
    n = len(s)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    cats = np.asarray(categories)
    related = np.ones((n, n), dtype=bool) if cfg.class_agnostic else cats[:, None] == cats[None, :]
    overlap = pairwise_iou(boxes)

    if cfg.kind == "hard":
        order = np.lexsort((ids, -s))
        hit = (overlap >= cfg.t_nms) & related
        keep = np.zeros(n, dtype=bool)
        for pos, i in enumerate(order):
            keep[i] = not np.any(hit[i, order[:pos]] & keep[order[:pos]])
        # with a positive floor nothing un-discounted is removed, so only the
        # zero factors matter here
        return _final_order(np.flatnonzero(keep), s, ids)

    factors = np.where(related, cfg.discount(overlap), 1.0)
    live = np.ones(n, dtype=bool)
    kept = []
    for _ in range(n):
        if not live.any():
            break
        cand = np.flatnonzero(live)
        i = cand[np.lexsort((ids[cand], -s[cand]))[0]]
        live[i] = False
        kept.append(i)
        row = np.where(live, factors[i], 1.0)
        s = s * row
        live &= ~((row < 1.0) & _removed(s, cfg))
    return _final_order(kept, s, ids)


def suppress(dets, cfg: SuppressionConfig) -> list[Detection]:
    """Apply NMS to a list of detections from a single image."""
    dets = list(dets)
    if len({d.image for d in dets}) > 1:
        raise ContractError("suppress expects detections from a single image")
    if not dets:
        return []
    idx, conf = suppress_arrays(
        np.array([d.box.as_array() for d in dets]),
        np.array([d.confidence for d in dets]),
        np.array([d.category for d in dets]),
        np.array([d.detection_id for d in dets]),
        cfg,
    )
    return [Detection(dets[i].box, float(c), dets[i].category, dets[i].image, dets[i].detection_id)
            for i, c in zip(idx, conf)]


def suppress_set(ds: DetectionSet, cfg: SuppressionConfig) -> DetectionSet:
    """Run :func:`suppress_arrays` independently on every image of ``ds``."""
    keep, new_scores = [], []
    for _, sl in ds.image_slices():
        idx, conf = suppress_arrays(ds.boxes[sl], ds.scores[sl], ds.categories[sl], ds.ids[sl], cfg)
        keep.append(idx + sl.start)
        new_scores.append(conf)
    if not keep:
        return ds
    keep = np.concatenate(keep)
    return DetectionSet(ds.boxes[keep], np.concatenate(new_scores), ds.categories[keep],
                        ds.images[keep], ds.ids[keep], ds.per_image_cap, check=False)


class NMS(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`suppress_set`.

    ``fit`` is a no-op; ``transform`` maps a :class:`DetectionSet` to the
    suppressed set.

    Parameters
    ----------
    kind : {"hard", "soft_gaussian"}
    t_nms : float
        IoU cutoff for hard NMS (suppress when IoU >= t_nms).
    sigma : float
        Gaussian width for soft NMS, factor ``exp(-iou**2 / sigma)``.
    score_floor : float, optional
        Drop detections discounted to or below this value. Defaults to 0 for
        hard NMS and 0.001 for soft NMS.
    """

    def __init__(self, kind="hard", t_nms=0.5, sigma=0.2, score_floor=None, class_agnostic=False):
        self.kind = kind
        self.t_nms = t_nms
        self.sigma = sigma
        self.score_floor = score_floor
        self.class_agnostic = class_agnostic

    def config(self) -> SuppressionConfig:
        if self.kind == "hard":
            return SuppressionConfig.hard(self.t_nms, self.score_floor, self.class_agnostic)
        return SuppressionConfig.soft(self.sigma, self.score_floor, self.class_agnostic)

    def fit(self, X, y=None):
        self.config_ = self.config()
        return self

    def transform(self, X: DetectionSet) -> DetectionSet:
        return suppress_set(X, self.config())
