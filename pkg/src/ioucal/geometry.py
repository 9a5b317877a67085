"""IoU kernels and the Jaccard-distance summaries used as calibration variates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Box, DetectionSet
from .exceptions import ContractError

#: Column order of the arrays returned by :func:`jaccard_summary_array`.
SUMMARY_FIELDS = ("j_min_suppressing", "j_prod_suppressing", "j_min_suppressed", "j_prod_suppressed")


@dataclass(frozen=True)
class JaccardSummary:
    j_min_suppressing: float = 1.0
    j_prod_suppressing: float = 1.0
    j_min_suppressed: float = 1.0
    j_prod_suppressed: float = 1.0


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def pairwise_iou(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """IoU between every row of ``a`` (n, 4) and every row of ``b`` (m, 4).

    Zero-area pairs get 0 (0/0 is defined as 0).
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = a if b is None else np.asarray(b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


def pairwise_ioa(dets: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Intersection over the *detection* area, used for crowd regions."""
    dets = np.asarray(dets, dtype=float).reshape(-1, 4)
    regions = np.asarray(regions, dtype=float).reshape(-1, 4)
    area = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    iw = np.minimum(dets[:, None, 2], regions[None, :, 2]) - np.maximum(dets[:, None, 0], regions[None, :, 0])
    ih = np.minimum(dets[:, None, 3], regions[None, :, 3]) - np.maximum(dets[:, None, 1], regions[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    out = np.zeros_like(inter)
    np.divide(inter, area[:, None], out=out, where=(area[:, None] > 0) & (inter > 0))
    return out


def pairwise_jaccard_matrix(boxes) -> np.ndarray:
    """``1 - IoU`` for every pair of boxes (a list of :class:`Box` or an (n, 4) array)."""
    if len(boxes) and isinstance(boxes[0], Box):
        boxes = np.array([b.as_array() for b in boxes])
    return 1.0 - pairwise_iou(np.asarray(boxes, dtype=float).reshape(-1, 4))


def _check_sorted(scores, ids):
    if len(scores) < 2:
        return
    ds = np.diff(scores)
    ok = (ds < 0) | ((ds == 0) & (np.diff(ids) > 0))
    if not ok.all():
        raise ContractError("detections must be sorted by descending confidence, ties by ascending id")


def jaccard_summary_array(boxes, scores, categories, ids=None, class_agnostic=False) -> np.ndarray:
    """Jaccard-distance summaries for one image, as an (n, 4) array.

    Rows must already be in canonical order (confidence descending, ties by
    ascending id). For row ``i`` the suppressing side aggregates ``1 - IoU``
    over rows preceding ``i``; the suppressed side over rows following it.
    Only same-category rows count unless ``class_agnostic``. Empty
    aggregations give 1.0 for both min and product.

    Columns follow :data:`SUMMARY_FIELDS`.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    _check_sorted(scores, ids)
    out = np.ones((n, 4))
    if n < 2:
        return out
    jac = 1.0 - pairwise_iou(boxes)
    before = np.tri(n, k=-1, dtype=bool)  # [i, k] true when k precedes i
    if not class_agnostic:
        categories = np.asarray(categories)
        same = categories[:, None] == categories[None, :]
        sup, supd = before & same, before.T & same
    else:
        sup, supd = before, before.T
    # Masked entries are filled with 1.0 so they drop out of both min and product.
    j_sup = np.where(sup, jac, 1.0)
    j_supd = np.where(supd, jac, 1.0)
    out[:, 0] = j_sup.min(axis=1)
    out[:, 1] = j_sup.prod(axis=1)
    out[:, 2] = j_supd.min(axis=1)
    out[:, 3] = j_supd.prod(axis=1)
    return out


def jaccard_summaries(dets, class_agnostic=False) -> list[JaccardSummary]:
    """Per-detection :class:`JaccardSummary` for a list of detections of one image.

    The list must be sorted by descending confidence with ties by ascending id.
    """
    dets = list(dets)
    if len({d.image for d in dets}) > 1:
        raise ContractError("jaccard_summaries expects detections from a single image")
    arr = jaccard_summary_array(
        np.array([d.box.as_array() for d in dets]).reshape(-1, 4),
        np.array([d.confidence for d in dets]),
        np.array([d.category for d in dets]),
        np.array([d.detection_id for d in dets]),
        class_agnostic,
    )
    return [JaccardSummary(*map(float, row)) for row in arr]


def detection_summaries(ds: DetectionSet, class_agnostic=False) -> np.ndarray:
    """Jaccard summaries for a whole :class:`DetectionSet`, aligned with its rows."""
    out = np.ones((len(ds), 4))
    for _, sl in ds.image_slices():
        out[sl] = jaccard_summary_array(ds.boxes[sl], ds.scores[sl], ds.categories[sl],
                                        ds.ids[sl], class_agnostic)
    return out
