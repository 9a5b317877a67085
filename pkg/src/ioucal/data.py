"""Boxes, detections, ground truth, and COCO-format ingestion.

Boxes are held in corner form ``(x1, y1, x2, y2)``; COCO's ``[x, y, w, h]``
is converted on the way in and out. Detection collections are columnar
(numpy arrays) and always kept in the canonical order: image id ascending,
then confidence descending, then detection id ascending. Every ordering in
the package (NMS traversal, capping, matching, AP ranking) uses that rule.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from os import PathLike
from typing import Iterable, Iterator

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box {coords}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float
    category: int
    image: int
    detection_id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthObject:
    box: Box
    category: int
    image: int
    is_crowd: bool = False
    annotation_id: int = -1


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: float
    height: float


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageInfo, ...]
    ground_truth: tuple[GroundTruthObject, ...]
    categories: tuple[Category, ...]

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        object.__setattr__(self, "categories", tuple(self.categories))

    @cached_property
    def image_ids(self) -> np.ndarray:
        return np.array([im.id for im in self.images], dtype=np.int64)

    @cached_property
    def gt_arrays(self) -> dict[str, np.ndarray]:
        """Columnar view of the ground truth, ordered by annotation id."""
        gts = sorted(self.ground_truth, key=lambda g: g.annotation_id)
        return {
            "boxes": np.array([[g.box.x1, g.box.y1, g.box.x2, g.box.y2] for g in gts],
                              dtype=float).reshape(-1, 4),
            "categories": np.array([g.category for g in gts], dtype=np.int64),
            "images": np.array([g.image for g in gts], dtype=np.int64),
            "is_crowd": np.array([g.is_crowd for g in gts], dtype=bool),
            "ids": np.array([g.annotation_id for g in gts], dtype=np.int64),
        }

    @cached_property
    def gt_groups(self) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
        """``(image, category) -> (regular, crowd)`` row indices into :attr:`gt_arrays`."""
        arr = self.gt_arrays
        groups: dict[tuple[int, int], tuple[list, list]] = {}
        for k, (im, c, crowd) in enumerate(zip(arr["images"].tolist(), arr["categories"].tolist(),
                                               arr["is_crowd"].tolist())):
            groups.setdefault((im, c), ([], []))[1 if crowd else 0].append(k)
        return {key: (np.array(r, dtype=np.int64), np.array(cr, dtype=np.int64))
                for key, (r, cr) in groups.items()}

    def subset(self, image_ids: Iterable[int]) -> "Dataset":
        keep = set(int(i) for i in image_ids)
        return Dataset(
            images=tuple(im for im in self.images if im.id in keep),
            ground_truth=tuple(g for g in self.ground_truth if g.image in keep),
            categories=self.categories,
        )


def validate_dataset(raw: Dataset) -> Dataset:
    """Check references and clamp every ground-truth box to its image.

    All offending records are collected and reported together in a single
    :class:`ValidationError`.
    """
    problems = []
    images = {}
    for im in raw.images:
        if im.id in images:
            problems.append(f"duplicate image id {im.id}")
        if not (math.isfinite(im.width) and math.isfinite(im.height)) or im.width < 0 or im.height < 0:
            problems.append(f"image {im.id}: invalid size {im.width}x{im.height}")
        images[im.id] = im
    cat_ids = set()
    for c in raw.categories:
        if c.id in cat_ids:
            problems.append(f"duplicate category id {c.id}")
        cat_ids.add(c.id)

    seen_ann = set()
    clamped = []
    for g in raw.ground_truth:
        tag = f"annotation {g.annotation_id}"
        if g.annotation_id in seen_ann:
            problems.append(f"{tag}: duplicate annotation id")
        seen_ann.add(g.annotation_id)
        im = images.get(g.image)
        if im is None:
            problems.append(f"{tag}: image id {g.image} not in images")
        if g.category not in cat_ids:
            problems.append(f"{tag}: category id {g.category} not in categories")
        if im is None:
            continue
        b = g.box
        box = Box(
            min(max(b.x1, 0.0), im.width), min(max(b.y1, 0.0), im.height),
            min(max(b.x2, 0.0), im.width), min(max(b.y2, 0.0), im.height),
        )
        assert 0 <= box.x1 <= box.x2 <= im.width and 0 <= box.y1 <= box.y2 <= im.height
        clamped.append(replace(g, box=box))
    if problems:
        raise ValidationError(problems)
    return Dataset(raw.images, tuple(clamped), raw.categories)


class DetectionSet:
    """Immutable columnar collection of detections in canonical order.

    Parameters
    ----------
    boxes : array-like of shape (n, 4)
        Corner-form boxes.
    scores, categories, images : array-like of shape (n,)
    ids : array-like of shape (n,), optional
        Stable detection ids, unique within the set. Defaults to ``arange(n)``.
    per_image_cap : int, optional
        Cap most recently applied with :func:`apply_cap`, informational.
    """

    __slots__ = ("boxes", "scores", "categories", "images", "ids", "per_image_cap",
                 "_bounds")

    def __init__(self, boxes, scores, categories, images, ids=None, per_image_cap=None,
                 *, check=True):
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        scores = np.asarray(scores, dtype=float).reshape(-1)
        categories = np.asarray(categories, dtype=np.int64).reshape(-1)
        images = np.asarray(images, dtype=np.int64).reshape(-1)
        n = len(scores)
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64).reshape(-1)
        if not (len(boxes) == len(categories) == len(images) == len(ids) == n):
            raise ValueError("detection columns have mismatched lengths")
        if check:
            problems = []
            if not np.isfinite(boxes).all():
                problems.append("non-finite box coordinates")
            elif np.any(boxes[:, 2] < boxes[:, 0]) or np.any(boxes[:, 3] < boxes[:, 1]):
                problems.append("inverted boxes (x2 < x1 or y2 < y1)")
            if not np.all((scores >= 0.0) & (scores <= 1.0)):
                problems.append("confidence outside [0, 1]")
            if len(np.unique(ids)) != n:
                problems.append("detection ids are not unique")
            if problems:
                raise ValidationError(problems)
        order = np.lexsort((ids, -scores, images))
        for name, arr in (("boxes", boxes), ("scores", scores), ("categories", categories),
                          ("images", images), ("ids", ids)):
            arr = np.ascontiguousarray(arr[order])
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "per_image_cap", per_image_cap)
        object.__setattr__(self, "_bounds", None)

    def __setattr__(self, name, value):
        raise AttributeError("DetectionSet is immutable")

    @classmethod
    def empty(cls) -> "DetectionSet":
        return cls(np.zeros((0, 4)), [], [], [])

    @classmethod
    def from_detections(cls, dets: Iterable[Detection], per_image_cap=None) -> "DetectionSet":
        dets = list(dets)
        return cls(
            [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in dets],
            [d.confidence for d in dets],
            [d.category for d in dets],
            [d.image for d in dets],
            [d.detection_id for d in dets],
            per_image_cap=per_image_cap,
        )

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[Detection]:
        for b, s, c, im, i in zip(self.boxes, self.scores, self.categories, self.images, self.ids):
            yield Detection(Box(*map(float, b)), float(s), int(c), int(im), int(i))

    def __eq__(self, other):
        if not isinstance(other, DetectionSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("boxes", "scores", "categories", "images", "ids"))

    def __repr__(self):
        return f"DetectionSet(n={len(self)}, images={len(self.image_ids)})"

    @property
    def image_ids(self) -> np.ndarray:
        return np.unique(self.images)

    def image_slices(self) -> list[tuple[int, slice]]:
        """``(image_id, slice)`` pairs; each slice is contiguous in canonical order."""
        bounds = self._bounds
        if bounds is None:
            if len(self) == 0:
                bounds = []
            else:
                starts = np.flatnonzero(np.r_[True, self.images[1:] != self.images[:-1]])
                ends = np.r_[starts[1:], len(self)]
                bounds = [(int(self.images[s]), slice(int(s), int(e))) for s, e in zip(starts, ends)]
            object.__setattr__(self, "_bounds", bounds)
        return bounds

    def take(self, index) -> "DetectionSet":
        """Sub-collection selected by a boolean mask or integer index."""
        return DetectionSet(self.boxes[index], self.scores[index], self.categories[index],
                            self.images[index], self.ids[index], self.per_image_cap, check=False)

    def with_scores(self, scores) -> "DetectionSet":
        """Same detections with replaced confidences (re-sorted canonically)."""
        scores = np.asarray(scores, dtype=float)
        if scores.shape != self.scores.shape:
            raise ValueError("score vector length mismatch")
        return DetectionSet(self.boxes, scores, self.categories, self.images, self.ids,
                            self.per_image_cap)

    def subset_images(self, image_ids) -> "DetectionSet":
        return self.take(np.isin(self.images, np.asarray(list(image_ids), dtype=np.int64)))


def apply_cap(ds: DetectionSet, cap: int, per_class: bool = False) -> DetectionSet:
    """Keep the ``cap`` highest-confidence detections of every image.

    With ``per_class`` the cap applies to each (image, category) group.
    """
    if cap < 0:
        raise ValueError("cap must be non-negative")
    n = len(ds)
    if n == 0:
        return ds
    if per_class:
        key = np.lexsort((np.arange(n), ds.categories, ds.images))
        g_img, g_cat = ds.images[key], ds.categories[key]
        new = np.r_[True, (g_img[1:] != g_img[:-1]) | (g_cat[1:] != g_cat[:-1])]
    else:
        key = np.arange(n)
        new = np.r_[True, ds.images[1:] != ds.images[:-1]]
    starts = np.maximum.accumulate(np.where(new, np.arange(n), 0))
    rank = np.empty(n, dtype=np.int64)
    rank[key] = np.arange(n) - starts
    kept = ds.take(rank < cap)
    return DetectionSet(kept.boxes, kept.scores, kept.categories, kept.images, kept.ids,
                        per_image_cap=cap, check=False)


# --- COCO JSON ------------------------------------------------------------------

def _read_json(src):
    if isinstance(src, (str, PathLike)):
        with open(src) as fh:
            return json.load(fh)
    return src


def dataset_from_coco(src) -> Dataset:
    """Build and validate a :class:`Dataset` from a COCO annotation document.

    ``src`` is a path or an already-parsed dict. Unknown keys are ignored.
    """
    doc = _read_json(src)
    problems = []
    images = []
    for im in doc.get("images", []):
        try:
            images.append(ImageInfo(int(im["id"]), float(im["width"]), float(im["height"])))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"image record {im!r}: {exc}")
    categories = []
    for c in doc.get("categories", []):
        try:
            categories.append(Category(int(c["id"]), str(c.get("name", c["id"]))))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"category record {c!r}: {exc}")
    gts = []
    for k, a in enumerate(doc.get("annotations", [])):
        ann_id = a.get("id", k)
        try:
            x, y, w, h = (float(v) for v in a["bbox"])
            gts.append(GroundTruthObject(Box.from_xywh(x, y, w, h), int(a["category_id"]),
                                         int(a["image_id"]), bool(a.get("iscrowd", 0)),
                                         int(ann_id)))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"annotation {ann_id}: {exc}")
    if problems:
        raise ValidationError(problems)
    return validate_dataset(Dataset(tuple(images), tuple(gts), tuple(categories)))


def dataset_to_coco(ds: Dataset) -> dict:
    return {
        "images": [{"id": im.id, "width": im.width, "height": im.height} for im in ds.images],
        "annotations": [
            {"id": g.annotation_id, "image_id": g.image, "category_id": g.category,
             "bbox": g.box.to_xywh(), "area": g.box.area, "iscrowd": int(g.is_crowd)}
            for g in ds.ground_truth
        ],
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
    }


def detections_from_coco(src, dataset: Dataset | None = None) -> DetectionSet:
    """Parse a COCO results array into a :class:`DetectionSet`.

    Detection ids come from an optional ``id`` key, else the array position.
    When ``dataset`` is given, image and category references are checked too.
    """
    doc = _read_json(src)
    if not isinstance(doc, list):
        raise ValidationError(["detections document must be a JSON array"])
    problems = []
    valid_images = set(int(i) for i in dataset.image_ids) if dataset is not None else None
    valid_cats = {c.id for c in dataset.categories} if dataset is not None else None
    rows = []
    for k, d in enumerate(doc):
        try:
            x, y, w, h = (float(v) for v in d["bbox"])
            row = (x, y, x + w, y + h, float(d["score"]), int(d["category_id"]),
                   int(d["image_id"]), int(d.get("id", k)))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"detection {k}: {exc}")
            continue
        if not all(math.isfinite(v) for v in row[:5]):
            problems.append(f"detection {k}: non-finite values")
        elif w < 0 or h < 0:
            problems.append(f"detection {k}: negative extent")
        elif not 0.0 <= row[4] <= 1.0:
            problems.append(f"detection {k}: score {row[4]} outside [0, 1]")
        if valid_images is not None and row[6] not in valid_images:
            problems.append(f"detection {k}: image id {row[6]} not in ground truth")
        if valid_cats is not None and row[5] not in valid_cats:
            problems.append(f"detection {k}: category id {row[5]} not in ground truth")
        rows.append(row)
    if problems:
        raise ValidationError(problems)
    if not rows:
        return DetectionSet.empty()
    arr = np.array([r[:5] for r in rows], dtype=float)
    meta = np.array([r[5:] for r in rows], dtype=np.int64)
    return DetectionSet(arr[:, :4], arr[:, 4], meta[:, 0], meta[:, 1], meta[:, 2])


def detections_to_coco(ds: DetectionSet) -> list[dict]:
    out = []
    for b, s, c, im, i in zip(ds.boxes.tolist(), ds.scores.tolist(), ds.categories.tolist(),
                              ds.images.tolist(), ds.ids.tolist()):
        out.append({"id": i, "image_id": im, "category_id": c,
                    "bbox": [b[0], b[1], b[2] - b[0], b[3] - b[1]], "score": s})
    return out


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=None, separators=(",", ":"))
        fh.write("\n")
