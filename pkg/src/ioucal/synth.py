"""Synthetic detection worlds with controlled duplication and miscalibration.

Each ground-truth object yields one *primary* detection. Its confidence
``s`` is drawn uniformly from ``primary_conf``; with probability
``law(s)`` the primary is placed on the object (IoU with it drawn from
``hit_iou``), otherwise it is displaced (IoU from ``miss_iou``) and cannot
match. Duplicates are jittered around the primary to hit a target IoU in
``duplicate_iou`` and get a strictly lower confidence. Spurious detections
are placed without any ground-truth overlap.

Confidence laws (probability that a primary of confidence ``s`` matches):

* ``calibrated``: ``s``
* ``overconfident_pow``: ``s ** law_param``
* ``logistic_skew``: ``sigmoid(law_param * logit(s))``
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, logit

from .data import (Box, Category, Dataset, DetectionSet, GroundTruthObject, ImageInfo,
                   dataset_to_coco, detections_to_coco, write_json)
from .exceptions import SynthError
from .seeding import substream

LAWS = ("calibrated", "overconfident_pow", "logistic_skew")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    images: int = 200
    objects_per_image: tuple[int, int] = (1, 8)
    categories: int = 3
    duplicate_count: tuple[int, int] = (0, 0)
    duplicate_iou: tuple[float, float] = (0.6, 0.9)
    confidence_law: str = "calibrated"
    law_param: float = 1.0
    fp_rate: float = 0.0
    box_scale: tuple[float, float] = (32.0, 160.0)
    image_size: tuple[float, float] = (640.0, 480.0)
    primary_conf: tuple[float, float] = (0.3, 1.0)
    hit_iou: tuple[float, float] = (0.5, 0.95)
    miss_iou: tuple[float, float] = (0.1, 0.4)
    duplicate_conf_factor: tuple[float, float] = (0.5, 0.98)
    fp_conf: tuple[float, float] = (0.01, 0.6)
    shuffle_duplicate_rank: bool = False

    def __post_init__(self):
        for name in ("objects_per_image", "duplicate_count", "duplicate_iou", "box_scale",
                     "primary_conf", "hit_iou", "miss_iou",
                     "duplicate_conf_factor", "fp_conf"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (lo, hi))
            if not lo <= hi:
                raise SynthError(f"{name}: empty range ({lo}, {hi})")
        if self.objects_per_image[0] < 0 or self.duplicate_count[0] < 0:
            raise SynthError("counts must be non-negative")
        if self.images < 0 or self.categories < 1:
            raise SynthError("need images >= 0 and categories >= 1")
        for name in ("duplicate_iou", "hit_iou", "miss_iou"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo and hi < 1.0):
                raise SynthError(f"{name}: IoU targets must lie in (0, 1)")
        for name in ("primary_conf", "fp_conf"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo and hi <= 1.0):
                raise SynthError(f"{name}: confidences must lie in [0, 1]")
        lo, hi = self.duplicate_conf_factor
        if not (0.0 < lo and hi < 1.0):
            raise SynthError("duplicate_conf_factor must lie in (0, 1)")
        if self.confidence_law not in LAWS:
            raise SynthError(f"unknown confidence law {self.confidence_law!r}")
        if self.fp_rate < 0:
            raise SynthError("fp_rate must be non-negative")
        if self.box_scale[0] <= 0:
            raise SynthError("box_scale must be positive")
        # Jittered boxes need room to move while staying inside the image.
        if 1.5 * self.box_scale[1] > min(self.image_size):
            raise SynthError(f"box_scale {self.box_scale} too large for image size {self.image_size}: "
                             "requested overlaps cannot be realised inside the image")

    def match_probability(self, s):
        s = np.asarray(s, dtype=float)
        if self.confidence_law == "calibrated":
            return s
        if self.confidence_law == "overconfident_pow":
            return s ** self.law_param
        return expit(self.law_param * logit(np.clip(s, 1e-12, 1 - 1e-12)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _moved(box, direction, lam):
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    w, h = box[2] - box[0], box[3] - box[1]
    cx += lam * direction[0] * w
    cy += lam * direction[1] * h
    w *= math.exp(lam * direction[2])
    h *= math.exp(lam * direction[3])
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def jitter_to_iou(box, target, rng, width, height, tries=100):
    """A box inside the image whose IoU with ``box`` is ``target`` (from above).

    Moves along a random direction of (shift, log-scale) space and bisects the
    step length; IoU is continuous in it, so a crossing is always found.
    """
    for _ in range(tries):
        direction = rng.normal(size=4)
        lo, hi = 0.0, 0.05
        while _iou(box, _moved(box, direction, hi)) >= target:
            lo, hi = hi, hi * 2
            if hi > 50:
                break
        else:
            while hi - lo > 1e-12:
                mid = (lo + hi) / 2
                if _iou(box, _moved(box, direction, mid)) >= target:
                    lo = mid
                else:
                    hi = mid
            cand = _moved(box, direction, lo)
            if cand[0] >= 0 and cand[1] >= 0 and cand[2] <= width and cand[3] <= height:
                return cand
    raise SynthError(f"could not place a box at IoU {target:.3f} inside a {width}x{height} image")


def _place_box(rng, cfg):
    w, h = rng.uniform(*cfg.box_scale, size=2)
    width, height = cfg.image_size
    x, y = rng.uniform(0, width - w), rng.uniform(0, height - h)
    return (x, y, x + w, y + h)


ROLES = ("primary", "duplicate", "spurious")


def generate(cfg: SynthConfig, with_roles: bool = False):
    """Deterministically generate ``(ground truth, raw detections)``.

    With ``with_roles`` a third element is returned: a dict of arrays aligned
    with the detection set's rows, ``role`` (index into :data:`ROLES`),
    ``parent`` (detection id of a duplicate's primary, else -1) and
    ``hit`` (whether a primary was placed on its object).
    """
    width, height = cfg.image_size
    images, gts, rows = [], [], []
    ann_id = 1
    for k in range(cfg.images):
        image_id = k + 1
        images.append(ImageInfo(image_id, float(width), float(height)))
        rng = substream(cfg.seed, "synth", k)
        n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        gt_boxes = []
        for _ in range(n_obj):
            box = _place_box(rng, cfg)
            cat = int(rng.integers(1, cfg.categories + 1))
            gts.append(GroundTruthObject(Box(*box), cat, image_id, False, ann_id))
            gt_boxes.append(box)
            ann_id += 1

            s = float(rng.uniform(*cfg.primary_conf))
            hit = rng.random() < float(cfg.match_probability(s))
            target = rng.uniform(*(cfg.hit_iou if hit else cfg.miss_iou))
            primary = jitter_to_iou(box, target, rng, width, height)
            primary_row = len(rows)
            rows.append((primary, s, cat, image_id, 0, -1, hit))
            n_dup = int(rng.integers(cfg.duplicate_count[0], cfg.duplicate_count[1] + 1))
            for _ in range(n_dup):
                dup = jitter_to_iou(primary, rng.uniform(*cfg.duplicate_iou), rng, width, height)
                if cfg.shuffle_duplicate_rank:
                    s_dup = float(rng.uniform(*cfg.primary_conf))
                else:
                    s_dup = s * float(rng.uniform(*cfg.duplicate_conf_factor))
                rows.append((dup, s_dup, cat, image_id, 1, primary_row, False))

        for _ in range(int(rng.poisson(cfg.fp_rate))):
            for _attempt in range(100):
                box = _place_box(rng, cfg)
                if not any(_touches(box, g) for g in gt_boxes):
                    rows.append((box, float(rng.uniform(*cfg.fp_conf)),
                                 int(rng.integers(1, cfg.categories + 1)), image_id, 2, -1, False))
                    break

    ds = Dataset(tuple(images), tuple(gts),
                 tuple(Category(c, f"class_{c}") for c in range(1, cfg.categories + 1)))
    if rows:
        dets = DetectionSet([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
                            [r[3] for r in rows])
    else:
        dets = DetectionSet.empty()
    if not with_roles:
        return ds, dets
    # detection ids are row positions, so they index the provenance columns
    roles = {
        "role": np.array([r[4] for r in rows], dtype=np.int64)[dets.ids],
        "parent": np.array([r[5] for r in rows], dtype=np.int64)[dets.ids],
        "hit": np.array([r[6] for r in rows], dtype=bool)[dets.ids],
    }
    return ds, dets, roles


def _touches(a, b):
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def write_world(cfg: SynthConfig, out_dir) -> tuple[str, str]:
    """Generate a world and write ``gt.json`` and ``dets.json`` into ``out_dir``."""
    ds, dets = generate(cfg)
    os.makedirs(out_dir, exist_ok=True)
    gt_path = os.path.join(out_dir, "gt.json")
    det_path = os.path.join(out_dir, "dets.json")
    write_json(dataset_to_coco(ds), gt_path)
    write_json(detections_to_coco(dets), det_path)
    return gt_path, det_path
