"""Experiment orchestration: splits, post-processing pipelines, sweeps, studies.

A pipeline run follows the cross-validation protocol: the raw dump is capped
at ``cap_pre`` detections per image, images are split repeatedly into a fit
and an eval partition, any calibration is fitted on the fit partition only,
the post-processing chain is applied to the eval partition, the result is
capped at ``cap_eval`` and scored with mAP/mAP50 and ECE/ACE/SCE/NLL/Brier.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .calibration import IoUAwareCalibrator
from .data import Dataset, DetectionSet, apply_cap, dataset_from_coco, detections_from_coco
from .evaluation import map_metrics, match_many
from .exceptions import FitError
from .metrics import calibration_summary
from .seeding import RNG_SCHEME, substream
from .suppression import NMS

PIPELINES = ("none", "nms", "soft_nms", "beta_univariate", "iou_aware", "nms_plus_beta",
             "soft_plus_beta")
METRICS = ("mAP", "mAP50", "ECE", "ACE", "SCE", "NLL", "Brier")
REPORT_FORMAT = "ioucal.eval-report"
REPORT_VERSION = 1

DEFAULT_PARAMS = {
    "t_nms": 0.5,
    "sigma": 0.2,
    "score_floor": None,
    "family": "beta",
    "variates": ["confidence", "j_min_suppressing"],
    "dependent": True,
    "class_agnostic": False,
}


def load_inputs(gt_path, det_path) -> tuple[Dataset, DetectionSet]:
    gt = dataset_from_coco(gt_path)
    return gt, detections_from_coco(det_path, gt)


def _coerce(gt, dets):
    """Accept either loaded objects or file paths."""
    if not isinstance(gt, Dataset):
        gt = dataset_from_coco(gt)
    if not isinstance(dets, DetectionSet):
        dets = detections_from_coco(dets, gt)
    return gt, dets


@dataclass(frozen=True)
class SplitPlan:
    seed: int = 0
    repeats: int = 10
    fit_fraction: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.fit_fraction < 1.0:
            raise ValueError("fit_fraction must lie in (0, 1)")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def splits(self, image_ids) -> list[tuple[np.ndarray, np.ndarray]]:
        """Image-wise ``(fit_ids, eval_ids)`` pairs, one per repeat."""
        ids = np.sort(np.asarray(image_ids, dtype=np.int64))
        n_fit = int(round(self.fit_fraction * len(ids)))
        out = []
        for r in range(self.repeats):
            perm = substream(self.seed, "split", r).permutation(len(ids))
            out.append((np.sort(ids[perm[:n_fit]]), np.sort(ids[perm[n_fit:]])))
        return out


@dataclass(frozen=True)
class SweepGrid:
    method: str
    param: str
    start: float
    stop: float
    spacing: str = "linear"
    steps: int = 11

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.spacing not in ("linear", "log"):
            raise ValueError("spacing must be 'linear' or 'log'")
        if self.spacing == "log" and not (self.start > 0 and self.stop > 0):
            raise ValueError("log spacing needs a positive interval")

    def values(self) -> np.ndarray:
        if self.steps == 1:
            return np.array([float(self.start)])
        if self.spacing == "linear":
            return np.round(np.linspace(self.start, self.stop, self.steps), 12)
        return np.geomspace(self.start, self.stop, self.steps)


NMS_GRIDS = {
    "nms": SweepGrid("nms", "t_nms", 0.40, 0.90, "linear", 11),
    "soft_nms": SweepGrid("soft_nms", "sigma", 0.001, 0.20, "log", 20),
}


def aggregate(rows: list[dict], metrics=METRICS) -> dict:
    """Mean with maximum positive and negative deviation from it, per metric."""
    ok = [r for r in rows if r.get("status") == "ok"]
    out = {}
    for m in metrics:
        vals = np.array([r[m] for r in ok], dtype=float)
        if len(vals) == 0:
            out[m] = {"mean": None, "max_pos": None, "max_neg": None}
            continue
        mean = float(np.mean(vals))
        out[m] = {"mean": mean, "max_pos": float(vals.max() - mean), "max_neg": float(mean - vals.min())}
    return out


@dataclass
class EvalReport:
    header: dict
    rows: list[dict]
    aggregate: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "header": self.header,
               "rows": self.rows, "aggregate": self.aggregate}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("format") != REPORT_FORMAT or doc.get("version") != REPORT_VERSION:
            raise ValueError("not a supported evaluation report")
        return cls(doc["header"], doc["rows"], doc["aggregate"])

    def mean(self, metric: str) -> float:
        return self.aggregate[metric]["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "status"] + list(METRICS) + ["n_fit_tp", "flags"])
        for r in self.rows:
            w.writerow([r["split"], r["status"]] + [_fmt(r.get(m)) for m in METRICS]
                       + [r.get("n_fit_tp", ""), ";".join(r.get("flags", []))])
        return buf.getvalue()

    def render(self, percent=True) -> str:
        """Plain-text summary; calibration metrics in percent like the usual tables."""
        scale = 100.0 if percent else 1.0
        h = self.header
        lines = [f"pipeline: {h.get('pipeline')}  splits: {h.get('split', {}).get('repeats')}  "
                 f"seed: {h.get('seed')}" + ("  [oracle-tuned]" if h.get("oracle_tuned") else "")]
        for m in METRICS:
            a = self.aggregate.get(m) or {}
            if a.get("mean") is None:
                lines.append(f"  {m:6s}  n/a")
                continue
            s = 1.0 if m in ("NLL", "Brier") else scale
            lines.append(f"  {m:6s} {a['mean'] * s:8.3f}  (+{a['max_pos'] * s:.3f} / -{a['max_neg'] * s:.3f})")
        flags = sorted({f for r in self.rows for f in r.get("flags", [])})
        if flags:
            lines.append("  flags: " + ", ".join(flags))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


def _params(params):
    p = dict(DEFAULT_PARAMS)
    p.update({k: v for k, v in (params or {}).items() if v is not None or k == "score_floor"})
    p["variates"] = list(p["variates"])
    return p


def _suppressor(pipeline, p):
    if pipeline in ("nms", "nms_plus_beta"):
        return NMS("hard", t_nms=p["t_nms"], score_floor=p["score_floor"], class_agnostic=p["class_agnostic"])
    if pipeline in ("soft_nms", "soft_plus_beta"):
        return NMS("soft_gaussian", sigma=p["sigma"], score_floor=p["score_floor"],
                   class_agnostic=p["class_agnostic"])
    return None


def _calibrator(pipeline, p):
    if pipeline == "iou_aware":
        return IoUAwareCalibrator(p["family"], tuple(p["variates"]), p["dependent"],
                                  class_agnostic=p["class_agnostic"])
    if pipeline in ("beta_univariate", "nms_plus_beta", "soft_plus_beta"):
        return IoUAwareCalibrator("beta", ("confidence",), False)
    return None


def fit_labels(dets: DetectionSet, gt: Dataset, t_iou: float):
    """TP labels and keep-mask (crowd-ignored rows dropped) for fitting."""
    tp, ign, _, _ = match_many(dets, gt, [t_iou])
    return tp[0].astype(int), ~ign[0]


def _score(out: DetectionSet, gt_eval: Dataset, cap_eval, t_evals, n_bins, samples_out=None):
    capped = apply_cap(out, cap_eval) if cap_eval is not None else out
    perf = map_metrics(capped, gt_eval, cap=None)
    tp, ign, _, _ = match_many(capped, gt_eval, t_evals)
    cal = []
    for k in range(len(t_evals)):
        keep = ~ign[k]
        if samples_out is not None and k == 0:
            samples_out.append((tp[k][keep].astype(float), capped.scores[keep]))
        if keep.sum() == 0:
            cal.append({m: None for m in ("ECE", "ACE", "SCE", "NLL", "Brier")})
        else:
            cal.append(calibration_summary(tp[k][keep].astype(float), capped.scores[keep],
                                           capped.categories[keep], n_bins))
    return perf, cal


class _Prepared:
    """Caches the per-image post-processing that does not depend on the split."""

    def __init__(self, gt, dets, cap_pre, per_class_cap=False):
        self.gt = gt
        self.dets = apply_cap(dets, cap_pre, per_class_cap) if cap_pre is not None else dets
        self._suppressed = {}

    def stage_one(self, pipeline, p) -> DetectionSet:
        sup = _suppressor(pipeline, p)
        if sup is None:
            return self.dets
        key = (pipeline.split("_")[0], p["t_nms"], p["sigma"], p["score_floor"], p["class_agnostic"])
        if key not in self._suppressed:
            self._suppressed[key] = sup.fit(self.dets).transform(self.dets)
        return self._suppressed[key]


def _check_low_sample(y, min_positives):
    n_tp = int(np.sum(y))
    flags = []
    if n_tp < min_positives or n_tp < 0.01 * max(len(y), 1):
        flags.append("low_sample_fit")
    return n_tp, flags


def run_pipeline(gt: Dataset, dets: DetectionSet, pipeline="iou_aware", params=None,
                 split: SplitPlan = SplitPlan(), cap_pre=400, cap_eval=100, t_iou_fit=0.5,
                 t_iou_eval=0.5, n_bins=10, min_positives=100, oracle_tuned=False,
                 samples_out: list | None = None, per_class_cap=False, _prepared=None) -> EvalReport:
    """Cross-validated evaluation of one post-processing pipeline.

    If ``samples_out`` is a list, the ``(labels, confidences)`` scored on
    each split's eval partition are appended to it.
    """
    if pipeline not in PIPELINES:
        raise ValueError(f"unknown pipeline {pipeline!r}")
    p = _params(params)
    gt, dets = _coerce(gt, dets)
    prep = _prepared or _Prepared(gt, dets, cap_pre, per_class_cap)
    stage = prep.stage_one(pipeline, p)
    rows = []
    for r, (fit_ids, eval_ids) in enumerate(split.splits(gt.image_ids)):
        row = {"split": r, "status": "ok", "flags": []}
        calib = _calibrator(pipeline, p)
        try:
            if calib is not None:
                fit_dets = stage.subset_images(fit_ids)
                y, keep = fit_labels(fit_dets, gt.subset(fit_ids), t_iou_fit)
                row["n_fit_tp"], row["flags"] = _check_low_sample(y[keep], min_positives)
                calib.fit(fit_dets.take(keep), y[keep], t_iou=t_iou_fit)
                if not calib.model_.fit_meta["converged"]:
                    row["flags"].append("fit_not_converged")
                row["theta"] = calib.model_.theta.tolist()
                out = calib.transform(stage.subset_images(eval_ids))
            else:
                out = stage.subset_images(eval_ids)
        except FitError as exc:
            row.update(status="error", error=str(exc))
            rows.append(row)
            continue
        perf, cal = _score(out, gt.subset(eval_ids), cap_eval, [t_iou_eval], n_bins, samples_out)
        row.update(perf)
        row.update(cal[0])
        rows.append(row)
    header = {
        "pipeline": pipeline,
        "params": p,
        "seed": split.seed,
        "rng": RNG_SCHEME,
        "split": asdict(split),
        "cap_pre": cap_pre,
        "cap_eval": cap_eval,
        "t_iou_fit": t_iou_fit,
        "t_iou_eval": t_iou_eval,
        "n_bins": n_bins,
        "oracle_tuned": bool(oracle_tuned),
        "per_class_cap": bool(per_class_cap),
        "failed_splits": [r["split"] for r in rows if r["status"] != "ok"],
    }
    return EvalReport(header, rows, aggregate(rows))


@dataclass
class SweepResult:
    grid: SweepGrid
    rows: list[dict]
    metric: str

    @property
    def best(self) -> dict:
        return max(self.rows, key=lambda r: (r[self.metric], -r["index"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.grid.param, "mAP", "mAP50", "best"])
        best = self.best["index"]
        for r in self.rows:
            w.writerow([repr(r["value"]), repr(r["mAP"]), repr(r["mAP50"]), int(r["index"] == best)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"format": "ioucal.sweep", "version": 1, "grid": asdict(self.grid), "metric": self.metric,
               "oracle_tuned": True, "rows": self.rows, "best": self.best}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def sweep(gt: Dataset, dets: DetectionSet, method="nms", grid: SweepGrid | None = None, metric="mAP",
          cap_pre=400, cap_eval=100, params=None) -> SweepResult:
    """Evaluate an NMS method at every grid point on the full provided set.

    This is oracle tuning (no held-out data), matching how the baselines
    are given their best possible settings.
    """
    grid = grid or NMS_GRIDS[method]
    p = _params(params)
    gt, dets = _coerce(gt, dets)
    base = apply_cap(dets, cap_pre) if cap_pre is not None else dets
    rows = []
    for k, v in enumerate(grid.values()):
        p[grid.param] = float(v)
        out = _suppressor(method, p).transform(base)
        rows.append({"index": k, "value": float(v), **map_metrics(out, gt, cap=cap_eval)})
    return SweepResult(grid, rows, metric)


@dataclass
class TiouStudy:
    t_fit: list[float]
    t_eval: list[float]
    cells: dict  # metric -> matrix (len(t_fit), len(t_eval)) of split means
    n_fit_tp: list[float]
    flags: list[list[str]]
    header: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_fit", "t_eval", "ECE", "ACE", "SCE", "NLL", "mean_fit_tp", "flags"])
        for i, tf in enumerate(self.t_fit):
            for j, te in enumerate(self.t_eval):
                w.writerow([repr(tf), repr(te)] + [_fmt(self.cells[m][i][j]) for m in ("ECE", "ACE", "SCE", "NLL")]
                           + [repr(self.n_fit_tp[i]), ";".join(self.flags[i])])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"format": "ioucal.tiou-study", "version": 1, "t_fit": self.t_fit, "t_eval": self.t_eval,
               "cells": self.cells, "mean_fit_tp": self.n_fit_tp, "flags": self.flags,
               "header": self.header}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def tiou_study(gt: Dataset, dets: DetectionSet, t_fit=(0.5, 0.6, 0.7, 0.8, 0.9),
               t_eval=(0.5, 0.6, 0.7, 0.8, 0.9), params=None, split: SplitPlan = SplitPlan(),
               cap_pre=400, cap_eval=100, n_bins=10, min_positives=100) -> TiouStudy:
    """Calibration metrics for every (fit threshold, evaluation threshold) pair."""
    p = _params(params)
    gt, dets = _coerce(gt, dets)
    t_fit, t_eval = [float(t) for t in t_fit], [float(t) for t in t_eval]
    prep = _Prepared(gt, dets, cap_pre)
    names = ("ECE", "ACE", "SCE", "NLL")
    per = {m: [[[] for _ in t_eval] for _ in t_fit] for m in names}
    tps = [[] for _ in t_fit]
    flags = [set() for _ in t_fit]
    for fit_ids, eval_ids in split.splits(gt.image_ids):
        fit_dets = prep.dets.subset_images(fit_ids)
        eval_dets = prep.dets.subset_images(eval_ids)
        gt_fit, gt_eval = gt.subset(fit_ids), gt.subset(eval_ids)
        for i, tf in enumerate(t_fit):
            y, keep = fit_labels(fit_dets, gt_fit, tf)
            n_tp, fl = _check_low_sample(y[keep], min_positives)
            tps[i].append(n_tp)
            flags[i].update(fl)
            calib = _calibrator("iou_aware", p)
            try:
                calib.fit(fit_dets.take(keep), y[keep], t_iou=tf)
            except FitError:
                flags[i].add("fit_error")
                continue
            _, cal = _score(calib.transform(eval_dets), gt_eval, cap_eval, t_eval, n_bins)
            for j in range(len(t_eval)):
                for m in names:
                    per[m][i][j].append(cal[j][m])
    cells = {m: [[float(np.mean(v)) if v and None not in v else None for v in row] for row in per[m]]
             for m in names}
    header = {"params": p, "seed": split.seed, "rng": RNG_SCHEME, "split": asdict(split),
              "cap_pre": cap_pre, "cap_eval": cap_eval, "n_bins": n_bins}
    return TiouStudy(t_fit, t_eval, cells, [float(np.mean(t)) for t in tps],
                     [sorted(f) for f in flags], header)


OVERLAP_VARIATES = ("j_min_suppressing", "j_prod_suppressing", "j_min_suppressed", "j_prod_suppressed")


def ablation_recipes() -> dict[str, dict]:
    """Recipes of the calibration-function and conditioning-variable ablations."""
    recipes = {}
    for fam in ("logistic", "beta"):
        for dep in (False, True):
            name = f"{'cond' if dep else 'ind'}-{fam}[confidence,j_min_suppressing]"
            recipes[name] = {"family": fam, "dependent": dep,
                             "variates": ["confidence", "j_min_suppressing"]}
    recipes["cond-beta[confidence]"] = {"family": "beta", "dependent": True, "variates": ["confidence"]}
    for v in OVERLAP_VARIATES:
        recipes[f"cond-beta[confidence,{v}]"] = {"family": "beta", "dependent": True,
                                                 "variates": ["confidence", v]}
    extra = OVERLAP_VARIATES[1:]
    for k in (1, 2, 3):
        for combo in combinations(extra, k):
            vs = ["confidence", "j_min_suppressing", *combo]
            recipes[f"cond-beta[{','.join(vs)}]"] = {"family": "beta", "dependent": True, "variates": vs}
    return recipes


def ablation_suite(gt: Dataset, dets: DetectionSet, recipes: dict[str, dict] | None = None,
                   split: SplitPlan = SplitPlan(), **kwargs) -> dict[str, EvalReport]:
    recipes = recipes or ablation_recipes()
    gt, dets = _coerce(gt, dets)
    prep = _Prepared(gt, dets, kwargs.get("cap_pre", 400))
    return {name: run_pipeline(gt, dets, "iou_aware", r, split, _prepared=prep, **kwargs)
            for name, r in recipes.items()}


def ablation_table(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["recipe"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "max_pos", "max_neg")])
    for name, rep in reports.items():
        row = [name]
        for m in METRICS:
            a = rep.aggregate[m]
            row += [_fmt(a["mean"]), _fmt(a["max_pos"]), _fmt(a["max_neg"])]
        w.writerow(row)
    return buf.getvalue()
