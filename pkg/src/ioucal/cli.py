"""Command-line interface: ``ioucal <subcommand> [options]``.

Every option can also come from a YAML file given with ``--config``. Keys
are option names with underscores; top-level keys apply to all subcommands
and a mapping named after a subcommand applies to that subcommand only.
Explicit command-line flags win over the file.

Exit codes: 0 success, 2 validation failure, 3 fit failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import yaml

from . import harness
from .calibration import CalibrationModel, IoUAwareCalibrator, iou_aware_calibrate
from .data import apply_cap, dataset_from_coco, detections_from_coco, detections_to_coco, write_json
from .exceptions import FitError, SynthError, ValidationError
from .metrics import BinningSpec, reliability_table
from .suppression import NMS
from .synth import SynthConfig, write_world

EXIT_VALIDATION, EXIT_FIT, EXIT_IO = 2, 3, 4


def _common(p, gt=True, dets=True):
    if gt:
        p.add_argument("--gt", help="COCO annotation JSON")
    if dets:
        p.add_argument("--dets", help="COCO results JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file or directory")


def _split_args(p):
    p.add_argument("--splits", type=int, default=10, help="number of random image-wise splits")
    p.add_argument("--fit-frac", type=float, default=0.6)
    p.add_argument("--t-iou", type=float, default=0.5, help="IoU threshold for fitting labels")
    p.add_argument("--t-iou-eval", type=float, default=0.5, help="IoU threshold for calibration metrics")
    p.add_argument("--cap-pre", type=int, default=400)
    p.add_argument("--cap-eval", type=int, default=100)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--per-class-cap", action="store_true", help="apply --cap-pre per (image, category)")


def _recipe_args(p):
    p.add_argument("--family", choices=["beta", "logistic"], default="beta")
    p.add_argument("--variates", nargs="+", default=["confidence", "j_min_suppressing"])
    p.add_argument("--independent", action="store_true", help="drop interaction terms")
    p.add_argument("--class-agnostic", action="store_true")


def _nms_args(p):
    p.add_argument("--t-nms", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--score-floor", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ioucal", description="IoU-aware calibration and NMS toolkit")
    parser.add_argument("--config", help="YAML file providing option defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check annotation and detection files")
    _common(p)

    p = sub.add_parser("synth", help="generate a synthetic detection world")
    _common(p, gt=False, dets=False)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--objects", type=int, nargs=2, default=[1, 8], metavar=("MIN", "MAX"))
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--duplicates", type=int, nargs=2, default=[0, 0], metavar=("MIN", "MAX"))
    p.add_argument("--duplicate-iou", type=float, nargs=2, default=[0.6, 0.9], metavar=("LO", "HI"))
    p.add_argument("--law", choices=["calibrated", "overconfident_pow", "logistic_skew"], default="calibrated")
    p.add_argument("--law-param", type=float, default=1.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    p.add_argument("--box-scale", type=float, nargs=2, default=[32.0, 160.0], metavar=("LO", "HI"))

    p = sub.add_parser("fit", help="fit a calibration model on a full dump")
    _common(p)
    _recipe_args(p)
    p.add_argument("--t-iou", type=float, default=0.5)
    p.add_argument("--cap-pre", type=int, default=400)

    p = sub.add_parser("apply", help="apply a fitted calibration model")
    _common(p, gt=False)
    p.add_argument("--model", required=False)
    p.add_argument("--cap-pre", type=int, default=400)
    p.add_argument("--class-agnostic", action="store_true")

    p = sub.add_parser("nms", help="run greedy or soft NMS on a dump")
    _common(p, gt=False)
    p.add_argument("--kind", choices=["hard", "soft"], default="hard")
    _nms_args(p)
    p.add_argument("--cap-pre", type=int, default=400)

    p = sub.add_parser("eval", help="cross-validated evaluation of a pipeline")
    _common(p)
    _split_args(p)
    _recipe_args(p)
    _nms_args(p)
    p.add_argument("--pipeline", choices=harness.PIPELINES, default="iou_aware")

    p = sub.add_parser("sweep", help="oracle hyper-parameter sweep of an NMS method")
    _common(p)
    p.add_argument("--method", choices=["nms", "soft_nms"], default="nms")
    p.add_argument("--start", type=float)
    p.add_argument("--stop", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--spacing", choices=["linear", "log"])
    p.add_argument("--metric", choices=["mAP", "mAP50"], default="mAP")
    p.add_argument("--cap-pre", type=int, default=400)
    p.add_argument("--cap-eval", type=int, default=100)

    p = sub.add_parser("study-tiou", help="fit/eval IoU-threshold grid of calibration metrics")
    _common(p)
    _split_args(p)
    _recipe_args(p)
    p.add_argument("--t-fit", type=float, nargs="+", default=[0.5, 0.6, 0.7, 0.8, 0.9])
    p.add_argument("--t-eval", type=float, nargs="+", default=[0.5, 0.6, 0.7, 0.8, 0.9])

    p = sub.add_parser("ablate", help="run the calibration-recipe ablation grid")
    _common(p)
    _split_args(p)

    p = sub.add_parser("report", help="re-render a saved evaluation report")
    p.add_argument("--in", dest="input", required=False)
    p.add_argument("--format", choices=["text", "csv", "json"], default="text")
    p.add_argument("--out")
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ValidationError([f"config {known.config}: top level must be a mapping"])
    sub_actions = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub_actions.choices.items():
        known_dests = {a.dest for a in sp._actions}
        values = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
        values.update({k.replace("-", "_"): v for k, v in (cfg.get(name) or {}).items()})
        unknown = set(values) - known_dests - {"config"}
        if name in cfg and unknown & set(k.replace("-", "_") for k in cfg[name]):
            raise ValidationError([f"config section {name!r}: unknown keys {sorted(unknown)}"])
        sp.set_defaults(**{k: v for k, v in values.items() if k in known_dests})


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise ValidationError([f"missing required option --{n.replace('_', '-')}" for n in missing])


def _write(path, text):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _params(args):
    return {
        "t_nms": getattr(args, "t_nms", None),
        "sigma": getattr(args, "sigma", None),
        "score_floor": getattr(args, "score_floor", None),
        "family": getattr(args, "family", None),
        "variates": getattr(args, "variates", None),
        "dependent": not getattr(args, "independent", False),
        "class_agnostic": getattr(args, "class_agnostic", False),
    }


def _plan(args):
    return harness.SplitPlan(args.seed, args.splits, args.fit_frac)


def cmd_validate(args):
    _require(args, "gt")
    gt = dataset_from_coco(args.gt)
    msg = f"ground truth OK: {len(gt.images)} images, {len(gt.ground_truth)} objects, {len(gt.categories)} categories"
    if args.dets:
        dets = detections_from_coco(args.dets, gt)
        msg += f"\ndetections OK: {len(dets)} detections over {len(dets.image_ids)} images"
    print(msg)


def cmd_synth(args):
    _require(args, "out")
    cfg = SynthConfig(seed=args.seed, images=args.images, objects_per_image=tuple(args.objects),
                      categories=args.categories, duplicate_count=tuple(args.duplicates),
                      duplicate_iou=tuple(args.duplicate_iou), confidence_law=args.law,
                      law_param=args.law_param, fp_rate=args.fp_rate, box_scale=tuple(args.box_scale))
    gt_path, det_path = write_world(cfg, args.out)
    _write(os.path.join(args.out, "synth_config.json"), json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {gt_path} and {det_path}")


def cmd_fit(args):
    _require(args, "gt", "dets", "out")
    gt, dets = harness.load_inputs(args.gt, args.dets)
    dets = apply_cap(dets, args.cap_pre)
    y, keep = harness.fit_labels(dets, gt, args.t_iou)
    est = IoUAwareCalibrator(args.family, tuple(args.variates), not args.independent,
                             class_agnostic=args.class_agnostic)
    est.fit(dets.take(keep), y[keep], t_iou=args.t_iou)
    est.model_.save(args.out)
    print(f"fitted {est.model_.recipe.family} on {int(keep.sum())} detections -> {args.out}")


def cmd_apply(args):
    _require(args, "dets", "model", "out")
    model = CalibrationModel.load(args.model)
    dets = apply_cap(detections_from_coco(args.dets), args.cap_pre)
    out = iou_aware_calibrate(dets, model, args.class_agnostic)
    write_json(detections_to_coco(out), args.out)
    print(f"calibrated {len(out)} detections -> {args.out}")


def cmd_nms(args):
    _require(args, "dets", "out")
    dets = apply_cap(detections_from_coco(args.dets), args.cap_pre)
    est = NMS("hard" if args.kind == "hard" else "soft_gaussian", args.t_nms, args.sigma, args.score_floor)
    out = est.fit(dets).transform(dets)
    write_json(detections_to_coco(out), args.out)
    print(f"kept {len(out)} of {len(dets)} detections -> {args.out}")


def cmd_eval(args):
    _require(args, "gt", "dets", "out")
    gt, dets = harness.load_inputs(args.gt, args.dets)
    samples = []
    rep = harness.run_pipeline(gt, dets, args.pipeline, _params(args), _plan(args), args.cap_pre,
                               args.cap_eval, args.t_iou, args.t_iou_eval, args.bins,
                               samples_out=samples, per_class_cap=args.per_class_cap)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "report.json"), rep.to_json())
    _write(os.path.join(args.out, "splits.csv"), rep.to_csv())
    if samples:
        y = np.concatenate([s[0] for s in samples])
        p = np.concatenate([s[1] for s in samples])
        table = reliability_table(y, p, BinningSpec("equal_width", args.bins))
        _write(os.path.join(args.out, "reliability.csv"), table.to_csv())
    print(rep.render(), end="")
    if rep.header["failed_splits"] and len(rep.header["failed_splits"]) == len(rep.rows):
        raise FitError("every split failed to fit")


def cmd_sweep(args):
    _require(args, "gt", "dets", "out")
    gt, dets = harness.load_inputs(args.gt, args.dets)
    base = harness.NMS_GRIDS[args.method]
    grid = harness.SweepGrid(args.method, base.param,
                             base.start if args.start is None else args.start,
                             base.stop if args.stop is None else args.stop,
                             args.spacing or base.spacing, args.steps or base.steps)
    res = harness.sweep(gt, dets, args.method, grid, args.metric, args.cap_pre, args.cap_eval)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "sweep.csv"), res.to_csv())
    _write(os.path.join(args.out, "sweep.json"), res.to_json())
    b = res.best
    print(f"best {grid.param}={b['value']:.6g}: mAP={100 * b['mAP']:.2f} mAP50={100 * b['mAP50']:.2f} (oracle-tuned)")


def cmd_study_tiou(args):
    _require(args, "gt", "dets", "out")
    gt, dets = harness.load_inputs(args.gt, args.dets)
    st = harness.tiou_study(gt, dets, args.t_fit, args.t_eval, _params(args), _plan(args),
                            args.cap_pre, args.cap_eval, args.bins)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "tiou.csv"), st.to_csv())
    _write(os.path.join(args.out, "tiou.json"), st.to_json())
    print(st.to_csv(), end="")


def cmd_ablate(args):
    _require(args, "gt", "dets", "out")
    gt, dets = harness.load_inputs(args.gt, args.dets)
    reps = harness.ablation_suite(gt, dets, split=_plan(args), cap_pre=args.cap_pre,
                                  cap_eval=args.cap_eval, t_iou_fit=args.t_iou,
                                  t_iou_eval=args.t_iou_eval, n_bins=args.bins)
    os.makedirs(args.out, exist_ok=True)
    table = harness.ablation_table(reps)
    _write(os.path.join(args.out, "ablation.csv"), table)
    doc = {name: json.loads(r.to_json()) for name, r in reps.items()}
    _write(os.path.join(args.out, "ablation.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(table, end="")


def cmd_report(args):
    _require(args, "input")
    with open(args.input) as fh:
        rep = harness.EvalReport.from_json(fh.read())
    text = {"text": rep.render, "csv": rep.to_csv, "json": rep.to_json}[args.format]()
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "validate": cmd_validate, "synth": cmd_synth, "fit": cmd_fit, "apply": cmd_apply, "nms": cmd_nms,
    "eval": cmd_eval, "sweep": cmd_sweep, "study-tiou": cmd_study_tiou, "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except (ValidationError, SynthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
