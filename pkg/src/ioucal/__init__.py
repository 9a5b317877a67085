"""IoU-aware confidence calibration for object detection.

Replaces or complements non-maximum suppression by a calibration map that
conditions a detection's confidence on its overlap with more confident
detections of the same class, and provides the NMS baselines, calibration
metrics, COCO-style evaluation and an experiment harness around it.
"""
from .calibration import (CalibrationModel, ConditionalCalibrator, FeatureRecipe, IoUAwareCalibrator,
                          LabeledSample, calibrate_score, featurize, fit, iou_aware_calibrate)
from .data import (Box, Category, Dataset, Detection, DetectionSet, GroundTruthObject, ImageInfo,
                   apply_cap, dataset_from_coco, dataset_to_coco, detections_from_coco,
                   detections_to_coco, validate_dataset)
from .evaluation import MatchResult, PRCurve, average_precision, map_metrics, match
from .exceptions import ContractError, FitError, SynthError, ValidationError
from .geometry import JaccardSummary, iou, jaccard_summaries, pairwise_jaccard_matrix
from .harness import EvalReport, SplitPlan, SweepGrid, ablation_suite, run_pipeline, sweep, tiou_study
from .metrics import BinningSpec, ReliabilityTable, ace, brier, ece, nll, reliability_table, sce
from .suppression import NMS, SuppressionConfig, suppress
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "Box", "Category", "Dataset", "Detection", "DetectionSet", "GroundTruthObject", "ImageInfo",
    "apply_cap", "dataset_from_coco", "dataset_to_coco", "detections_from_coco", "detections_to_coco",
    "validate_dataset",
    "JaccardSummary", "iou", "jaccard_summaries", "pairwise_jaccard_matrix",
    "NMS", "SuppressionConfig", "suppress",
    "CalibrationModel", "ConditionalCalibrator", "FeatureRecipe", "IoUAwareCalibrator", "LabeledSample",
    "calibrate_score", "featurize", "fit", "iou_aware_calibrate",
    "BinningSpec", "ReliabilityTable", "ace", "brier", "ece", "nll", "reliability_table", "sce",
    "MatchResult", "PRCurve", "average_precision", "map_metrics", "match",
    "SynthConfig", "generate",
    "EvalReport", "SplitPlan", "SweepGrid", "ablation_suite", "run_pipeline", "sweep", "tiou_study",
    "ContractError", "FitError", "SynthError", "ValidationError",
]
