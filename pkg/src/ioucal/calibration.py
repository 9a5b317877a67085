"""Parametric (conditional) confidence calibration and IoU-aware calibration.

Every calibration map here is a logistic model on transformed inputs::

    p = sigmoid(bias + w . features(v))

* ``logistic`` family: ``features(v) = logit(v)`` per variate.
* ``beta`` family: ``features(v) = (ln v, -ln(1 - v))`` per variate, which
  for the confidence alone gives the Beta map
  ``1 / (1 + 1 / (e^c * s^a / (1 - s)^b))`` and is the identity at
  ``a = b = 1, c = 0``.
* ``dependent`` recipes add pairwise interaction columns: the four products
  of two variates' beta features, or the single product of their logits.

Because the model is linear in its parameters, the mean NLL is convex and is
minimised with a damped Newton method from a fixed starting point, which
makes fitting fully deterministic.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import DetectionSet
from .exceptions import ContractError, FitError
from .geometry import SUMMARY_FIELDS, detection_summaries

VARIATES = ("confidence",) + SUMMARY_FIELDS
FAMILIES = ("logistic", "beta")
MODEL_FORMAT = "ioucal.calibration-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class FeatureRecipe:
    family: str = "beta"
    variates: tuple[str, ...] = ("confidence", "j_min_suppressing")
    dependent: bool = True
    epsilon_clip: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "variates", tuple(self.variates))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown calibration family {self.family!r}")
        if not self.variates or self.variates[0] != "confidence":
            raise ValueError("variates must start with 'confidence'")
        unknown = set(self.variates) - set(VARIATES)
        if unknown:
            raise ValueError(f"unknown variates {sorted(unknown)}")
        if len(set(self.variates)) != len(self.variates):
            raise ValueError("duplicate variates")
        if not 0.0 < self.epsilon_clip <= 0.01:
            raise ValueError("epsilon_clip must lie in (0, 0.01]")

    @property
    def per_variate(self) -> int:
        return 2 if self.family == "beta" else 1

    @property
    def per_pair(self) -> int:
        return 4 if self.family == "beta" else 1

    @property
    def n_params(self) -> int:
        k = len(self.variates)
        n = 1 + self.per_variate * k
        if self.dependent:
            n += self.per_pair * (k * (k - 1) // 2)
        return n

    def identity_theta(self) -> np.ndarray:
        """Parameters of the identity map on the confidence, zero elsewhere."""
        theta = np.zeros(self.n_params)
        theta[1:1 + self.per_variate] = 1.0
        return theta

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variates"] = list(self.variates)
        return d


def featurize_matrix(values, recipe: FeatureRecipe) -> np.ndarray:
    """Design matrix (without bias column) for raw variate values.

    ``values`` has shape (n, len(recipe.variates)); columns follow
    ``recipe.variates``. Values are clipped to ``[eps, 1 - eps]`` first.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != len(recipe.variates):
        raise ContractError(f"expected {len(recipe.variates)} variate columns, got shape {values.shape}")
    eps = recipe.epsilon_clip
    v = np.clip(values, eps, 1.0 - eps)
    if recipe.family == "beta":
        per = np.stack([np.log(v), -np.log1p(-v)], axis=2)  # (n, k, 2)
    else:
        per = (np.log(v) - np.log1p(-v))[:, :, None]
    cols = [per.reshape(len(v), -1)]
    if recipe.dependent:
        for k, l in combinations(range(v.shape[1]), 2):
            cols.append((per[:, k, :, None] * per[:, l, None, :]).reshape(len(v), -1))
    return np.concatenate(cols, axis=1)


def featurize(det_features: Mapping[str, float], recipe: FeatureRecipe) -> np.ndarray:
    """Feature vector for a single detection given a variate -> value map."""
    missing = [name for name in recipe.variates if name not in det_features]
    if missing:
        raise ContractError(f"missing variates {missing}")
    row = [[float(det_features[name]) for name in recipe.variates]]
    return featurize_matrix(row, recipe)[0]


def _design(values, recipe):
    X = featurize_matrix(values, recipe)
    return np.hstack([np.ones((len(X), 1)), X])


def nll_objective(theta, X, y):
    """Mean negative log-likelihood, its gradient and Hessian."""
    z = X @ theta
    p = expit(z)
    n = len(y)
    f = np.mean(np.logaddexp(0.0, z) - y * z)
    g = X.T @ (p - y) / n
    h = (X * (p * (1 - p))[:, None]).T @ X / n
    return f, g, h


def brier_objective(theta, X, y):
    """Mean Brier score, its gradient and Gauss-Newton Hessian."""
    p = expit(X @ theta)
    n = len(y)
    r = p - y
    d = p * (1 - p)
    f = np.mean(r ** 2)
    g = 2.0 * X.T @ (r * d) / n
    h = 2.0 * (X * (d ** 2)[:, None]).T @ X / n
    return f, g, h


OBJECTIVES = {"nll": nll_objective, "brier": brier_objective}


def minimize_newton(objective, theta0, X, y, max_iter=500, tol=1e-7):
    """Damped Newton iteration with Armijo backtracking.

    Stops when ``max |gradient| < tol`` or after ``max_iter`` iterations.
    Returns ``(theta, info)``.
    """
    theta = np.array(theta0, dtype=float)
    f, g, h = objective(theta, X, y)
    it = 0
    while np.max(np.abs(g)) >= tol and it < max_iter:
        it += 1
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(h, g, rcond=None)[0]
        slope = g @ step
        if not np.isfinite(slope) or slope >= 0:
            step, slope = -g, -(g @ g)
        t = 1.0
        while True:
            cand = theta + t * step
            f_new, g_new, h_new = objective(cand, X, y)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            # no further decrease available at working precision
            break
        theta, f, g, h = cand, f_new, g_new, h_new
    gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
    return theta, {"iterations": it, "objective": float(f), "grad_norm": gnorm,
                   "converged": bool(gnorm < tol)}


@dataclass(frozen=True)
class LabeledSample:
    features: tuple[float, ...]
    tp: int


@dataclass(frozen=True)
class CalibrationModel:
    recipe: FeatureRecipe
    theta: np.ndarray
    fit_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).copy()
        if theta.shape != (self.recipe.n_params,):
            raise ValueError(f"theta has {theta.size} entries, recipe needs {self.recipe.n_params}")
        if not np.isfinite(theta).all():
            raise ValueError("non-finite calibration parameters")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def identity(cls, recipe: FeatureRecipe) -> "CalibrationModel":
        return cls(recipe, recipe.identity_theta(), {})

    def predict(self, values) -> np.ndarray:
        """Calibrated probabilities for an (n, k) matrix of raw variate values."""
        return expit(_design(values, self.recipe) @ self.theta)

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "recipe": self.recipe.to_dict(),
            "theta": self.theta.tolist(),
            "fit_meta": self.fit_meta,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibrationModel":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a calibration model document (format={doc.get('format')!r})")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported calibration model version {doc.get('version')!r}")
        return cls(FeatureRecipe(**doc["recipe"]), np.array(doc["theta"], dtype=float),
                   doc.get("fit_meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def calibrate_score(model: CalibrationModel, det_features: Mapping[str, float]) -> float:
    row = featurize(det_features, model.recipe)
    return float(expit(model.theta[0] + row @ model.theta[1:]))


def fit_values(values, y, recipe: FeatureRecipe, *, objective="nll", max_iter=500, tol=1e-7,
               init=None, min_samples=100, t_iou=None) -> CalibrationModel:
    """Fit a calibration map on raw variate values and binary labels."""
    values = np.asarray(values, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) < min_samples:
        raise FitError(f"need at least {min_samples} samples to fit, got {len(y)}")
    if np.all(y == y[0]):
        raise FitError("labels contain a single class; cannot fit calibration")
    X = _design(values, recipe)
    theta0 = recipe.identity_theta() if init is None else np.asarray(init, dtype=float)
    theta, info = minimize_newton(OBJECTIVES[objective], theta0, X, y, max_iter, tol)
    if not np.isfinite(theta).all():
        raise FitError("fit diverged to non-finite parameters")
    meta = dict(info, n_samples=int(len(y)), t_iou=t_iou, objective_kind=objective,
                warning=None if info["converged"] else "not converged")
    if not info["converged"]:
        warnings.warn(f"calibration fit stopped after {info['iterations']} iterations with "
                      f"|grad|={info['grad_norm']:.3g}", RuntimeWarning, stacklevel=2)
    return CalibrationModel(recipe, theta, meta)


def fit(samples: Sequence[LabeledSample], recipe: FeatureRecipe, **opts) -> CalibrationModel:
    """Fit from a list of :class:`LabeledSample` (see :func:`fit_values` for options)."""
    values = np.array([s.features for s in samples], dtype=float).reshape(len(samples), -1)
    return fit_values(values, [s.tp for s in samples], recipe, **opts)


class ConditionalCalibrator(BaseEstimator, ClassifierMixin):
    """Multivariate Logistic/Beta calibration as a scikit-learn classifier.

    ``X`` columns are raw variate values in [0, 1], in the order of
    ``variates``; the first column is always the detector confidence.

    Parameters
    ----------
    family : {"beta", "logistic"}
    variates : tuple of str
    dependent : bool
        Add pairwise interaction terms.
    epsilon_clip : float
    objective : {"nll", "brier"}
    max_iter, tol : optimiser stopping rule.
    min_samples : int
        Refuse to fit on fewer samples.
    """

    def __init__(self, family="beta", variates=("confidence", "j_min_suppressing"), dependent=True,
                 epsilon_clip=1e-6, objective="nll", max_iter=500, tol=1e-7, min_samples=100):
        self.family = family
        self.variates = variates
        self.dependent = dependent
        self.epsilon_clip = epsilon_clip
        self.objective = objective
        self.max_iter = max_iter
        self.tol = tol
        self.min_samples = min_samples

    def recipe(self) -> FeatureRecipe:
        return FeatureRecipe(self.family, tuple(self.variates), self.dependent, self.epsilon_clip)

    def fit(self, X, y, init=None, t_iou=None):
        X, y = check_X_y(X, y, dtype=float, ensure_min_samples=1)
        self.classes_ = np.array([0, 1])
        self.model_ = fit_values(X, y, self.recipe(), objective=self.objective,
                                 max_iter=self.max_iter, tol=self.tol, init=init,
                                 min_samples=self.min_samples, t_iou=t_iou)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float, ensure_min_samples=0)
        p = self.model_.predict(X) if len(X) else np.zeros(0)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


def detection_variates(ds: DetectionSet, variates: Sequence[str], class_agnostic=False) -> np.ndarray:
    """Raw variate matrix (n, len(variates)) for every detection of ``ds``."""
    cols = {"confidence": ds.scores}
    if len(variates) > 1:
        summ = detection_summaries(ds, class_agnostic)
        cols.update({name: summ[:, k] for k, name in enumerate(SUMMARY_FIELDS)})
    return np.column_stack([cols[v] for v in variates]) if len(ds) else np.zeros((0, len(variates)))


class IoUAwareCalibrator(BaseEstimator, TransformerMixin):
    """Replace NMS by calibrating each confidence on its overlap statistics.

    ``fit(dets, y)`` takes a :class:`DetectionSet` with one binary TP label
    per row (in the set's canonical order). ``transform(dets)`` returns the
    same detections with calibrated confidences; nothing is removed.

    With ``variates=("confidence",)`` this is plain univariate calibration.
    """

    def __init__(self, family="beta", variates=("confidence", "j_min_suppressing"), dependent=True,
                 epsilon_clip=1e-6, class_agnostic=False, objective="nll", max_iter=500, tol=1e-7,
                 min_samples=100):
        self.family = family
        self.variates = variates
        self.dependent = dependent
        self.epsilon_clip = epsilon_clip
        self.class_agnostic = class_agnostic
        self.objective = objective
        self.max_iter = max_iter
        self.tol = tol
        self.min_samples = min_samples

    def recipe(self) -> FeatureRecipe:
        return FeatureRecipe(self.family, tuple(self.variates), self.dependent, self.epsilon_clip)

    def features(self, dets: DetectionSet) -> np.ndarray:
        return detection_variates(dets, self.recipe().variates, self.class_agnostic)

    def fit(self, X: DetectionSet, y, t_iou=None):
        y = np.asarray(y).reshape(-1)
        if len(y) != len(X):
            raise ContractError("need exactly one label per detection")
        self.model_ = fit_values(self.features(X), y, self.recipe(), objective=self.objective,
                                 max_iter=self.max_iter, tol=self.tol,
                                 min_samples=self.min_samples, t_iou=t_iou)
        return self

    def transform(self, X: DetectionSet) -> DetectionSet:
        check_is_fitted(self, "model_")
        return iou_aware_calibrate(X, self.model_, self.class_agnostic)

    @classmethod
    def from_model(cls, model: CalibrationModel, class_agnostic=False) -> "IoUAwareCalibrator":
        r = model.recipe
        est = cls(r.family, r.variates, r.dependent, r.epsilon_clip, class_agnostic)
        est.model_ = model
        return est


def iou_aware_calibrate(dets: DetectionSet, model: CalibrationModel, class_agnostic=False) -> DetectionSet:
    """Recalibrate every confidence given its Jaccard summaries."""
    if len(dets) == 0:
        return dets
    values = detection_variates(dets, model.recipe.variates, class_agnostic)
    return dets.with_scores(model.predict(values))
