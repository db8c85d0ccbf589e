"""
Instance Classifiers
Class-probability models P(I|F) for the FIB structure: ridge multinomial
logistic regression, Laplace-smoothed KNN, QDA and binary diverse density
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import ClassVar, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import optimize
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from ..config import settings
from ..errors import (
    ConfigurationError,
    DimensionMismatchError,
    InsufficientDataError,
    InvalidInputError,
    InvalidLabelError,
    UnsupportedDomainError,
)
from .density import GaussianParams, fit_gaussian, regularized_cholesky, VARIANCE_FLOOR

logger = logging.getLogger(__name__)

# Smallest probability assigned to a class that cannot occur
LOG_PROBABILITY_FLOOR = math.log(1e-300)
DD_PROBABILITY_CLIP = 1e-12
_CHUNK_CELLS = 2_000_000


class ClassifierKind(str, Enum):
    """Classifiers selectable for P(I|F)"""
    LR = "lr"
    KNN = "knn"
    QDA = "qda"
    DD = "dd"


class ClassifierOptions(BaseModel):
    """Hyper-parameters shared by the classifier factory"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    neighbours: int = Field(default_factory=lambda: settings.KNN_NEIGHBOURS, ge=1)
    smoothing: float = Field(default_factory=lambda: settings.KNN_SMOOTHING, gt=0.0)
    ridge: float = Field(default_factory=lambda: settings.LR_RIDGE, ge=0.0)
    tolerance: float = Field(default_factory=lambda: settings.LR_TOLERANCE, gt=0.0)
    max_iterations: int = Field(default_factory=lambda: settings.LR_MAX_ITERATIONS, ge=1)
    dd_max_starts: int = Field(default_factory=lambda: settings.DD_MAX_STARTS, ge=1)
    dd_max_iterations: int = Field(default_factory=lambda: settings.DD_MAX_ITERATIONS, ge=1)

    @classmethod
    def build(cls, **values) -> "ClassifierOptions":
        """Validated options, raising ConfigurationError instead of pydantic's error"""
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"invalid classifier options: {e}")


class ClassProbModel(ABC):
    """A fitted model of P(I = i | F = f) over labels 1..t"""

    kind: ClassVar[ClassifierKind]

    @property
    @abstractmethod
    def t(self) -> int:
        """Number of instance labels"""

    @property
    @abstractmethod
    def p(self) -> int:
        """Feature dimension"""

    @abstractmethod
    def _log_proba(self, F: np.ndarray) -> np.ndarray:
        """n x t log-probabilities for validated points"""

    def predict_log_proba_many(self, points) -> np.ndarray:
        """n x t matrix of log P(I=i | f), one row per point"""
        F = np.asarray(points, dtype=float)
        if F.ndim == 1:
            F = F.reshape(1, -1)
        if F.shape[1] != self.p:
            raise DimensionMismatchError(f"classifier has p={self.p}, got {F.shape[1]} features")
        return self._log_proba(F)

    def predict_log_proba(self, f) -> np.ndarray:
        return self.predict_log_proba_many(np.asarray(f, dtype=float).reshape(1, -1))[0]


def _normalize_log(log_joint: np.ndarray) -> np.ndarray:
    return log_joint - logsumexp(log_joint, axis=1, keepdims=True)


# Logistic regression

def _design(X: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((X.shape[0], 1)), X])


def logistic_objective(theta: np.ndarray, design: np.ndarray, onehot: np.ndarray, ridge: float) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus ridge on non-intercept weights, and its gradient.

    theta is the flattened (t-1) x (p+1) weight matrix; class t is the reference
    class with zero logits.
    """
    n, t = onehot.shape
    weights = theta.reshape(t - 1, design.shape[1])
    logits = np.hstack([design @ weights.T, np.zeros((n, 1))])
    log_norm = logsumexp(logits, axis=1)
    nll = float(np.sum(log_norm) - np.sum(logits * onehot)) / n

    slopes = weights[:, 1:]
    value = nll + 0.5 * ridge * float(np.sum(slopes * slopes))

    proba = np.exp(logits - log_norm[:, None])
    grad = (proba - onehot)[:, : t - 1].T @ design / n
    grad[:, 1:] += ridge * slopes
    return value, grad.ravel()


@dataclass(frozen=True)
class LogisticParams(ClassProbModel):
    """Multinomial logit with class t as the zero-coefficient reference"""
    weights: np.ndarray
    regularization: float
    kind: ClassVar[ClassifierKind] = ClassifierKind.LR

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        if weights.ndim != 2 or weights.shape[1] < 2:
            raise InvalidInputError(f"logistic weights must be (t-1) x (p+1), got {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise InvalidInputError("logistic weights must be finite")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def t(self) -> int:
        return self.weights.shape[0] + 1

    @property
    def p(self) -> int:
        return self.weights.shape[1] - 1

    def _log_proba(self, F: np.ndarray) -> np.ndarray:
        logits = np.hstack([_design(F) @ self.weights.T, np.zeros((F.shape[0], 1))])
        return _normalize_log(logits)


def fit_logistic(X: np.ndarray, y: np.ndarray, t: int, options: ClassifierOptions) -> LogisticParams:
    """Ridge-penalized multinomial logistic regression; class t is the reference with zero logit"""
    design = _design(X)
    onehot = np.eye(t)[y - 1]
    n_params = (t - 1) * design.shape[1]

    result = optimize.minimize(
        logistic_objective,
        np.zeros(n_params),
        args=(design, onehot, options.ridge),
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": options.max_iterations,
            "gtol": options.tolerance / math.sqrt(n_params),
            "ftol": 0.0,
        },
    )
    grad_norm = float(np.linalg.norm(result.jac))
    if grad_norm > options.tolerance:
        logger.warning(
            f"Logistic regression stopped with gradient norm {grad_norm:.3g} "
            f"after {result.nit} iterations: {result.message}"
        )
    else:
        logger.debug(f"Logistic regression converged in {result.nit} iterations")

    return LogisticParams(weights=result.x.reshape(t - 1, design.shape[1]), regularization=options.ridge)


# K-nearest neighbours

@dataclass(frozen=True)
class KnnParams(ClassProbModel):
    """Stored sample with Laplace-smoothed neighbour label counts"""
    support_points: np.ndarray
    support_labels: np.ndarray
    k: int
    smoothing: float
    n_labels: int
    kind: ClassVar[ClassifierKind] = ClassifierKind.KNN

    def __post_init__(self):
        points = np.array(self.support_points, dtype=float)
        labels = np.array(self.support_labels, dtype=int).ravel()
        if points.ndim != 2 or labels.size != points.shape[0]:
            raise InvalidInputError("KNN support points and labels disagree in length")
        if not 1 <= self.k <= points.shape[0]:
            raise InvalidInputError(f"KNN needs 1 <= k <= {points.shape[0]}, got k={self.k}")
        if self.smoothing <= 0:
            raise InvalidInputError("KNN smoothing must be positive")
        for array in (points, labels):
            array.setflags(write=False)
        object.__setattr__(self, "support_points", points)
        object.__setattr__(self, "support_labels", labels)

    @property
    def t(self) -> int:
        return self.n_labels

    @property
    def p(self) -> int:
        return self.support_points.shape[1]

    def _log_proba(self, F: np.ndarray) -> np.ndarray:
        n_support = self.support_points.shape[0]
        classes = np.arange(1, self.t + 1)
        counts = np.empty((F.shape[0], self.t))
        step = max(1, _CHUNK_CELLS // n_support)
        for start in range(0, F.shape[0], step):
            rows = slice(start, start + step)
            d2 = cdist(F[rows], self.support_points, "sqeuclidean")
            # stable sort keeps the lower support index on distance ties
            nearest = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
            neighbour_labels = self.support_labels[nearest]
            counts[rows] = (neighbour_labels[:, :, None] == classes).sum(axis=1)
        proba = (counts + self.smoothing) / (self.k + self.t * self.smoothing)
        return np.log(proba)


def fit_knn(X: np.ndarray, y: np.ndarray, t: int, options: ClassifierOptions) -> KnnParams:
    """Store the sample; k is capped at the sample size"""
    k = min(options.neighbours, X.shape[0])
    return KnnParams(support_points=X, support_labels=y, k=k, smoothing=options.smoothing, n_labels=t)


# Quadratic discriminant analysis

@dataclass(frozen=True)
class QdaParams(ClassProbModel):
    """Per-class Gaussians with empirical priors; absent classes carry prior 0"""
    priors: np.ndarray
    class_gaussians: Tuple[Optional[GaussianParams], ...]
    kind: ClassVar[ClassifierKind] = ClassifierKind.QDA

    def __post_init__(self):
        priors = np.array(self.priors, dtype=float).ravel()
        gaussians = tuple(self.class_gaussians)
        if priors.size != len(gaussians) or priors.size < 2:
            raise InvalidInputError("QDA needs one prior and one Gaussian slot per class")
        if abs(priors.sum() - 1.0) > 1e-9 or np.any(priors < 0):
            raise InvalidInputError("QDA priors must be a probability vector")
        if not any(g is not None for g in gaussians):
            raise InvalidInputError("QDA needs at least one fitted class")
        for prior, gaussian in zip(priors, gaussians):
            if (gaussian is None) != (prior == 0):
                raise InvalidInputError("QDA classes without a Gaussian must have prior 0")
        priors.setflags(write=False)
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "class_gaussians", gaussians)

    @property
    def t(self) -> int:
        return self.priors.size

    @property
    def p(self) -> int:
        return next(g for g in self.class_gaussians if g is not None).p

    def log_joint(self, F: np.ndarray) -> np.ndarray:
        """log prior + class log-density; -inf for absent classes"""
        out = np.full((F.shape[0], self.t), -np.inf)
        for c, gaussian in enumerate(self.class_gaussians):
            if gaussian is not None:
                out[:, c] = math.log(self.priors[c]) + gaussian.logpdf_many(F)
        return out

    def _log_proba(self, F: np.ndarray) -> np.ndarray:
        log_post = _normalize_log(self.log_joint(F))
        if np.all(np.isfinite(log_post)):
            return log_post
        return _normalize_log(np.maximum(log_post, LOG_PROBABILITY_FLOOR))


def _pooled_covariance(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    centered = np.empty_like(X)
    for label in np.unique(y):
        rows = y == label
        centered[rows] = X[rows] - X[rows].mean(axis=0)
    cov = centered.T @ centered / X.shape[0]
    diag = np.diag_indices(X.shape[1])
    cov[diag] = np.maximum(cov[diag], VARIANCE_FLOOR)
    cov, _ = regularized_cholesky(cov)
    return cov


def fit_qda(X: np.ndarray, y: np.ndarray, t: int, options: Optional[ClassifierOptions] = None) -> QdaParams:
    """One full Gaussian per class with empirical class priors"""
    counts = np.bincount(y, minlength=t + 1)[1:]
    pooled: Optional[np.ndarray] = None
    gaussians = []
    for label in range(1, t + 1):
        rows = X[y == label]
        if rows.shape[0] >= 2:
            gaussians.append(fit_gaussian(rows))
        elif rows.shape[0] == 1:
            if pooled is None:
                pooled = _pooled_covariance(X, y)
            logger.warning(f"QDA class {label} has one sample, using the pooled covariance")
            gaussians.append(GaussianParams(mean=rows[0], covariance=pooled))
        else:
            logger.warning(f"QDA class {label} has no samples, prior set to 0")
            gaussians.append(None)
    return QdaParams(priors=counts / counts.sum(), class_gaussians=tuple(gaussians))


# Diverse density

def _dd_log_proba(F: np.ndarray, w: np.ndarray, s: np.ndarray) -> np.ndarray:
    d = np.sum((s * s) * (F - w) ** 2, axis=1)
    q = np.clip(np.exp(-d), DD_PROBABILITY_CLIP, 1.0 - DD_PROBABILITY_CLIP)
    return np.column_stack([np.log1p(-q), np.log(q)])


def diverse_density_objective(theta: np.ndarray, X: np.ndarray, positive: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean Bernoulli negative log-likelihood of the DD model and its gradient in (w, s)"""
    p = X.shape[1]
    w, s = theta[:p], theta[p:]
    diff = X - w
    d = np.sum((s * s) * diff * diff, axis=1)
    raw_q = np.exp(-d)
    q = np.clip(raw_q, DD_PROBABILITY_CLIP, 1.0 - DD_PROBABILITY_CLIP)
    n = X.shape[0]

    nll = -(np.sum(np.log(q[positive])) + np.sum(np.log1p(-q[~positive]))) / n

    # dNLL/dd per sample; zero where q is clipped
    coef = np.where(positive, 1.0, -q / (1.0 - q))
    coef = np.where(raw_q == q, coef, 0.0) / n
    grad_w = -2.0 * (s * s) * (coef @ diff)
    grad_s = 2.0 * s * (coef @ (diff * diff))
    return float(nll), np.concatenate([grad_w, grad_s])


@dataclass(frozen=True)
class DiverseDensityParams(ClassProbModel):
    """Binary model with P(I=2|f) = exp(-sum_k s_k^2 (f_k - w_k)^2)"""
    w: np.ndarray
    s: np.ndarray
    kind: ClassVar[ClassifierKind] = ClassifierKind.DD

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        s = np.array(self.s, dtype=float).ravel()
        if w.shape != s.shape:
            raise InvalidInputError("diverse density w and s must have the same length")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(s))):
            raise InvalidInputError("diverse density parameters must be finite")
        for array in (w, s):
            array.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "s", s)

    @property
    def t(self) -> int:
        return 2

    @property
    def p(self) -> int:
        return self.w.size

    def positive_probability(self, F: np.ndarray) -> np.ndarray:
        """exp(-sum s_k^2 (f_k - w_k)^2), clipped away from 0 and 1"""
        return np.exp(self._log_proba(np.atleast_2d(F))[:, 1])

    def _log_proba(self, F: np.ndarray) -> np.ndarray:
        return _dd_log_proba(F, self.w, self.s)


def _dd_start_indices(n_positive: int, max_starts: int) -> np.ndarray:
    count = min(n_positive, max_starts)
    return np.unique(np.linspace(0, n_positive - 1, count).round().astype(int))


def fit_diverse_density(X: np.ndarray, y: np.ndarray, t: int, options: ClassifierOptions) -> DiverseDensityParams:
    """Concept point and feature scales maximizing the diverse density, best of several starts"""
    if t != 2:
        raise UnsupportedDomainError(f"diverse density requires t = 2, got t = {t}")
    positive = y == 2
    if not positive.any():
        raise InsufficientDataError("diverse density needs at least one instance labelled 2", label=2)
    if positive.all():
        raise InsufficientDataError("diverse density needs at least one instance labelled 1", label=1)

    p = X.shape[1]
    positives = X[positive]
    best: Optional[optimize.OptimizeResult] = None
    best_start = -1
    for start in _dd_start_indices(positives.shape[0], options.dd_max_starts):
        theta0 = np.concatenate([positives[start], np.ones(p)])
        result = optimize.minimize(
            diverse_density_objective,
            theta0,
            args=(X, positive),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": options.dd_max_iterations},
        )
        logger.debug(f"DD start {start}: nll={result.fun:.6g} ({result.nit} iterations)")
        # strict improvement keeps the lowest start index on ties
        if best is None or result.fun < best.fun:
            best, best_start = result, int(start)

    logger.info(f"Diverse density fitted, best start {best_start} with nll {best.fun:.6g}")
    return DiverseDensityParams(w=best.x[:p], s=best.x[p:])


_FITTERS = {
    ClassifierKind.LR: fit_logistic,
    ClassifierKind.KNN: fit_knn,
    ClassifierKind.QDA: fit_qda,
    ClassifierKind.DD: fit_diverse_density,
}


def fit_classifier(
    kind: ClassifierKind,
    samples,
    labels,
    t: int,
    options: Optional[ClassifierOptions] = None,
) -> ClassProbModel:
    """Fit the classifier named by kind on (sample, label) pairs over labels 1..t"""
    kind = ClassifierKind(kind)
    options = options or ClassifierOptions()
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(labels, dtype=int).ravel()
    if X.shape[0] != y.size:
        raise InvalidInputError(f"{X.shape[0]} samples but {y.size} labels")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("classifier samples contain non-finite values")
    if y.size and (y.min() < 1 or y.max() > t):
        raise InvalidLabelError(f"classifier labels must lie in 1..{t}")
    if kind is ClassifierKind.DD and t != 2:
        raise UnsupportedDomainError(f"diverse density requires t = 2, got t = {t}")
    if y.size < t:
        raise InsufficientDataError(f"{kind.value} classifier needs at least {t} samples, got {y.size}")

    return _FITTERS[kind](X, y, t, options)


def predict_log_proba(model: ClassProbModel, f) -> np.ndarray:
    """t-vector of log-probabilities for one feature vector"""
    return model.predict_log_proba(f)


def predict_log_proba_many(model: ClassProbModel, points) -> np.ndarray:
    """Row-wise log-probabilities for a matrix of feature vectors"""
    return model.predict_log_proba_many(points)
