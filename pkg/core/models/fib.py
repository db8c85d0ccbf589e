"""
FIB Model
Features -> instance labels -> bag label: a density for P(F), a classifier
for P(I|F) and the deterministic max rule for P(B|I)
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import InsufficientDataError, InvalidInputError, InvalidStateError
from .bag import NORMAL_LABEL, Bag, Dataset, InferenceResult, LabelDomain, bag_label_of
from .classifiers import ClassifierKind, ClassifierOptions, ClassProbModel, fit_classifier
from .density import DensityKind, DensityModel, fit_density

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FibParams:
    """P(F) density plus P(I|F) classifier over a shared feature dimension"""
    feature_density: DensityModel
    instance_classifier: ClassProbModel

    def __post_init__(self):
        if self.feature_density.p != self.instance_classifier.p:
            raise InvalidInputError(
                f"feature density has p={self.feature_density.p} but classifier has "
                f"p={self.instance_classifier.p}"
            )

    @property
    def t(self) -> int:
        return self.instance_classifier.t

    @property
    def p(self) -> int:
        return self.feature_density.p

    @property
    def domain(self) -> LabelDomain:
        return LabelDomain(self.t)

    def log_proba(self, instances) -> np.ndarray:
        """Classifier log P(I | f) for each instance row"""
        return self.instance_classifier.predict_log_proba_many(instances)


def _require_feasible(bag: Bag, domain: LabelDomain) -> np.ndarray:
    if bag.bag_label is None or bag.latent_labels is None:
        raise InvalidStateError(f"bag {bag.bag_id!r} needs a bag label and latent labels")
    labels = domain.validate_all(bag.latent_labels)
    implied = bag_label_of(labels, domain)
    if implied != bag.bag_label:
        raise InvalidStateError(
            f"bag {bag.bag_id!r}: latent labels imply bag label {implied}, stored label is {bag.bag_label}"
        )
    return labels


def fib_estimate(
    dataset: Dataset,
    classifier_kind: ClassifierKind,
    density_kind: DensityKind = DensityKind.KDE,
    options: Optional[ClassifierOptions] = None,
    previous: Optional[FibParams] = None,
) -> FibParams:
    """M-step: P(F) is fitted once and reused from previous; P(I|F) is refitted"""
    for bag in dataset.bags:
        _require_feasible(bag, dataset.domain)

    X = dataset.pooled_instances()
    y = dataset.pooled_latent_labels()

    counts = np.bincount(y, minlength=dataset.t + 1)[1:]
    bag_counts = np.bincount(dataset.bag_labels(), minlength=dataset.t + 1)[1:]
    for label, count, bags in zip(dataset.domain.labels, counts, bag_counts):
        if count == 0 and bags > 0:
            raise InsufficientDataError(f"class {label} has no instances to train the classifier", label=label)

    if previous is not None:
        feature_density = previous.feature_density
    else:
        density_kind = DensityKind(density_kind)
        if X.shape[0] < density_kind.min_samples:
            raise InsufficientDataError(f"P(F) density needs at least {density_kind.min_samples} instances")
        feature_density = fit_density(density_kind, X)
        logger.debug(f"Fitted {density_kind.value} feature density on {X.shape[0]} instances")

    classifier = fit_classifier(classifier_kind, X, y, dataset.t, options)
    return FibParams(feature_density=feature_density, instance_classifier=classifier)


def fib_best_feasible(log_proba: np.ndarray, b: int) -> Tuple[np.ndarray, float]:
    """Best feasible labeling with bag label b and its log-score sum_j log P(i_j | f_j)"""
    m = log_proba.shape[0]
    normal = log_proba[:, NORMAL_LABEL - 1]
    if b == NORMAL_LABEL:
        return np.full(m, NORMAL_LABEL, dtype=int), float(np.sum(normal))

    target = log_proba[:, b - 1]
    labels = np.where(target > normal, b, NORMAL_LABEL)
    if not np.any(labels == b):
        # at least one instance must carry b; flip the cheapest one
        labels[int(np.argmax(target - normal))] = b
    return labels, float(np.sum(log_proba[np.arange(m), labels - 1]))


def fib_e_step(params: FibParams, bag: Bag) -> np.ndarray:
    """Best feasible labels whose bag label equals the bag's known label"""
    if bag.bag_label is None:
        raise InvalidInputError(f"bag {bag.bag_id!r} has no bag label")
    b = params.domain.validate(bag.bag_label)
    labels, _ = fib_best_feasible(params.log_proba(bag.instances), b)
    return labels


def fib_infer(params: FibParams, instances) -> InferenceResult:
    """MAP bag label over every candidate; ties go to the lower bag label"""
    X = np.asarray(instances, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise InvalidInputError("inference needs an m x p instance matrix with m >= 1")
    log_proba = params.log_proba(X)

    scores = np.empty(params.t)
    candidates = []
    for b in params.domain.labels:
        labels, scores[b - 1] = fib_best_feasible(log_proba, b)
        candidates.append(labels)

    best = int(np.argmax(scores))
    return InferenceResult(bag_label=best + 1, instance_labels=candidates[best], label_scores=scores)


def fib_feature_loglik(params: FibParams, dataset: Dataset) -> float:
    """Sum of log P(f) over every instance"""
    return float(np.sum(params.feature_density.logpdf_many(dataset.pooled_instances())))


def fib_loglik(params: FibParams, dataset: Dataset) -> float:
    """Hard log-likelihood: classifier terms of the latent labels plus log P(f)"""
    total = 0.0
    for bag in dataset.bags:
        labels = _require_feasible(bag, params.domain)
        log_proba = params.log_proba(bag.instances)
        total += float(np.sum(log_proba[np.arange(bag.m), labels - 1]))
    return total + fib_feature_loglik(params, dataset)
