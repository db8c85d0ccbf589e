"""
BIF Model
Bag label -> instance labels -> features: tabular P(B) and P(I|B) with
compatibility clamping, one density per instance label, hard E-step,
MAP inference, log-likelihood and generative sampling
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from ..config import settings
from ..errors import InsufficientDataError, InvalidInputError, InvalidStateError
from .bag import (
    NORMAL_LABEL,
    Bag,
    Dataset,
    InferenceResult,
    LabelDomain,
    compatibility_mask,
)
from .density import DensityKind, DensityModel, SeedLike, fit_density, make_rng

logger = logging.getLogger(__name__)

SizeSampler = Callable[[np.random.Generator], int]


@dataclass(frozen=True)
class BifParams:
    """Fitted BIF components; row b-1 of instance_table is P(I | B = b)"""
    bag_prior: np.ndarray
    instance_table: np.ndarray
    class_densities: Tuple[DensityModel, ...]

    def __post_init__(self):
        prior = np.array(self.bag_prior, dtype=float).ravel()
        t = prior.size
        table = np.array(self.instance_table, dtype=float).reshape(t, t)
        densities = tuple(self.class_densities)

        if len(densities) != t:
            raise InvalidInputError(f"BIF needs {t} class densities, got {len(densities)}")
        if len({d.p for d in densities}) != 1:
            raise InvalidInputError("BIF class densities disagree on the feature dimension")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise InvalidInputError("bag prior must be a probability vector")
        if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidInputError("every instance-table row must be a probability vector")
        if np.any(table[~compatibility_mask(LabelDomain(t))] != 0):
            raise InvalidInputError("instance table puts mass on an incompatible label")

        for array in (prior, table):
            array.setflags(write=False)
        object.__setattr__(self, "bag_prior", prior)
        object.__setattr__(self, "instance_table", table)
        object.__setattr__(self, "class_densities", densities)

    @property
    def t(self) -> int:
        return self.bag_prior.size

    @property
    def p(self) -> int:
        return self.class_densities[0].p

    @property
    def domain(self) -> LabelDomain:
        return LabelDomain(self.t)

    @property
    def density_kind(self) -> DensityKind:
        return self.class_densities[0].kind

    @property
    def log_prior(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.bag_prior)

    @property
    def log_table(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.instance_table)

    def class_log_densities(self, instances) -> np.ndarray:
        """m x t matrix of log P(f_j | I = i)"""
        X = np.asarray(instances, dtype=float)
        return np.column_stack([d.logpdf_many(X) for d in self.class_densities])


def _require_compatible(bag: Bag, domain: LabelDomain) -> Tuple[int, np.ndarray]:
    if bag.bag_label is None or bag.latent_labels is None:
        raise InvalidStateError(f"bag {bag.bag_id!r} needs a bag label and latent labels")
    b = bag.bag_label
    labels = domain.validate_all(bag.latent_labels)
    if np.any((labels != NORMAL_LABEL) & (labels != b)):
        raise InvalidStateError(f"bag {bag.bag_id!r} has latent labels incompatible with bag label {b}")
    return b, labels


def bif_estimate(dataset: Dataset, density_kind: DensityKind) -> BifParams:
    """M-step: count-based tables with add-one compatible pseudo-counts and per-class densities"""
    density_kind = DensityKind(density_kind)
    t = dataset.t
    mask = compatibility_mask(dataset.domain)

    bag_counts = np.zeros(t)
    label_counts = np.zeros((t, t))
    for bag in dataset.bags:
        b, labels = _require_compatible(bag, dataset.domain)
        bag_counts[b - 1] += 1
        label_counts[b - 1] += np.bincount(labels - 1, minlength=t)

    pseudo = label_counts + mask
    table = np.where(mask, pseudo, 0.0)
    table /= table.sum(axis=1, keepdims=True)

    X = dataset.pooled_instances()
    y = dataset.pooled_latent_labels()
    densities: List[DensityModel] = []
    for label in dataset.domain.labels:
        rows = X[y == label]
        if rows.shape[0] == 0 and bag_counts[label - 1] == 0 and X.shape[0] >= density_kind.min_samples:
            # no bag carries this label, so its density always has zero weight
            logger.warning(f"class {label} is unobserved, using a placeholder density fitted on all instances")
            rows = X
        if rows.shape[0] < density_kind.min_samples:
            raise InsufficientDataError(
                f"class {label} has {rows.shape[0]} instances, "
                f"{density_kind.value} density needs at least {density_kind.min_samples}",
                label=label,
            )
        densities.append(fit_density(density_kind, rows))

    return BifParams(bag_prior=bag_counts / bag_counts.sum(), instance_table=table, class_densities=tuple(densities))


def bif_relabel(params: BifParams, log_densities: np.ndarray, b: int) -> Tuple[np.ndarray, float]:
    """Per-instance argmax under bag label b and the resulting sum of maxima"""
    scores = params.log_table[b - 1] + log_densities
    # argmax returns the first maximum, i.e. the lower label on ties
    labels = np.argmax(scores, axis=1) + 1
    return labels, float(np.sum(scores[np.arange(scores.shape[0]), labels - 1]))


def bif_e_step(params: BifParams, bag: Bag) -> np.ndarray:
    """Most probable instance labels given the bag's known label; ties go to the lower label"""
    if bag.bag_label is None:
        raise InvalidInputError(f"bag {bag.bag_id!r} has no bag label")
    b = params.domain.validate(bag.bag_label)
    labels, _ = bif_relabel(params, params.class_log_densities(bag.instances), b)
    return labels


def bif_infer(params: BifParams, instances) -> InferenceResult:
    """Joint MAP over (bag label, instance labels)"""
    X = np.asarray(instances, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise InvalidInputError("inference needs an m x p instance matrix with m >= 1")
    log_densities = params.class_log_densities(X)
    log_prior = params.log_prior

    scores = np.full(params.t, -np.inf)
    candidates = {}
    for b in params.domain.labels:
        if not np.isfinite(log_prior[b - 1]):
            continue
        labels, total = bif_relabel(params, log_densities, b)
        scores[b - 1] = log_prior[b - 1] + total
        candidates[b] = labels

    best = int(np.argmax(scores)) + 1
    return InferenceResult(bag_label=best, instance_labels=candidates[best], label_scores=scores)


def bif_loglik(params: BifParams, dataset: Dataset) -> float:
    """Hard-assignment log-likelihood; -inf when a stored configuration has zero probability"""
    log_prior = params.log_prior
    log_table = params.log_table
    total = 0.0
    for bag in dataset.bags:
        if bag.bag_label is None or bag.latent_labels is None:
            raise InvalidStateError(f"bag {bag.bag_id!r} needs a bag label and latent labels")
        b = bag.bag_label
        labels = params.domain.validate_all(bag.latent_labels)
        log_densities = params.class_log_densities(bag.instances)
        total += (
            log_prior[b - 1]
            + np.sum(log_table[b - 1, labels - 1])
            + np.sum(log_densities[np.arange(bag.m), labels - 1])
        )
    if not np.isfinite(total):
        logger.warning("BIF log-likelihood is -inf: a stored configuration has zero probability")
        return float("-inf")
    return float(total)


def bif_log_pseudo_prior(params: BifParams) -> float:
    """Log-density (up to a constant) of the add-one Dirichlet prior on P(I|B)"""
    mask = compatibility_mask(params.domain)
    return float(np.sum(params.log_table[mask]))


def uniform_size_sampler(low: int, high: int) -> SizeSampler:
    """Bag sizes drawn uniformly from low..high inclusive"""
    if low < 1 or high < low:
        raise InvalidInputError(f"bag size range must satisfy 1 <= low <= high, got [{low}, {high}]")

    def draw(rng: np.random.Generator) -> int:
        return int(rng.integers(low, high + 1))

    return draw


def bif_sample(
    params: BifParams,
    bag_count: int,
    size_sampler: Optional[SizeSampler] = None,
    seed: SeedLike = None,
) -> Dataset:
    """Draw bags from the generative story, keeping the gold instance labels"""
    if bag_count < 1:
        raise InvalidInputError(f"bag_count must be >= 1, got {bag_count}")
    if size_sampler is None:
        size_sampler = uniform_size_sampler(*settings.synthetic_bag_size_range)
    rng = make_rng(seed)
    labels_range = np.arange(1, params.t + 1)
    width = len(str(bag_count))

    bags = []
    for index in range(bag_count):
        b = int(rng.choice(labels_range, p=params.bag_prior))
        m = size_sampler(rng)
        if m < 1:
            raise InvalidInputError(f"size sampler returned bag size {m}")
        labels = rng.choice(labels_range, size=m, p=params.instance_table[b - 1])
        instances = np.empty((m, params.p))
        for label in np.unique(labels):
            rows = labels == label
            instances[rows] = params.class_densities[label - 1].sample(int(rows.sum()), rng)
        bags.append(Bag(instances=instances, bag_label=b, gold_labels=labels, bag_id=f"bag{index + 1:0{width}d}"))

    return Dataset(bags=tuple(bags), domain=params.domain)
