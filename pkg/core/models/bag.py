"""
Bag and Label Domain Model
Label semantics (label 1 is "normal"), bag/dataset containers and the
compatibility/feasibility predicates shared by every model structure
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidInputError, InvalidLabelError

logger = logging.getLogger(__name__)

NORMAL_LABEL = 1
INFEASIBLE_LABEL = 0


def _frozen_array(values, dtype) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class LabelDomain:
    """Label alphabet {1..t}; 0 is reserved for infeasible labelings"""
    t: int

    def __post_init__(self):
        if int(self.t) != self.t or self.t < 2:
            raise InvalidInputError(f"label domain needs t >= 2, got {self.t}")

    @property
    def labels(self) -> range:
        return range(1, self.t + 1)

    def contains(self, label: int) -> bool:
        return 1 <= int(label) <= self.t

    def validate(self, label: int) -> int:
        """Return label unchanged, raising InvalidLabelError outside 1..t"""
        if not self.contains(label):
            raise InvalidLabelError(f"label {label} is outside {{1..{self.t}}}")
        return int(label)

    def validate_all(self, labels: Iterable[int]) -> np.ndarray:
        """Validated int array of labels"""
        array = np.asarray(labels, dtype=int)
        if array.size and (array.min() < 1 or array.max() > self.t):
            bad = array[(array < 1) | (array > self.t)][0]
            raise InvalidLabelError(f"label {bad} is outside {{1..{self.t}}}")
        return array


@dataclass(frozen=True)
class Bag:
    """A bag of m feature vectors with an optional bag label"""
    instances: np.ndarray
    bag_label: Optional[int] = None
    latent_labels: Optional[np.ndarray] = None
    gold_labels: Optional[np.ndarray] = None
    bag_id: str = ""

    def __post_init__(self):
        instances = np.array(self.instances, dtype=float, copy=True)
        if instances.ndim == 1:
            instances = instances.reshape(1, -1)
        if instances.ndim != 2 or instances.shape[0] < 1 or instances.shape[1] < 1:
            raise InvalidInputError(f"bag {self.bag_id!r} needs an m x p feature matrix with m >= 1")
        if not np.all(np.isfinite(instances)):
            raise InvalidInputError(f"bag {self.bag_id!r} has non-finite features")
        instances.setflags(write=False)
        object.__setattr__(self, "instances", instances)

        if self.bag_label is not None:
            object.__setattr__(self, "bag_label", int(self.bag_label))

        for name in ("latent_labels", "gold_labels"):
            labels = getattr(self, name)
            if labels is None:
                continue
            labels = _frozen_array(labels, int)
            if labels.shape != (instances.shape[0],):
                raise InvalidInputError(
                    f"bag {self.bag_id!r}: {name} has length {labels.size}, expected {instances.shape[0]}"
                )
            if labels.size and labels.min() < 1:
                raise InvalidLabelError(f"bag {self.bag_id!r}: {name} contains label {labels.min()}")
            object.__setattr__(self, name, labels)

    @property
    def m(self) -> int:
        return self.instances.shape[0]

    @property
    def p(self) -> int:
        return self.instances.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.bag_label is not None

    def with_latent_labels(self, labels: Optional[Sequence[int]]) -> "Bag":
        """Copy of the bag carrying the given latent instance labels"""
        return replace(self, latent_labels=labels)

    def without_bag_label(self) -> "Bag":
        """Copy with the bag label hidden, as seen by a held-out fold"""
        return replace(self, bag_label=None, latent_labels=None)


@dataclass(frozen=True)
class Dataset:
    """n bags over a shared feature dimension p"""
    bags: Tuple[Bag, ...]
    domain: LabelDomain
    p: int = field(init=False)

    def __post_init__(self):
        bags = tuple(self.bags)
        if not bags:
            raise InvalidInputError("a dataset needs at least one bag")
        p = bags[0].p
        for bag in bags:
            if bag.p != p:
                raise InvalidInputError(f"bag {bag.bag_id!r} has p={bag.p}, expected p={p}")
            if bag.bag_label is not None:
                self.domain.validate(bag.bag_label)
            for labels in (bag.latent_labels, bag.gold_labels):
                if labels is not None:
                    self.domain.validate_all(labels)
        object.__setattr__(self, "bags", bags)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_bags(cls, bags: Sequence[Bag], t: Optional[int] = None) -> "Dataset":
        """Build a dataset, inferring t as the largest label present (at least 2)"""
        if t is None:
            seen = [NORMAL_LABEL + 1]
            for bag in bags:
                if bag.bag_label is not None:
                    seen.append(bag.bag_label)
                for labels in (bag.latent_labels, bag.gold_labels):
                    if labels is not None and labels.size:
                        seen.append(int(labels.max()))
            t = max(seen)
        return cls(bags=tuple(bags), domain=LabelDomain(t))

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def n(self) -> int:
        return len(self.bags)

    @property
    def t(self) -> int:
        return self.domain.t

    @property
    def instance_count(self) -> int:
        return sum(bag.m for bag in self.bags)

    @property
    def is_labeled(self) -> bool:
        return all(bag.is_labeled for bag in self.bags)

    @property
    def has_gold_labels(self) -> bool:
        return all(bag.gold_labels is not None for bag in self.bags)

    def bag_labels(self) -> np.ndarray:
        return np.array([bag.bag_label if bag.bag_label is not None else 0 for bag in self.bags], dtype=int)

    def pooled_instances(self) -> np.ndarray:
        return np.vstack([bag.instances for bag in self.bags])

    def pooled_latent_labels(self) -> np.ndarray:
        """Latent labels of every instance, in bag order"""
        if any(bag.latent_labels is None for bag in self.bags):
            raise InvalidInputError("latent labels are missing on at least one bag")
        return np.concatenate([bag.latent_labels for bag in self.bags])

    def subset(self, indices: Iterable[int]) -> "Dataset":
        """Dataset of the selected bags over the same label domain"""
        return Dataset(bags=tuple(self.bags[i] for i in indices), domain=self.domain)

    def with_latent_labels(self, labels: Sequence[Optional[Sequence[int]]]) -> "Dataset":
        """Copy with one latent label sequence per bag"""
        if len(labels) != self.n:
            raise InvalidInputError(f"expected {self.n} label vectors, got {len(labels)}")
        return Dataset(
            bags=tuple(bag.with_latent_labels(lab) for bag, lab in zip(self.bags, labels)),
            domain=self.domain,
        )

    def map_instances(self, transform) -> "Dataset":
        """Apply a feature transform (e.g. PCA) to every bag"""
        return Dataset(
            bags=tuple(replace(bag, instances=transform(bag.instances)) for bag in self.bags),
            domain=self.domain,
        )


def _checked_labels(labels: Sequence[int], domain: LabelDomain) -> np.ndarray:
    array = np.asarray(labels, dtype=int).ravel()
    if array.size == 0:
        raise InvalidInputError("label sequence is empty")
    return domain.validate_all(array)


def is_compatible(i: int, b: int, domain: LabelDomain) -> bool:
    """Instance label i is compatible with bag label b iff i is 1 or b"""
    i = domain.validate(i)
    b = domain.validate(b)
    return i == NORMAL_LABEL or i == b


def is_feasible(labels: Sequence[int], domain: LabelDomain) -> bool:
    """True iff all non-normal labels in the sequence agree"""
    array = _checked_labels(labels, domain)
    return np.unique(array[array != NORMAL_LABEL]).size <= 1


def bag_label_of(labels: Sequence[int], domain: LabelDomain) -> int:
    """Deterministic bag label: max label if feasible, otherwise 0"""
    array = _checked_labels(labels, domain)
    if np.unique(array[array != NORMAL_LABEL]).size > 1:
        return INFEASIBLE_LABEL
    return int(array.max())


def compatibility_mask(domain: LabelDomain) -> np.ndarray:
    """t x t boolean matrix, row b-1 marks labels compatible with bag label b"""
    mask = np.eye(domain.t, dtype=bool)
    mask[:, NORMAL_LABEL - 1] = True
    return mask


def initial_labels(dataset: Dataset) -> List[np.ndarray]:
    """Every instance starts with its bag's label"""
    labels = []
    for bag in dataset.bags:
        if bag.bag_label is None:
            raise InvalidInputError(f"bag {bag.bag_id!r} has no bag label")
        labels.append(np.full(bag.m, bag.bag_label, dtype=int))
    return labels


@dataclass(frozen=True)
class InferenceResult:
    """MAP bag label, its instance labels and the best log-score of every candidate bag label"""
    bag_label: int
    instance_labels: np.ndarray
    label_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "instance_labels", _frozen_array(self.instance_labels, int))
        object.__setattr__(self, "label_scores", _frozen_array(self.label_scores, float))

    @property
    def score(self) -> float:
        return float(self.label_scores[self.bag_label - 1])
