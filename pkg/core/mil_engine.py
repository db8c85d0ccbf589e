"""
Hard-EM Training Engine
Drives BIF or FIB learning: i <- b initialization, alternating M-step and
E-step until the instance labels stop changing
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .config import settings
from .errors import ConfigurationError, InsufficientDataError, InvalidInputError, UnsupportedDomainError
from .models.bag import Dataset, InferenceResult, initial_labels
from .models.bif import BifParams, bif_e_step, bif_estimate, bif_infer, bif_log_pseudo_prior, bif_loglik
from .models.classifiers import ClassifierKind, ClassifierOptions
from .models.density import DensityKind
from .models.fib import FibParams, fib_e_step, fib_estimate, fib_infer, fib_loglik

logger = logging.getLogger(__name__)

ModelParams = Union[BifParams, FibParams]


class ModelKind(str, Enum):
    BIF = "bif"
    FIB = "fib"


class EmConfig(BaseModel):
    """Model structure, component choices and loop limits for one training run"""
    model_config = ConfigDict(frozen=True, extra="forbid", protected_namespaces=())

    model_kind: ModelKind = Field(default_factory=lambda: ModelKind(settings.DEFAULT_MODEL))
    density_kind: DensityKind = Field(default_factory=lambda: DensityKind(settings.DEFAULT_DENSITY))
    classifier_kind: ClassifierKind = Field(default_factory=lambda: ClassifierKind(settings.DEFAULT_CLASSIFIER))
    feature_density_kind: DensityKind = Field(default_factory=lambda: DensityKind(settings.FIB_FEATURE_DENSITY))
    classifier_options: ClassifierOptions = Field(default_factory=ClassifierOptions)
    max_iterations: int = Field(default_factory=lambda: settings.MAX_EM_ITERATIONS, ge=1)
    record_trajectory: bool = True

    @classmethod
    def build(cls, **values) -> "EmConfig":
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"invalid EM configuration: {e}")

    @property
    def label(self) -> str:
        """Short name such as 'bif/gauss-diag' or 'fib/lr'"""
        if self.model_kind is ModelKind.BIF:
            return f"bif/{self.density_kind.value}"
        return f"fib/{self.classifier_kind.value}"


@dataclass
class IterationEvent:
    """Progress of one full EM iteration"""
    iteration: int
    labels_changed: int
    loglik: Optional[float]
    objective: Optional[float]


@dataclass
class EmResult:
    """Fitted parameters, final labels and iteration telemetry"""
    params: ModelParams
    labels: List[np.ndarray]
    iteration_count: int
    converged: bool
    config: EmConfig
    loglik_trajectory: List[float] = field(default_factory=list)
    objective_trajectory: List[float] = field(default_factory=list)
    events: List[IterationEvent] = field(default_factory=list)

    @property
    def final_loglik(self) -> Optional[float]:
        return self.loglik_trajectory[-1] if self.loglik_trajectory else None

    def labeled_dataset(self, dataset: Dataset) -> Dataset:
        return dataset.with_latent_labels(self.labels)


def check_config_for_dataset(config: EmConfig, dataset: Dataset) -> None:
    """Reject component choices the dataset's label domain cannot support"""
    if config.model_kind is ModelKind.FIB and config.classifier_kind is ClassifierKind.DD and dataset.t != 2:
        raise UnsupportedDomainError(f"the dd classifier requires t = 2, dataset has t = {dataset.t}")


def model_kind_of(params: ModelParams) -> ModelKind:
    """Structure of a fitted model"""
    return ModelKind.BIF if isinstance(params, BifParams) else ModelKind.FIB


def infer_bag(params: ModelParams, instances) -> InferenceResult:
    """MAP bag label and instance labels under either structure"""
    if isinstance(params, BifParams):
        return bif_infer(params, instances)
    return fib_infer(params, instances)


def model_loglik(params: ModelParams, dataset: Dataset) -> float:
    """Hard log-likelihood under whichever structure params has"""
    if isinstance(params, BifParams):
        return bif_loglik(params, dataset)
    return fib_loglik(params, dataset)


class HardEmTrainer:
    """Hard-EM loop over a labeled dataset"""

    def __init__(
        self,
        config: Optional[EmConfig] = None,
        callback: Optional[Callable[[IterationEvent], None]] = None,
    ):
        self.config = config or EmConfig()
        self.callback = callback

    def _m_step(self, dataset: Dataset, previous: Optional[ModelParams]) -> ModelParams:
        if self.config.model_kind is ModelKind.BIF:
            return bif_estimate(dataset, self.config.density_kind)
        return fib_estimate(
            dataset,
            self.config.classifier_kind,
            self.config.feature_density_kind,
            options=self.config.classifier_options,
            previous=previous,
        )

    def _e_step(self, params: ModelParams, dataset: Dataset) -> List[np.ndarray]:
        relabel = bif_e_step if isinstance(params, BifParams) else fib_e_step
        return [relabel(params, bag) for bag in dataset.bags]

    def _objective(self, params: ModelParams, loglik: float) -> float:
        # the add-one pseudo-counts make EM maximize a penalized likelihood
        if isinstance(params, BifParams):
            return loglik + bif_log_pseudo_prior(params)
        return loglik

    def train(self, dataset: Dataset) -> EmResult:
        """Run hard EM from the i <- b initialization"""
        if not dataset.is_labeled:
            raise InvalidInputError("training needs a bag label on every bag")
        check_config_for_dataset(self.config, dataset)

        logger.info(
            f"Training {self.config.label} on {dataset.n} bags / {dataset.instance_count} instances (t={dataset.t})"
        )
        labels = initial_labels(dataset)
        params: Optional[ModelParams] = None
        loglik_trajectory: List[float] = []
        objective_trajectory: List[float] = []
        events: List[IterationEvent] = []
        converged = False
        iteration = 0

        for iteration in range(1, self.config.max_iterations + 1):
            try:
                params = self._m_step(dataset.with_latent_labels(labels), params)
            except InsufficientDataError as e:
                logger.error(f"M-step failed at iteration {iteration}: {e}")
                raise e.at_iteration(iteration) from e

            new_labels = self._e_step(params, dataset)
            changed = int(sum(np.count_nonzero(new != old) for new, old in zip(new_labels, labels)))
            labels = new_labels

            loglik = objective = None
            if self.config.record_trajectory:
                loglik = model_loglik(params, dataset.with_latent_labels(labels))
                objective = self._objective(params, loglik)
                loglik_trajectory.append(loglik)
                objective_trajectory.append(objective)

            event = IterationEvent(iteration=iteration, labels_changed=changed, loglik=loglik, objective=objective)
            events.append(event)
            if self.callback is not None:
                self.callback(event)
            logger.debug(f"EM iteration {iteration}: {changed} labels changed, loglik={loglik}")

            if changed == 0:
                converged = True
                break

        if converged:
            logger.info(f"EM converged after {iteration} iterations")
        else:
            logger.warning(f"EM stopped at max_iterations={self.config.max_iterations} without converging")

        return EmResult(
            params=params,
            labels=labels,
            iteration_count=iteration,
            converged=converged,
            config=self.config,
            loglik_trajectory=loglik_trajectory,
            objective_trajectory=objective_trajectory,
            events=events,
        )


def train(
    dataset: Dataset,
    config: Optional[EmConfig] = None,
    callback: Optional[Callable[[IterationEvent], None]] = None,
) -> EmResult:
    return HardEmTrainer(config, callback).train(dataset)
