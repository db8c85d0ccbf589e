"""
Synthetic Data Manager
Generates labeled bag datasets from a configured BIF model for simulation and benchmarking
"""

import json
import logging
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.linalg import hadamard

from ..config import settings
from ..errors import ConfigurationError
from ..models.bag import Dataset, LabelDomain, compatibility_mask
from ..models.bif import BifParams, bif_sample, uniform_size_sampler
from ..models.density import GaussianParams

logger = logging.getLogger(__name__)


class ClassDensitySpec(BaseModel):
    """Gaussian P(F | I = i) for one instance label"""
    model_config = ConfigDict(extra="forbid")

    mean: List[float]
    std: Optional[List[float]] = None
    covariance: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _check_shape(self) -> "ClassDensitySpec":
        p = len(self.mean)
        if self.std is not None and self.covariance is not None:
            raise ValueError("give either std or covariance, not both")
        if self.std is not None and (len(self.std) != p or min(self.std) <= 0):
            raise ValueError(f"std must hold {p} positive values")
        if self.covariance is not None and (len(self.covariance) != p or any(len(r) != p for r in self.covariance)):
            raise ValueError(f"covariance must be {p} x {p}")
        return self

    def to_density(self) -> GaussianParams:
        p = len(self.mean)
        if self.covariance is not None:
            return GaussianParams(mean=self.mean, covariance=self.covariance)
        std = np.asarray(self.std if self.std is not None else np.ones(p))
        return GaussianParams(mean=self.mean, covariance=np.diag(std ** 2), diagonal_only=True)


class GeneratorConfig(BaseModel):
    """Complete description of a synthetic BIF dataset"""
    model_config = ConfigDict(extra="forbid")

    t: int = Field(ge=2)
    p: int = Field(ge=1)
    bag_prior: Optional[List[float]] = None
    instance_table: List[List[float]]
    class_densities: List[ClassDensitySpec]
    bag_count: int = Field(default_factory=lambda: settings.SYNTHETIC_BAG_COUNT, ge=1)
    bag_size_min: int = Field(default_factory=lambda: settings.SYNTHETIC_BAG_SIZE_MIN, ge=1)
    bag_size_max: int = Field(default_factory=lambda: settings.SYNTHETIC_BAG_SIZE_MAX, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_model(self) -> "GeneratorConfig":
        t = self.t
        if self.bag_size_min > self.bag_size_max:
            raise ValueError("bag_size_min must not exceed bag_size_max")
        if self.bag_prior is not None:
            prior = np.asarray(self.bag_prior)
            if prior.shape != (t,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
                raise ValueError(f"bag_prior must be a probability vector of length {t}")
        table = np.asarray(self.instance_table, dtype=float)
        if table.shape != (t, t):
            raise ValueError(f"instance_table must be {t} x {t}")
        if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("every instance_table row must sum to 1")
        if np.any(table[~compatibility_mask(LabelDomain(t))] != 0):
            raise ValueError("instance_table gives mass to a label incompatible with its bag label")
        if len(self.class_densities) != t:
            raise ValueError(f"expected {t} class densities, got {len(self.class_densities)}")
        if any(len(spec.mean) != self.p for spec in self.class_densities):
            raise ValueError(f"every class mean must have p={self.p} entries")
        return self

    @classmethod
    def build(cls, **values) -> "GeneratorConfig":
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"invalid generator configuration: {e}")

    def to_params(self) -> BifParams:
        """BIF parameters that generate this configuration's data"""
        prior = self.bag_prior if self.bag_prior is not None else np.full(self.t, 1.0 / self.t)
        return BifParams(
            bag_prior=prior,
            instance_table=self.instance_table,
            class_densities=tuple(spec.to_density() for spec in self.class_densities),
        )


def default_generator_config(
    seed: Optional[int] = None,
    t: int = 3,
    p: int = 8,
    separation: float = 4.0,
    normal_fraction: float = 0.5,
    normal_bag_fraction: float = 0.1,
) -> GeneratorConfig:
    """Unit-variance classes mimicking disordered-muscle recordings.

    Class 1 is centered at the origin. Class i > 1 is shifted by `separation`
    standard deviations on every feature, with the signs taken from row i-2 of
    a Sylvester-Hadamard matrix so the disordered classes differ from each other
    as well. Disordered bags hold `normal_fraction` normal instances; normal
    bags make up `normal_bag_fraction` of the bags.
    """
    order = 1 << max(p - 1, 0).bit_length()
    if t - 1 > order:
        raise ConfigurationError(f"default generator supports at most {order + 1} labels for p={p}, got t={t}")
    if not 0.0 < normal_bag_fraction < 1.0:
        raise ConfigurationError(f"normal_bag_fraction must lie in (0, 1), got {normal_bag_fraction}")
    signs = hadamard(order)[:, :p]

    table = np.zeros((t, t))
    table[0, 0] = 1.0
    for b in range(1, t):
        table[b, 0] = normal_fraction
        table[b, b] = 1.0 - normal_fraction

    specs = [ClassDensitySpec(mean=[0.0] * p, std=[1.0] * p)]
    for label in range(2, t + 1):
        specs.append(ClassDensitySpec(mean=(separation * signs[label - 2]).tolist(), std=[1.0] * p))

    prior = np.full(t, (1.0 - normal_bag_fraction) / (t - 1))
    prior[0] = normal_bag_fraction
    return GeneratorConfig.build(
        t=t,
        p=p,
        bag_prior=prior.tolist(),
        instance_table=table.tolist(),
        class_densities=specs,
        seed=seed,
    )


def load_generator_config(path: str) -> GeneratorConfig:
    """Read a generator configuration from a JSON file"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read generator config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"generator config {path} must hold a JSON object")
    return GeneratorConfig.build(**data)


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    """Sample a dataset with gold instance labels; deterministic for a fixed seed"""
    sampler = uniform_size_sampler(config.bag_size_min, config.bag_size_max)
    dataset = bif_sample(config.to_params(), config.bag_count, sampler, seed=config.seed)
    logger.info(
        f"Generated {dataset.n} synthetic bags / {dataset.instance_count} instances (t={config.t}, p={config.p})"
    )
    return dataset


class SyntheticDataManager:
    """Caches generated datasets per seed for repeated benchmark runs"""

    def __init__(self, config: Optional[GeneratorConfig] = None):
        self.config = config or default_generator_config()
        self.data_cache: Dict[Optional[int], Dataset] = {}

    @property
    def params(self) -> BifParams:
        return self.config.to_params()

    def generate(self, seed: Optional[int] = None) -> Dataset:
        """Dataset for the given seed (the config's own seed when omitted)"""
        seed = self.config.seed if seed is None else seed
        if seed is not None and seed in self.data_cache:
            return self.data_cache[seed]
        try:
            dataset = generate_synthetic(self.config.model_copy(update={"seed": seed}))
        except Exception as e:
            logger.error(f"Failed to generate synthetic data: {e}")
            raise
        if seed is not None:
            self.data_cache[seed] = dataset
        return dataset
