"""
Shared fixtures for the generative MIL test suite
"""

import os

import numpy as np
import pytest

from core.data.synthetic_data_manager import ClassDensitySpec, GeneratorConfig, default_generator_config, generate_synthetic
from core.models.bag import Bag, Dataset

MUSK1_PATH = os.environ.get("GENMIL_MUSK1_PATH")

requires_musk1 = pytest.mark.skipif(
    not MUSK1_PATH or not os.path.exists(MUSK1_PATH),
    reason="set GENMIL_MUSK1_PATH to the MUSK clean1 data file",
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def two_class_config(bag_count=24, separation=6.0, p=6, seed=7, size_range=(6, 10)) -> GeneratorConfig:
    """Binary BIF generator; class 2 is shifted `separation` standard deviations on every feature"""
    return GeneratorConfig.build(
        t=2,
        p=p,
        bag_prior=[0.5, 0.5],
        instance_table=[[1.0, 0.0], [0.5, 0.5]],
        class_densities=[
            ClassDensitySpec(mean=[0.0] * p, std=[1.0] * p),
            ClassDensitySpec(mean=[separation] * p, std=[1.0] * p),
        ],
        bag_count=bag_count,
        bag_size_min=size_range[0],
        bag_size_max=size_range[1],
        seed=seed,
    )


@pytest.fixture
def binary_dataset() -> Dataset:
    return generate_synthetic(two_class_config())


@pytest.fixture
def three_class_dataset() -> Dataset:
    """Default 3-class generator, scaled down for fast training"""
    config = default_generator_config(seed=11, separation=6.0, normal_bag_fraction=1 / 3)
    return generate_synthetic(config.model_copy(update={"bag_count": 30, "bag_size_min": 8, "bag_size_max": 12}))


@pytest.fixture
def tiny_dataset() -> Dataset:
    """Three hand-written bags, p = 2"""
    return Dataset.from_bags(
        [
            Bag(instances=[[0.0, 0.1], [0.2, -0.1]], bag_label=1, gold_labels=[1, 1], bag_id="a"),
            Bag(instances=[[0.1, 0.0], [5.0, 5.1], [4.9, 5.2]], bag_label=2, gold_labels=[1, 2, 2], bag_id="b"),
            Bag(instances=[[-0.2, 0.3], [5.1, 4.8]], bag_label=2, gold_labels=[1, 2], bag_id="c"),
        ]
    )
