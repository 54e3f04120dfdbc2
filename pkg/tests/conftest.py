"""Shared fixture builders for the test suite."""

import numpy as np
import pytest

from gearserve.types import (
    Device,
    ModelOutput,
    ModelProfile,
    ProfileSet,
    ValidationRecord,
    ValidationSet,
)


def two_model_profiles():
    return ProfileSet([
        ModelProfile("small", 4_000_000_000, {1: 5_000, 2: 8_000, 4: 12_000}),
        ModelProfile("large", 10_000_000_000, {1: 20_000, 2: 32_000, 4: 48_000}),
    ])


def tiered_validation(n=100, easy_every=5):
    """Every sample except each easy_every-th is easy: small is confident and
    correct; on the rest only large is correct. large is wrong on every 20th."""
    records = []
    for i in range(n):
        hard = (i % easy_every) == easy_every - 1
        small = ModelOutput(scores=(0.5, 0.45), correct=False) if hard else \
                ModelOutput(scores=(0.9, 0.05), correct=True)
        large = ModelOutput(scores=(0.95,), correct=(i % 20) != 19)
        records.append(ValidationRecord(sample_id=i,
                                        outputs={"small": small, "large": large}))
    return ValidationSet(records)


def two_devices(memory=16_000_000_000):
    return [Device("d0", memory), Device("d1", memory)]


@pytest.fixture
def profiles():
    return two_model_profiles()


@pytest.fixture
def validation():
    return tiered_validation()


@pytest.fixture
def devices():
    return two_devices()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
