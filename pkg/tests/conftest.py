"""Shared fixtures: one frozen world and one small training episode."""

from __future__ import annotations

import pytest

from promptvar import (
    SyntheticDatasetSpec,
    generate_dataset,
    init_frozen,
    make_episode,
    split_view,
)


@pytest.fixture(scope="session")
def world():
    """The default frozen world; never mutated by any test."""
    return init_frozen(seed=0)


@pytest.fixture(scope="session")
def dataset(world):
    return generate_dataset(world, SyntheticDatasetSpec(seed=1))


@pytest.fixture(scope="session")
def episode(dataset):
    return make_episode(dataset, base_fraction=0.5, shots=2, seed=1)


@pytest.fixture(scope="session")
def views(dataset, episode):
    return {
        side: split_view(dataset, episode, side)
        for side in ("support", "base_eval", "new_eval")
    }
