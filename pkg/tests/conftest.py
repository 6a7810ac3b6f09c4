import pytest

from ashatune.space import Dimension, SearchSpace


@pytest.fixture
def unit_space():
    return SearchSpace(
        dimensions=(
            Dimension(name="x", kind="continuous-linear", lower=0.0, upper=1.0),
        )
    )


@pytest.fixture
def mixed_space():
    return SearchSpace(
        dimensions=(
            Dimension(name="lr", kind="continuous-log", lower=1e-4, upper=1e-1),
            Dimension(name="width", kind="integer-range", lower=16, upper=512),
            Dimension(name="act", kind="categorical", choices=("relu", "tanh", "gelu")),
            Dimension(name="momentum", kind="continuous-linear", lower=0.0, upper=0.99),
        )
    )
