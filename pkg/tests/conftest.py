import numpy as np
import pytest

from momentfit.basis import BasisSpec
from momentfit.compensation import build_plan
from momentfit.shapes import builtin_shape, sample_zero_set

_PLAN_CACHE = {}


def cached_plan(spec: BasisSpec):
    if spec not in _PLAN_CACHE:
        _PLAN_CACHE[spec] = build_plan(spec)
    return _PLAN_CACHE[spec]


@pytest.fixture(scope="session")
def cone():
    return builtin_shape("elliptic-cone")


@pytest.fixture(scope="session")
def cone_plan(cone):
    return cached_plan(cone.spec)


@pytest.fixture(scope="session")
def cone_cloud_2k(cone):
    return sample_zero_set(cone, 2000, seed=7)


@pytest.fixture(scope="session")
def cone_cloud_100k(cone):
    return sample_zero_set(cone, 100000, seed=8)


def upper_entries(matrix: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(matrix.shape[0])
    return matrix[iu]
