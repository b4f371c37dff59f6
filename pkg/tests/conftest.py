import numpy as np
import pytest

from pmpflow.catalog import make_problem


@pytest.fixture(scope="session")
def cos_problem():
    return make_problem("single_integrator_cos")


@pytest.fixture(scope="session")
def ex21():
    return make_problem("example21")


@pytest.fixture(scope="session")
def planar():
    return make_problem("planar_lq")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
