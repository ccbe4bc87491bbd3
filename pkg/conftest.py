"""Shared fixtures and finite-difference helpers for the test suite."""

import numpy as np
import pytest

from config import ELEVATION_MAX, ELEVATION_MIN, REFERENCE_RANGE, WAVELENGTH
from geometry import (
    ElevationGrid,
    GeometryConfig,
    build_baselines,
    build_measurement_matrix,
)
from network import SliceObservation, init_params

TINY_BASELINES = 4
TINY_BINS = 16
TINY_WIDTH = 4


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance runs (minutes)")


def compare(nd_value, ad_value, rel_tol=1e-5, abs_tol=1e-8):
    """Assert analytic and numerical gradients agree within rel_tol of their scale."""
    nd_value = np.asarray(nd_value)
    ad_value = np.asarray(ad_value)
    assert nd_value.shape == ad_value.shape
    scale = max(np.abs(nd_value).max(initial=0.0), np.abs(ad_value).max(initial=0.0))
    error = np.abs(nd_value - ad_value).max(initial=0.0)
    if error > rel_tol * scale + abs_tol:
        print('ad=', ad_value)
        print('nd=', nd_value)
        print('difference=', nd_value - ad_value)
    assert error <= rel_tol * scale + abs_tol


def numerical_grad(loss_fn, array: np.ndarray, index, h: float = 1e-6):
    """
    Central difference of a real scalar loss w.r.t. array[index], perturbing
    the array in place. Complex entries return the Wirtinger derivative
    dL/dconj = (dL/dRe + i dL/dIm) / 2.
    """
    original = array[index]

    def central(step):
        array[index] = original + step
        plus = loss_fn()
        array[index] = original - step
        minus = loss_fn()
        array[index] = original
        return (plus - minus) / (2 * h)

    derivative = central(h)
    if np.iscomplexobj(array):
        derivative = 0.5 * (derivative + 1j * central(1j * h))
    return derivative


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture(scope="session")
def default_geometry():
    return GeometryConfig()


@pytest.fixture(scope="session")
def default_matrix(default_geometry):
    return default_geometry.measurement_matrix()


@pytest.fixture(scope="session")
def tiny_grid():
    return ElevationGrid(TINY_BINS, ELEVATION_MIN, ELEVATION_MAX)


@pytest.fixture(scope="session")
def tiny_matrix(tiny_grid):
    baselines = build_baselines(TINY_BASELINES, -100.0, 100.0, WAVELENGTH, REFERENCE_RANGE)
    return build_measurement_matrix(baselines, tiny_grid)


@pytest.fixture
def tiny_params(tiny_matrix):
    return init_params(tiny_matrix, c0=2, n1=2, n2=2, seed=0, theta_init=0.05)


@pytest.fixture
def tiny_slice():
    rng = np.random.default_rng(7)
    return SliceObservation(random_complex(rng, TINY_BASELINES, TINY_WIDTH))


@pytest.fixture
def tiny_target():
    target = np.zeros((TINY_BINS, TINY_WIDTH), dtype=np.complex128)
    target[[3, 8, 8, 12], [0, 1, 2, 3]] = [1.0, 0.5, 0.7, 1.2]
    return target

