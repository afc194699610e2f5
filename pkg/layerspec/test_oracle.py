"""
Tests for the finite-window oracle and its agreement with the fiber solver.
"""

import math

import numpy as np
import pytest
from scipy.optimize import brentq

from .bloch import QuasiMomentum, fiber_model
from .conftest import build_config
from .errors import ConfigError
from .greens import q0_regularized
from .oracle import (
    CONTAINED,
    MARGIN_EXCEEDED,
    FiniteCloud,
    OracleControl,
    containment_verdict,
    fill_distance,
    finite_eigenvalues,
    finite_q_matrix,
    finite_sites,
    hausdorff_distance,
)
from .solver import build_intervals, dispersion_root, generation_counts

FAST = OracleControl(z_samples=100)


@pytest.fixture(scope="module")
def lowest_band(mono_config):
    """Values of the lowest band on a grid containing the symmetric points."""
    levels = mono_config.levels(20.0)
    generation = generation_counts(fiber_model(mono_config), levels)
    interval = build_intervals(mono_config, levels, generation)[0]
    ticks = np.arange(5) / 8
    values = [
        dispersion_root(QuasiMomentum(a, b), interval, mono_config, levels, generation).energy
        for a in ticks
        for b in ticks
    ]
    return levels, np.array(values)


@pytest.fixture(scope="module")
def clouds(mono_config, lowest_band):
    levels, _ = lowest_band
    gap = (-math.inf, levels.levels[0])
    return {R: finite_eigenvalues(R, gap, mono_config, control=FAST) for R in (1, 2, 3)}


def test_finite_sites_layout(stacked_config):
    positions, heights, labels = finite_sites(1, stacked_config)
    assert len(labels) == 9 * 2
    assert positions.shape == (18, 2)
    assert set(heights) == {0.3, 0.6}
    with pytest.raises(ConfigError):
        finite_sites(-1, stacked_config)


def test_finite_matrix_hermitian(stacked_config):
    matrix = finite_q_matrix(1, -1.0, stacked_config)
    assert np.max(np.abs(matrix - matrix.conj().T)) <= 1e-10


def test_single_site_matrix_is_q0_plus_alpha():
    config = build_config(alphas=[0.7])
    matrix = finite_q_matrix(0, -2.0, config)
    assert matrix.shape == (1, 1)
    assert matrix[0, 0] == pytest.approx(q0_regularized(0.37, -2.0, config.geometry) + 0.7, abs=1e-12)


def test_single_site_eigenvalue_solves_scalar_equation():
    config = build_config(alphas=[0.7])
    level = config.levels(20.0).levels[0]
    cloud = finite_eigenvalues(0, (-math.inf, level), config, control=FAST)
    assert len(cloud) == 1
    expected = brentq(lambda z: q0_regularized(0.37, z, config.geometry).real + 0.7, level - 400.0, level - 1e-6,
                      xtol=1e-12)
    assert cloud.eigenvalues[0] == pytest.approx(expected, abs=1e-9)


def test_finite_eigencurves_increase(mono_config):
    below = np.linalg.eigvalsh(finite_q_matrix(1, -3.0, mono_config))
    above = np.linalg.eigvalsh(finite_q_matrix(1, 2.0, mono_config))
    assert np.all(above > below)


@pytest.mark.parametrize("R", [1, 2])
def test_eigenvalue_count_scales_with_window(clouds, R):
    assert clouds[R].sites == (2 * R + 1) ** 2
    assert len(clouds[R]) == (2 * R + 1) ** 2


def test_cloud_contained_in_band_hull(clouds, lowest_band):
    _, values = lowest_band
    e_min, e_max = float(values.min()), float(values.max())
    assert containment_verdict(clouds[3], e_min, e_max) == CONTAINED


def test_fill_distance_shrinks_with_window(clouds, lowest_band):
    _, values = lowest_band
    assert fill_distance(values, clouds[3]) <= fill_distance(values, clouds[2])


def test_hausdorff_distance_shrinks_with_window(clouds, lowest_band):
    _, values = lowest_band
    coarse = hausdorff_distance(clouds[2], values)
    fine = hausdorff_distance(clouds[3], values)
    assert fine <= coarse
    assert hausdorff_distance(values, clouds[3]) == fine
    assert fine >= fill_distance(values, clouds[3])


def test_hausdorff_distance_is_symmetric():
    cloud = FiniteCloud(window_radius=1, gap=(0.0, 1.0), eigenvalues=(0.2, 0.5, 0.9), sites=3)
    # 0.9 is 0.3 from the nearest value, every value is within 0.1 of the cloud
    assert fill_distance([0.3, 0.6], cloud) == pytest.approx(0.1)
    assert hausdorff_distance(cloud, [0.3, 0.6]) == pytest.approx(0.3)
    assert hausdorff_distance([0.3, 0.6], cloud) == pytest.approx(0.3)
    empty = FiniteCloud(window_radius=0, gap=(0.0, 1.0), eigenvalues=(), sites=1)
    assert hausdorff_distance(empty, cloud) == math.inf
    assert hausdorff_distance(empty, []) == 0.0


def test_verdict_and_distance_on_synthetic_cloud():
    cloud = FiniteCloud(window_radius=1, gap=(0.0, 1.0), eigenvalues=(0.2, 0.5, 0.81), sites=3)
    assert containment_verdict(cloud, 0.2, 0.8) == CONTAINED
    assert containment_verdict(cloud, 0.3, 0.8) == MARGIN_EXCEEDED
    assert fill_distance([0.3, 0.6], cloud) == pytest.approx(0.1)
    empty = FiniteCloud(window_radius=0, gap=(0.0, 1.0), eigenvalues=(), sites=1)
    assert fill_distance([0.3], empty) == math.inf


def test_oracle_control_validation():
    with pytest.raises(ConfigError):
        OracleControl(z_samples=2)
    with pytest.raises(ConfigError):
        finite_eigenvalues(0, (1.0, 0.0), build_config())
