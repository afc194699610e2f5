"""
Shared fixtures: desk-scale layers (d = 1) at flux 1, 2 and 1/2 per cell.
"""

import math

import pytest

from .bloch import FiberModel
from .model import CouplingMatrix, Impurity, ImpuritySet, LayerGeometry, ModelConfig, PlanarLattice


def build_config(B=2 * math.pi, points=((0.0, 0.0, 0.37),), alphas=None, d=1.0, lattice=None, coupling=None):
    impurities = ImpuritySet(points=tuple(Impurity(s, t, k) for s, t, k in points))
    if coupling is None:
        coupling = CouplingMatrix.diagonal(alphas if alphas is not None else [0.0] * len(points))
    return ModelConfig(
        geometry=LayerGeometry(d=d, B=B),
        lattice=lattice or PlanarLattice(a1=1.0),
        impurities=impurities,
        coupling=coupling,
    )


@pytest.fixture(scope="session")
def make_config():
    return build_config


@pytest.fixture(scope="session")
def unit_layer():
    return LayerGeometry(d=1.0, B=2 * math.pi)


@pytest.fixture(scope="session")
def mono_config():
    return build_config()


@pytest.fixture(scope="session")
def mono_model(mono_config):
    return FiberModel(mono_config)


@pytest.fixture(scope="session")
def node_config():
    return build_config(points=((0.0, 0.0, 0.5),))


@pytest.fixture(scope="session")
def stacked_config():
    return build_config(points=((0.0, 0.0, 0.3), (0.0, 0.0, 0.6)), alphas=[0.0, 0.5])


@pytest.fixture(scope="session")
def stacked_model(stacked_config):
    return FiberModel(stacked_config)


@pytest.fixture(scope="session")
def half_flux_config():
    return build_config(B=math.pi)
