"""
Layerspec - Spectra of a magnetic Dirichlet layer with a periodic lattice of point interactions
"""

__version__ = "0.1.0"

# Special functions and configuration
from . import specfun
from . import model

# Kernels and fiber matrices
from . import greens
from . import bloch

# Spectral assembly and the finite-lattice check
from . import solver
from . import oracle

from .errors import (
    ConfigError,
    ConvergenceError,
    CoverageError,
    LayerSpecError,
    NonGenericError,
    PoleError,
)
from .model import ModelConfig
from .solver import full_spectrum

__all__ = [
    'specfun',
    'model',
    'greens',
    'bloch',
    'solver',
    'oracle',
    'ModelConfig',
    'full_spectrum',
    'LayerSpecError',
    'ConfigError',
    'ConvergenceError',
    'CoverageError',
    'NonGenericError',
    'PoleError',
]
