"""
Brute-force validation: a finite window of the impurity lattice solved
directly through its Krein matrix, independent of the fiber reduction.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, ConvergenceError
from .greens import DEFAULT_SERIES, SeriesControl, q_elements
from .model import ModelConfig

logger = logging.getLogger(__name__)

CONTAINED = "contained"
MARGIN_EXCEEDED = "margin-exceeded"


@dataclass(frozen=True)
class OracleControl:
    """z_samples: grid points per scanned range; margin_fraction: allowed overshoot
    of a cloud past a band hull, in units of the band width."""

    z_samples: int = 200
    margin_fraction: float = 0.05
    probe_offset: float = 1e-6
    floor_steps: int = 60

    def __post_init__(self):
        if self.z_samples < 8:
            raise ConfigError(f"z_samples must be at least 8, got {self.z_samples}")
        if self.margin_fraction < 0:
            raise ConfigError(f"margin_fraction must be non-negative, got {self.margin_fraction}")


DEFAULT_ORACLE = OracleControl()


@dataclass(frozen=True)
class FiniteCloud:
    window_radius: int
    gap: tuple[float, float]
    eigenvalues: tuple[float, ...]
    sites: int

    def __len__(self) -> int:
        return len(self.eigenvalues)


def finite_sites(R: int, config: ModelConfig):
    """Sites lambda + kappa_i with |la|, |lb| <= R.

    Returns:
        (positions (n, 2), heights (n,), labels list of (la, lb, i)).
    """
    if R < 0:
        raise ConfigError(f"window radius must be non-negative, got {R}")
    labels = [
        (la, lb, i)
        for la in range(-R, R + 1)
        for lb in range(-R, R + 1)
        for i in range(len(config.impurities))
    ]
    la = np.array([lab[0] for lab in labels])
    lb = np.array([lab[1] for lab in labels])
    idx = np.array([lab[2] for lab in labels])
    positions = config.lattice.vector(la, lb) + config.planar_positions[idx]
    return positions, config.heights[idx], labels


def finite_q_matrix(R: int, z: float, config: ModelConfig, series: SeriesControl | None = None) -> np.ndarray:
    """Krein matrix Q(z) + A over the finite site window."""
    positions, heights, labels = finite_sites(R, config)
    n = len(labels)
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rows = rows.ravel()
    cols = cols.ravel()
    values = q_elements(
        positions[rows], positions[cols], heights[rows], heights[cols], z,
        config.geometry, series or DEFAULT_SERIES, lattice_scale=config.lattice.a1,
    )
    matrix = values.reshape(n, n)
    for a, (la, lb, i) in enumerate(labels):
        for b, (la2, lb2, j) in enumerate(labels):
            entry = config.coupling_entry((la - la2, lb - lb2), i, j, shift=(la2, lb2))
            if entry:
                matrix[a, b] += entry
    return matrix


def _floor(R: int, hi: float, config: ModelConfig, series, control: OracleControl) -> float:
    distance = config.geometry.abs_b
    for _ in range(control.floor_steps):
        z = hi - distance
        if np.max(np.linalg.eigvalsh(finite_q_matrix(R, z, config, series))) < 0:
            return z
        distance *= 2.0
    raise ConvergenceError("no energy with a negative definite finite Krein matrix found")


def finite_eigenvalues(R: int, gap: tuple[float, float], config: ModelConfig,
                       series: SeriesControl | None = None, control: OracleControl | None = None) -> FiniteCloud:
    """Eigenvalues of the finite-window Hamiltonian inside a free gap.

    gap[0] may be -inf for the lowest gap; the scan then starts where the
    finite Krein matrix is negative definite.
    """
    control = control or DEFAULT_ORACLE
    lo, hi = gap
    if not lo < hi:
        raise ConfigError(f"gap needs lo < hi, got {gap}")
    if math.isinf(lo):
        lo = _floor(R, hi, config, series, control)
    offset = control.probe_offset * (hi - lo)
    samples = np.linspace(lo + offset, hi - offset, control.z_samples)

    def spectrum(z):
        return np.linalg.eigvalsh(finite_q_matrix(R, z, config, series))

    counts = [int(np.sum(spectrum(z) < 0)) for z in samples]
    roots = []
    for k in range(len(samples) - 1):
        z_a, z_b = samples[k], samples[k + 1]
        n_a, n_b = counts[k], counts[k + 1]
        for index in range(n_b, n_a):
            roots.append(brentq(lambda z, index=index: float(spectrum(z)[index]), z_a, z_b, xtol=1e-12))
    roots.sort()
    logger.info(f"finite window R={R}: {len(roots)} eigenvalues in ({lo:.6f}, {hi:.6f})")
    return FiniteCloud(window_radius=R, gap=(lo, hi), eigenvalues=tuple(float(r) for r in roots),
                       sites=len(finite_sites(R, config)[2]))


def fill_distance(values, cloud: FiniteCloud) -> float:
    """Largest distance from a dispersion value to its nearest cloud eigenvalue."""
    points = np.asarray(cloud.eigenvalues)
    if points.size == 0:
        return math.inf
    values = np.ravel(np.asarray(values, dtype=float))
    return float(np.max(np.min(np.abs(values[:, None] - points[None, :]), axis=1)))


def _energies(points) -> np.ndarray:
    if isinstance(points, FiniteCloud):
        return np.asarray(points.eigenvalues, dtype=float)
    return np.ravel(np.asarray(points, dtype=float))


def hausdorff_distance(first, second) -> float:
    """Symmetric Hausdorff distance between two energy sets (clouds or arrays)."""
    a = _energies(first)
    b = _energies(second)
    if a.size == 0 or b.size == 0:
        return 0.0 if a.size == b.size else math.inf
    gaps = np.abs(a[:, None] - b[None, :])
    return float(max(gaps.min(axis=1).max(), gaps.min(axis=0).max()))


def containment_verdict(cloud: FiniteCloud, e_min: float, e_max: float,
                        control: OracleControl | None = None) -> str:
    """"contained" when every cloud eigenvalue lies in the inflated band hull."""
    control = control or DEFAULT_ORACLE
    margin = control.margin_fraction * (e_max - e_min)
    inside = all(e_min - margin <= e <= e_max + margin for e in cloud.eigenvalues)
    return CONTAINED if inside else MARGIN_EXCEEDED
