"""
Quasi-momentum dependent objects: magnetic translation phases, the
generalized eigenfunctions psi0, transformed delta vectors, the fiber matrix
Q~(p; z) + A~(p), its z-derivative and the residue apparatus at a level.

Rational flux N/M is handled on the enlarged cell (a, M b), which carries the
integer flux N; fiber j of the original torus is the enlarged fiber at
p1 + eta*j.
"""

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DomainError
from .greens import DEFAULT_SERIES, SeriesControl, decay_exponent, q_elements
from .model import (
    CHI_ZERO_TOL,
    FluxData,
    LayerGeometry,
    ModelConfig,
    PlanarLattice,
    enlarged_config,
    level_table,
    modified_landau_level,
    wedge,
)
from .specfun import hermite_functions

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuasiMomentum:
    """Point of the magnetic Brillouin torus [0, 1/M) x [0, 1) with fiber index j."""

    p1: float
    p2: float
    j: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.p1) and math.isfinite(self.p2)):
            raise ConfigError(f"quasi-momentum must be finite, got ({self.p1}, {self.p2})")
        if self.j < 0:
            raise ConfigError(f"fiber index must be non-negative, got {self.j}")


@dataclass(frozen=True)
class BlochControl:
    """Numeric controls of the fiber layer.

    Attributes:
        rank_tol: Singular values below rank_tol * sigma_max count as zero.
        m_window: Gaussian half-width (in units of 1/sqrt|B|) beyond the
            classical turning point kept in the delta m-sums.
        psi_l_max: Largest Landau index accepted by psi0 and delta_tilde.
        richardson_offsets: Offsets below a level, in units of the gap, for the D limit.
        invertibility_tol: D is invertible when sigma_min > invertibility_tol * max(||D||, 1).
        lattice_radius: Fixed truncation radius; None picks it from the decay bound.
        cache_size: Number of real-space kernel tables kept per model.
        mode_l_max: Landau cutoff of the mode-sum derivative.
        mode_n_max: Transverse cutoff of the mode-sum derivative.
    """

    rank_tol: float = 1e-9
    m_window: float = 9.0
    psi_l_max: int = 60
    richardson_offsets: tuple[float, float] = (1e-4, 2e-4)
    invertibility_tol: float = 1e-6
    lattice_radius: float | None = None
    cache_size: int = 512
    mode_l_max: int = 1000
    mode_n_max: int = 200

    def __post_init__(self):
        if not 0 < self.rank_tol < 1:
            raise ConfigError(f"rank_tol must lie in (0, 1), got {self.rank_tol}")
        if self.m_window <= 0:
            raise ConfigError(f"m_window must be positive, got {self.m_window}")
        if self.psi_l_max < 0:
            raise ConfigError(f"psi_l_max must be non-negative, got {self.psi_l_max}")
        lo, hi = self.richardson_offsets
        if not 0 < lo < hi < 1:
            raise ConfigError(f"richardson offsets must satisfy 0 < lo < hi < 1, got {self.richardson_offsets}")
        if self.lattice_radius is not None and self.lattice_radius <= 0:
            raise ConfigError(f"lattice_radius must be positive, got {self.lattice_radius}")
        if self.cache_size < 1:
            raise ConfigError("cache_size must be at least 1")


DEFAULT_BLOCH = BlochControl()


@dataclass(frozen=True)
class QTildeMatrix:
    """Fiber matrix Q~(p; z) and coupling A~(p) at one (p, z)."""

    q: np.ndarray
    a: np.ndarray
    z: complex
    p: QuasiMomentum
    lattice_radius: float
    n_lattice_terms: int

    @property
    def value(self) -> np.ndarray:
        return self.q + self.a

    @property
    def size(self) -> int:
        return self.q.shape[0]

    def hermiticity_defect(self) -> float:
        x = self.value
        return float(np.max(np.abs(x - x.conj().T)))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.value)


@dataclass(frozen=True)
class ResidueData:
    """Residue Gram matrix G at a level and the compressed limit D on ker G."""

    level: float
    G: np.ndarray
    singular_values: np.ndarray
    rank: int
    kernel_basis: np.ndarray
    D_op: np.ndarray
    d_invertible: bool


@dataclass(frozen=True)
class _KernelTable:
    i: np.ndarray
    j: np.ndarray
    la: np.ndarray
    lb: np.ndarray
    weighted: np.ndarray
    radius: float


def basis_phase(lam, p: QuasiMomentum, N: int) -> complex:
    """e_lambda(p) = exp(-2πi(la p1 + lb p2 + N la lb / 2))."""
    la, lb = int(lam[0]), int(lam[1])
    return complex(np.exp(-2j * math.pi * (la * p.p1 + lb * p.p2 + 0.5 * N * la * lb)))


def _basis_phases(la: np.ndarray, lb: np.ndarray, p1: float, p2: float, N: int) -> np.ndarray:
    return np.exp(-2j * math.pi * (la * p1 + lb * p2 + 0.5 * N * la * lb))


def _check_landau_index(l: int, control: BlochControl):
    if not 0 <= l <= control.psi_l_max:
        raise DomainError(f"Landau index {l} outside [0, {control.psi_l_max}]")


def psi0(x, q: float, l: int, geom: LayerGeometry, lat: PlanarLattice,
         control: BlochControl | None = None) -> complex:
    """Generalized Landau eigenfunction psi0(x; q, l) of the planar operator.

    Raises:
        DomainError: l outside [0, control.psi_l_max].
    """
    _check_landau_index(l, control or DEFAULT_BLOCH)
    x1, x2 = float(x[0]), float(x[1])
    xi = geom.B / (2 * math.pi)
    eta = lat.a1 * lat.b2 * xi
    t = math.sqrt(geom.abs_b) * (x2 + lat.b2 * q / eta)
    h = hermite_functions(l, np.array(t))[l]
    phase = math.pi * lat.b1 * q * q / (lat.a1 * eta) + math.pi * xi * x1 * x2 + 2 * math.pi * q * x1 / lat.a1
    return complex(geom.abs_b**0.25 / math.sqrt(lat.a1) * float(h) * np.exp(1j * phase))


def _delta_block(points: np.ndarray, p1: float, p2: float, l_max: int, geom: LayerGeometry,
                 lat: PlanarLattice, N: int, m_window: float) -> np.ndarray:
    """delta~_gamma(p; k, l) for all l <= l_max, k < |N| and the given points.

    Returns:
        Array of shape (l_max + 1, |N|, len(points)).
    """
    xi = geom.B / (2 * math.pi)
    eta = lat.a1 * lat.b2 * xi
    sqrt_b = math.sqrt(geom.abs_b)
    reach = (math.sqrt(2 * l_max + 1) + m_window) / sqrt_b
    x2 = points[:, 1]
    # q = p1 + m with |x2 + b2 q / eta| <= reach
    q_ends = np.concatenate([(-x2 - reach) * eta / lat.b2, (-x2 + reach) * eta / lat.b2])
    m = np.arange(math.floor(q_ends.min() - p1), math.ceil(q_ends.max() - p1) + 1)
    q = p1 + m

    t = sqrt_b * (points[:, 1:2] + lat.b2 * q[None, :] / eta)
    h = hermite_functions(l_max, t)
    phase = (
        math.pi * lat.b1 * q[None, :] ** 2 / (lat.a1 * eta)
        + math.pi * xi * (points[:, 0] * points[:, 1])[:, None]
        + 2 * math.pi * q[None, :] * points[:, 0:1] / lat.a1
    )
    conj_phase = np.exp(-1j * phase)
    n_abs = abs(N)
    k = np.arange(n_abs)
    fourier = np.exp(2j * math.pi * np.outer(p2 + k, m) / N)
    scale = geom.abs_b**0.25 / math.sqrt(lat.a1 * n_abs)
    return scale * np.einsum("km,lim,im->lki", fourier, h, conj_phase)


def delta_tilde(gamma, p: QuasiMomentum, k: int, l: int, geom: LayerGeometry, lat: PlanarLattice,
                flux: FluxData, control: BlochControl | None = None) -> complex:
    """Transformed delta function of the planar point gamma on an integer-flux cell."""
    control = control or DEFAULT_BLOCH
    if flux.M != 1:
        raise ConfigError("delta_tilde needs an integer-flux cell; use the enlarged lattice")
    if not 0 <= k < abs(flux.N):
        raise DomainError(f"k={k} outside [0, {abs(flux.N)})")
    _check_landau_index(l, control)
    points = np.atleast_2d(np.asarray(gamma, dtype=float))
    block = _delta_block(points, p.p1, p.p2, l, geom, lat, flux.N, control.m_window)
    return complex(block[l, k, 0])


class FiberModel:
    """Fiber matrices of one configuration.

    Real-space kernel tables Q(lambda + kappa_i, kappa_j; z) depend on z only
    and are shared by all quasi-momenta through a small LRU cache.
    """

    def __init__(self, config: ModelConfig, series: SeriesControl | None = None,
                 control: BlochControl | None = None):
        self.config = config
        self.series = series or DEFAULT_SERIES
        self.control = control or DEFAULT_BLOCH
        self.working = enlarged_config(config)
        self.flux = config.flux
        self.N = self.working.flux.N
        self.M = self.flux.M
        self.geometry = config.geometry
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

        xi = self.flux.xi
        kappa = self.working.planar_positions
        self._coupling_terms = []
        for (mu_a, mu_b), block in self.working.coupling_blocks.items():
            mu = self.working.lattice.vector(mu_a, mu_b)
            phases = np.exp(1j * math.pi * xi * wedge(kappa, mu))
            self._coupling_terms.append((mu_a, mu_b, block * phases[:, None]))

    @property
    def size(self) -> int:
        return len(self.working.impurities)

    def fiber_momentum(self, p: QuasiMomentum) -> tuple[float, float]:
        return p.p1 + self.flux.eta * p.j, p.p2

    def lattice_radius(self, z) -> float:
        if self.control.lattice_radius is not None:
            return float(self.control.lattice_radius)
        geom = self.geometry
        energy = float(np.real(z))
        exponent = decay_exponent(energy, geom) if energy > modified_landau_level(0, 1, geom) else 0.0
        quarter = 0.25 * geom.abs_b
        log_tol = math.log(self.series.abs_tol)
        radius = 1.0
        while -quarter * radius * radius + exponent * math.log1p(radius) >= log_tol:
            radius += 0.25
        lat = self.working.lattice
        return max(radius, lat.a1, math.hypot(lat.b1, lat.b2))

    def _offsets(self, radius: float):
        lat = self.working.lattice
        kappa = self.working.planar_positions
        diff = kappa[:, None, :] - kappa[None, :, :]
        reach = radius + float(np.max(np.linalg.norm(diff, axis=-1)))
        lb_max = int(math.ceil(reach / abs(lat.b2)))
        la_list, lb_list = [], []
        for lb in range(-lb_max, lb_max + 1):
            lo = math.ceil((-reach - lb * lat.b1) / lat.a1)
            hi = math.floor((reach - lb * lat.b1) / lat.a1)
            for la in range(lo, hi + 1):
                la_list.append(la)
                lb_list.append(lb)
        la_all = np.array(la_list)
        lb_all = np.array(lb_list)
        vec = lat.vector(la_all, lb_all)
        dist = np.linalg.norm(vec[None, None, :, :] + diff[:, :, None, :], axis=-1)
        i_idx, j_idx, l_idx = np.nonzero(dist <= radius)
        return i_idx, j_idx, la_all[l_idx], lb_all[l_idx]

    def table(self, z, derivative: bool = False) -> _KernelTable:
        key = (complex(z), derivative)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]

        radius = self.lattice_radius(z)
        i_idx, j_idx, la, lb = self._offsets(radius)
        lat = self.working.lattice
        kappa = self.working.planar_positions
        heights = self.working.heights
        lam = lat.vector(la, lb)
        values = q_elements(
            lam + kappa[i_idx], kappa[j_idx], heights[i_idx], heights[j_idx], z,
            self.geometry, self.series, lattice_scale=lat.a1, derivative=derivative,
        )
        weighted = values * np.exp(1j * math.pi * self.flux.xi * wedge(kappa[i_idx], lam))
        table = _KernelTable(i=i_idx, j=j_idx, la=la, lb=lb, weighted=weighted, radius=radius)
        logger.debug(f"kernel table at z={z} (derivative={derivative}): {len(la)} terms, radius {radius}")

        with self._lock:
            self._cache[key] = table
            while len(self._cache) > self.control.cache_size:
                self._cache.popitem(last=False)
        return table

    def _fiber_sum(self, table: _KernelTable, p: QuasiMomentum) -> np.ndarray:
        p1, p2 = self.fiber_momentum(p)
        terms = table.weighted * _basis_phases(table.la, table.lb, p1, p2, self.N)
        out = np.zeros((self.size, self.size), dtype=complex)
        np.add.at(out, (table.i, table.j), terms)
        return out

    def a_tilde(self, p: QuasiMomentum) -> np.ndarray:
        p1, p2 = self.fiber_momentum(p)
        out = np.zeros((self.size, self.size), dtype=complex)
        for mu_a, mu_b, block in self._coupling_terms:
            out += block * _basis_phases(np.array(mu_a), np.array(mu_b), p1, p2, self.N)
        return out

    def qtilde(self, p: QuasiMomentum, z) -> QTildeMatrix:
        table = self.table(z)
        return QTildeMatrix(
            q=self._fiber_sum(table, p),
            a=self.a_tilde(p),
            z=z,
            p=p,
            lattice_radius=table.radius,
            n_lattice_terms=len(table.la),
        )

    def matrix(self, p: QuasiMomentum, z) -> np.ndarray:
        """Q~(p; z) + A~(p) as a plain array."""
        return self._fiber_sum(self.table(z), p) + self.a_tilde(p)

    def eigenvalues(self, p: QuasiMomentum, z) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix(p, z))

    def derivative(self, p: QuasiMomentum, z) -> np.ndarray:
        return self._fiber_sum(self.table(z, derivative=True), p)

    def delta_vectors(self, p: QuasiMomentum, l_max: int) -> np.ndarray:
        """delta~ for the working sites, shape (l_max + 1, |N|, D)."""
        p1, p2 = self.fiber_momentum(p)
        return _delta_block(
            self.working.planar_positions, p1, p2, l_max, self.geometry,
            self.working.lattice, self.N, self.control.m_window,
        )

    def mode_derivative(self, p: QuasiMomentum, z: float) -> np.ndarray:
        """dQ~/dz from the Landau/transverse double series with a mean-field l tail."""
        geom = self.geometry
        abs_b = geom.abs_b
        l_max = self.control.mode_l_max
        n = np.arange(1, self.control.mode_n_max + 1)
        heights = self.working.heights
        chi = math.sqrt(2.0 / geom.d) * np.sin(np.outer(n, heights) * math.pi / geom.d)
        transverse = (math.pi * n / geom.d) ** 2

        delta = self.delta_vectors(p, l_max)
        gram = np.einsum("lki,lkj->lij", delta.conj(), delta)
        l = np.arange(l_max + 1)
        energies = abs_b * (2 * l[:, None] + 1) + transverse[None, :] - z
        weights = np.einsum("ln,ni,nj->lij", 1.0 / energies**2, chi, chi)
        out = np.sum(gram * weights, axis=0)

        kappa = self.working.planar_positions
        coincident = np.linalg.norm(kappa[:, None, :] - kappa[None, :, :], axis=-1) < 1e-9 * self.working.lattice.a1
        tail_n = 1.0 / (2 * abs_b * (abs_b * (2 * l_max + 2) + transverse - z))
        tail = (abs_b / (2 * math.pi)) * np.einsum("n,ni,nj->ij", tail_n, chi, chi)
        return out + np.where(coincident, tail, 0.0)


@lru_cache(maxsize=32)
def fiber_model(config: ModelConfig, series: SeriesControl | None = None,
                control: BlochControl | None = None) -> FiberModel:
    """Shared FiberModel per (configuration, controls)."""
    return FiberModel(config, series, control)


def resolve_model(config, series, control) -> FiberModel:
    if isinstance(config, FiberModel):
        return config
    return fiber_model(config, series or DEFAULT_SERIES, control or DEFAULT_BLOCH)


def qtilde(p: QuasiMomentum, z, config, series: SeriesControl | None = None,
           control: BlochControl | None = None) -> QTildeMatrix:
    """Fiber matrix Q~(p; z) and A~(p) for a ModelConfig or FiberModel."""
    return resolve_model(config, series, control).qtilde(p, z)


def dqtilde_dz(p: QuasiMomentum, z: float, config, series: SeriesControl | None = None,
               control: BlochControl | None = None, method: str = "lattice") -> np.ndarray:
    """z-derivative of Q~(p; z).

    Args:
        method: "lattice" sums analytic kernel derivatives over the lattice;
            "modes" evaluates the Landau/transverse double series.
    """
    model = resolve_model(config, series, control)
    if method == "lattice":
        return model.derivative(p, z)
    if method == "modes":
        return model.mode_derivative(p, z)
    raise ConfigError(f"unknown derivative method: {method}")


def residue_data(p: QuasiMomentum, eps_i: float, config, series: SeriesControl | None = None,
                 control: BlochControl | None = None) -> ResidueData:
    """Residue Gram matrix, its rank and the compressed limit D at level eps_i."""
    model = resolve_model(config, series, control)
    ctrl = model.control
    geom = model.geometry
    table = level_table(geom, eps_i + 1e-6 * geom.abs_b)
    index = int(np.argmin(np.abs(np.array(table.levels) - eps_i)))
    if abs(table.levels[index] - eps_i) > 1e-9 * geom.abs_b:
        raise DomainError(f"{eps_i} is not a modified Landau level")
    pairs = table.pairs(index)
    gap = table.gap_below(index, geom.abs_b)

    l_top = max(l for l, _ in pairs)
    delta = model.delta_vectors(p, l_top)
    heights = model.working.heights
    rows = []
    for l, n in pairs:
        chi = math.sqrt(2.0 / geom.d) * np.sin(n * math.pi * heights / geom.d)
        chi = np.where(np.abs(chi) <= CHI_ZERO_TOL, 0.0, chi)
        rows.append(delta[l] * chi[None, :])
    W = np.concatenate(rows, axis=0)
    G = W.conj().T @ W
    G = 0.5 * (G + G.conj().T)

    singular = np.linalg.svd(G, compute_uv=False)
    sigma_max = float(singular[0]) if singular.size else 0.0
    floor = 1e-14 * (2.0 / geom.d) * math.sqrt(geom.abs_b) / model.working.lattice.a1
    if sigma_max <= floor:
        rank = 0
    else:
        rank = int(np.sum(singular > ctrl.rank_tol * sigma_max))

    _, vectors = np.linalg.eigh(G)
    # eigh sorts ascending: the kernel is the leading block
    basis = vectors[:, : model.size - rank]

    if basis.shape[1] == 0:
        D = np.zeros((0, 0), dtype=complex)
        invertible = True
    else:
        first, second = ctrl.richardson_offsets
        near = basis.conj().T @ model.matrix(p, eps_i - first * gap) @ basis
        far = basis.conj().T @ model.matrix(p, eps_i - second * gap) @ basis
        # linear extrapolation to the level cancels the O(offset) term
        D = (second * near - first * far) / (second - first)
        D = 0.5 * (D + D.conj().T)
        d_sv = np.linalg.svd(D, compute_uv=False)
        invertible = bool(d_sv[-1] > ctrl.invertibility_tol * max(d_sv[0], 1.0))

    return ResidueData(
        level=float(eps_i),
        G=G,
        singular_values=singular,
        rank=rank,
        kernel_basis=basis,
        D_op=D,
        d_invertible=invertible,
    )
