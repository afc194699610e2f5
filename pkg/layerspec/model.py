"""
Physical configuration of the layer: geometry, lattice, impurities, couplings,
flux arithmetic and the modified-Landau-level bookkeeping.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from .errors import ConfigError, DomainError, IrrationalFluxError

logger = logging.getLogger(__name__)

CHI_ZERO_TOL = 1e-12
FLUX_TOL = 1e-12
RATIONAL_DENOMINATOR_CAP = 10**6


def wedge(x, y):
    """Planar wedge x∧y = x1*y2 - x2*y1 (broadcasts over leading axes)."""
    x = np.asarray(x)
    y = np.asarray(y)
    return x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]


@dataclass(frozen=True)
class LayerGeometry:
    """Layer width d and signed field B (units ħ = c = e = 2m = 1)."""

    d: float
    B: float

    def __post_init__(self):
        if not (math.isfinite(self.d) and self.d > 0):
            raise ConfigError(f"layer width must be positive, got d={self.d}")
        if not math.isfinite(self.B) or self.B == 0:
            raise ConfigError(f"field must be finite and nonzero, got B={self.B}")

    @property
    def abs_b(self) -> float:
        return abs(self.B)

    @property
    def transverse_unit(self) -> float:
        """(π/d)², the lowest transverse-mode energy."""
        return (math.pi / self.d) ** 2


@dataclass(frozen=True)
class PlanarLattice:
    """Bravais lattice spanned by a = (a1, 0) and b = (b1, b2)."""

    a1: float
    b1: float = 0.0
    b2: float = 1.0

    def __post_init__(self):
        if not self.a1 > 0:
            raise ConfigError(f"a1 must be positive, got {self.a1}")
        if self.b2 == 0:
            raise ConfigError("b2 must be nonzero")

    @property
    def area(self) -> float:
        return self.a1 * abs(self.b2)

    def vector(self, la, lb) -> np.ndarray:
        """Physical planar vector la*a + lb*b; broadcasts over integer arrays."""
        la = np.asarray(la, dtype=float)
        lb = np.asarray(lb, dtype=float)
        return np.stack([la * self.a1 + lb * self.b1, lb * self.b2], axis=-1)


@dataclass(frozen=True)
class Impurity:
    """Impurity at cell coordinates (s, t) and height kappa3."""

    s: float
    t: float
    kappa3: float


@dataclass(frozen=True)
class ImpuritySet:
    points: tuple[Impurity, ...]

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def validate(self, geom: LayerGeometry):
        if not self.points:
            raise ConfigError("impurity set is empty")
        for imp in self.points:
            if not (0.0 <= imp.s < 1.0 and 0.0 <= imp.t < 1.0):
                raise ConfigError(f"cell coordinates must lie in [0,1)^2, got ({imp.s}, {imp.t})")
            if not 0.0 < imp.kappa3 < geom.d:
                raise ConfigError(f"impurity height must lie in (0, d), got {imp.kappa3}")
        for i, first in enumerate(self.points):
            for second in self.points[i + 1:]:
                if (
                    abs(first.s - second.s) < 1e-12
                    and abs(first.t - second.t) < 1e-12
                    and abs(first.kappa3 - second.kappa3) < 1e-12
                ):
                    raise ConfigError(f"duplicate impurity at {first}")

    def planar(self, lat: PlanarLattice) -> np.ndarray:
        """Planar positions, shape (|K|, 2)."""
        s = np.array([imp.s for imp in self.points])
        t = np.array([imp.t for imp in self.points])
        return lat.vector(s, t)

    @property
    def heights(self) -> np.ndarray:
        return np.array([imp.kappa3 for imp in self.points])


@dataclass(frozen=True)
class CouplingMatrix:
    """Point-interaction coupling A.

    kind "diagonal" carries one alpha per impurity; kind "general" carries
    displacement blocks C_mu with A(mu + kappa_i, kappa_j) = C_mu[i, j]. Blocks are
    stored as nested tuples so the configuration stays hashable. Missing
    Hermitian partners (-mu) are generated by ModelConfig.
    """

    kind: str
    alphas: tuple[float, ...] = ()
    blocks: tuple = ()
    c1: float | None = None
    c2: float | None = None

    def __post_init__(self):
        if self.kind not in ("diagonal", "general"):
            raise ConfigError(f"unknown coupling kind: {self.kind}")
        if self.kind == "diagonal" and not self.alphas:
            raise ConfigError("diagonal coupling needs one alpha per impurity")
        if self.kind == "general" and not self.blocks:
            raise ConfigError("general coupling needs at least one block")

    @classmethod
    def diagonal(cls, alphas) -> "CouplingMatrix":
        return cls(kind="diagonal", alphas=tuple(float(a) for a in alphas))

    @classmethod
    def hopping(cls, blocks: dict, c1: float | None = None, c2: float | None = None) -> "CouplingMatrix":
        """Build a general coupling from {(mu_a, mu_b): square matrix}."""
        packed = []
        for disp, matrix in sorted(blocks.items()):
            arr = np.atleast_2d(np.asarray(matrix, dtype=complex))
            if arr.shape[0] != arr.shape[1]:
                raise ConfigError(f"coupling block {disp} is not square")
            packed.append(((int(disp[0]), int(disp[1])), tuple(tuple(row) for row in arr.tolist())))
        return cls(kind="general", blocks=tuple(packed), c1=c1, c2=c2)

    def size(self) -> int:
        if self.kind == "diagonal":
            return len(self.alphas)
        return len(self.blocks[0][1])

    def given_blocks(self) -> dict[tuple[int, int], np.ndarray]:
        if self.kind == "diagonal":
            return {(0, 0): np.diag(np.array(self.alphas, dtype=complex))}
        return {disp: np.array(rows, dtype=complex) for disp, rows in self.blocks}


@dataclass(frozen=True)
class FluxData:
    xi: float
    eta: float
    N: int
    M: int


@dataclass(frozen=True)
class LevelTable:
    """Distinct modified Landau levels up to E_max.

    degeneracy[i] is the J-set of levels[i]; orphan[i] flags levels invisible
    to every impurity.
    """

    levels: tuple[float, ...]
    degeneracy: tuple[tuple[tuple[int, int], ...], ...]
    orphan: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def pairs(self, index: int) -> tuple[tuple[int, int], ...]:
        return self.degeneracy[index]

    def gap_below(self, index: int, abs_b: float) -> float:
        """Width of the gap ending at levels[index]; |B| for the lowest level."""
        if index == 0:
            return abs_b
        return self.levels[index] - self.levels[index - 1]


def flux_data(geom: LayerGeometry, lat: PlanarLattice, max_denominator: int = 1000) -> FluxData:
    """Flux per unit area xi, per cell eta = N/M.

    Raises:
        IrrationalFluxError: no N/M with M <= max_denominator within 1e-12.
    """
    xi = geom.B / (2 * math.pi)
    eta = lat.a1 * lat.b2 * xi
    frac = Fraction(eta).limit_denominator(max_denominator)
    if frac == 0 or abs(eta - float(frac)) > FLUX_TOL * max(1.0, abs(eta)):
        raise IrrationalFluxError(
            f"flux per cell eta={eta!r} is not rational with denominator <= {max_denominator}"
        )
    return FluxData(xi=xi, eta=eta, N=frac.numerator, M=frac.denominator)


def rational_relation(geom: LayerGeometry) -> Fraction | None:
    """Rational value of (π/d)²/|B| when the two level spacings are commensurate.

    Continued fractions with denominator cap 10^6; near-rational ratios beyond
    the cap are treated as irrational.
    """
    ratio = geom.transverse_unit / geom.abs_b
    frac = Fraction(ratio).limit_denominator(RATIONAL_DENOMINATOR_CAP)
    error = abs(ratio - float(frac))
    if error <= 8 * np.finfo(float).eps * ratio:
        return frac
    if error <= 1e-9 * ratio:
        logger.warning(
            f"(π/d)²/|B| = {ratio!r} is within {error:.2e} of {frac} but beyond the "
            f"denominator cap; treating the level spacings as incommensurate"
        )
    return None


def modified_landau_level(l: int, n: int, geom: LayerGeometry) -> float:
    """ε(l, n) = |B|(2l + 1) + (πn/d)²."""
    if l < 0 or n < 1:
        raise DomainError(f"need l >= 0 and n >= 1, got l={l}, n={n}")
    return geom.abs_b * (2 * l + 1) + (math.pi * n / geom.d) ** 2


def transverse_mode(n, x3, geom: LayerGeometry):
    """χ_n(x3) = sqrt(2/d) sin(nπ x3/d); broadcasts over n and x3."""
    x3_arr = np.asarray(x3, dtype=float)
    if np.any(x3_arr < 0) or np.any(x3_arr > geom.d):
        raise DomainError(f"transverse coordinate outside [0, d]: {x3}")
    value = math.sqrt(2.0 / geom.d) * np.sin(np.asarray(n) * math.pi * x3_arr / geom.d)
    return float(value) if np.ndim(value) == 0 else value


def level_table(geom: LayerGeometry, E_max: float, impurities: ImpuritySet | None = None) -> LevelTable:
    """Enumerate distinct ε(l, n) <= E_max with their J-sets and orphan flags."""
    lowest = modified_landau_level(0, 1, geom)
    if E_max <= lowest:
        raise ConfigError(f"E_max={E_max} must exceed the lowest level {lowest}")

    entries = []
    n = 1
    while geom.abs_b + (math.pi * n / geom.d) ** 2 <= E_max:
        l = 0
        while True:
            energy = modified_landau_level(l, n, geom)
            if energy > E_max:
                break
            entries.append((energy, l, n))
            l += 1
        n += 1
    entries.sort()

    # ε(l,n)/|B| = 2l + 1 + r n², so pairs coincide only for rational r
    relation = rational_relation(geom)
    merged: dict = {}
    for energy, l, n in entries:
        key = (l, n) if relation is None else 2 * l + 1 + relation * n * n
        if key in merged:
            merged[key][1].append((l, n))
        else:
            merged[key] = (energy, [(l, n)])
    levels = [energy for energy, _ in merged.values()]
    groups = [group for _, group in merged.values()]

    heights = impurities.heights if impurities is not None else np.array([])
    orphan = []
    for group in groups:
        if heights.size == 0:
            orphan.append(False)
            continue
        chis = [np.abs(transverse_mode(n, heights, geom)) for _, n in group]
        orphan.append(bool(all(np.all(c <= CHI_ZERO_TOL) for c in chis)))

    table = LevelTable(
        levels=tuple(levels),
        degeneracy=tuple(tuple(sorted(g)) for g in groups),
        orphan=tuple(orphan),
    )
    logger.debug(f"level table up to {E_max}: {len(table)} levels, {sum(table.orphan)} orphan")
    return table


def reduced_impurity_set(imp: ImpuritySet) -> ImpuritySet:
    """One representative (smallest kappa3) per planar position, first-seen order."""
    chosen: dict[tuple[float, float], Impurity] = {}
    order: list[tuple[float, float]] = []
    for point in imp.points:
        key = None
        for existing in order:
            if abs(existing[0] - point.s) < 1e-12 and abs(existing[1] - point.t) < 1e-12:
                key = existing
                break
        if key is None:
            key = (point.s, point.t)
            order.append(key)
            chosen[key] = point
        elif point.kappa3 < chosen[key].kappa3:
            chosen[key] = point
    return ImpuritySet(points=tuple(chosen[key] for key in order))


@dataclass(frozen=True)
class ModelConfig:
    """Immutable physical configuration shared read-only by all workers."""

    geometry: LayerGeometry
    lattice: PlanarLattice
    impurities: ImpuritySet
    coupling: CouplingMatrix
    max_denominator: int = 1000
    original_m: int = 1

    def __post_init__(self):
        self.impurities.validate(self.geometry)
        if self.coupling.size() != len(self.impurities):
            raise ConfigError(
                f"coupling size {self.coupling.size()} does not match {len(self.impurities)} impurities"
            )
        # rejects irrational flux at construction
        _ = self.flux
        _ = self.coupling_blocks

    @cached_property
    def flux(self) -> FluxData:
        return flux_data(self.geometry, self.lattice, self.max_denominator)

    @cached_property
    def planar_positions(self) -> np.ndarray:
        return self.impurities.planar(self.lattice)

    @cached_property
    def heights(self) -> np.ndarray:
        return self.impurities.heights

    @cached_property
    def coupling_blocks(self) -> dict[tuple[int, int], np.ndarray]:
        """All displacement blocks of A including generated Hermitian partners."""
        given = self.coupling.given_blocks()
        xi = self.flux.xi
        kappa = self.planar_positions
        size = len(self.impurities)
        blocks = {disp: mat.copy() for disp, mat in given.items()}
        for disp, mat in given.items():
            if mat.shape != (size, size):
                raise ConfigError(f"coupling block {disp} has shape {mat.shape}, expected {(size, size)}")
            mu = self.lattice.vector(*disp)
            # C_{-mu}[j, i] = exp(iπξ (κ_j - κ_i)∧mu) conj(C_mu[i, j])
            partner = np.empty_like(mat)
            for i in range(size):
                for j in range(size):
                    phase = np.exp(1j * math.pi * xi * wedge(kappa[j] - kappa[i], mu))
                    partner[j, i] = phase * np.conj(mat[i, j])
            minus = (-disp[0], -disp[1])
            if minus in given:
                if not np.allclose(given[minus], partner, atol=1e-10):
                    raise ConfigError(f"coupling blocks {disp} and {minus} are not Hermitian partners")
            else:
                blocks[minus] = partner
        self._check_decay(blocks)
        return blocks

    def _check_decay(self, blocks: dict[tuple[int, int], np.ndarray]):
        c2 = self.coupling.c2 if self.coupling.c2 is not None else 1.0
        lengths = {disp: float(np.linalg.norm(self.lattice.vector(*disp))) for disp in blocks}
        if self.coupling.c1 is None:
            return
        for disp, mat in blocks.items():
            bound = self.coupling.c1 * math.exp(-c2 * lengths[disp])
            if np.max(np.abs(mat)) > bound * (1 + 1e-9) + 1e-14:
                raise ConfigError(f"coupling block {disp} violates the decay certificate c1={self.coupling.c1}, c2={c2}")

    def coupling_entry(self, delta: tuple[int, int], i: int, j: int, shift: tuple[int, int] = (0, 0)) -> complex:
        """A(delta + nu + kappa_i, nu + kappa_j) with nu the lattice vector `shift`."""
        block = self.coupling_blocks.get((int(delta[0]), int(delta[1])))
        if block is None:
            return 0j
        value = block[i, j]
        if shift == (0, 0) or value == 0:
            return complex(value)
        kappa = self.planar_positions
        d_vec = self.lattice.vector(*delta) + kappa[i] - kappa[j]
        nu = self.lattice.vector(*shift)
        return complex(np.exp(-1j * math.pi * self.flux.xi * wedge(d_vec, nu)) * value)

    def levels(self, E_max: float) -> LevelTable:
        return level_table(self.geometry, E_max, self.impurities)


def enlarged_cell(config: ModelConfig, flux: FluxData) -> tuple[PlanarLattice, ImpuritySet]:
    """Lattice (a, M b) and impurity copies K + {0, b, ..., (M-1) b}, m-major order."""
    lat = config.lattice
    M = flux.M
    if M == 1:
        return lat, config.impurities
    new_lat = PlanarLattice(a1=lat.a1, b1=M * lat.b1, b2=M * lat.b2)
    points = tuple(
        Impurity(s=imp.s, t=(imp.t + m) / M, kappa3=imp.kappa3)
        for m in range(M)
        for imp in config.impurities
    )
    return new_lat, ImpuritySet(points=points)


def enlarged_config(config: ModelConfig) -> ModelConfig:
    """Working configuration with integer flux: the enlarged cell plus lifted couplings."""
    flux = config.flux
    M = flux.M
    if M == 1:
        return config
    new_lat, new_imp = enlarged_cell(config, flux)
    K = len(config.impurities)

    if config.coupling.kind == "diagonal":
        coupling = CouplingMatrix.diagonal(list(config.coupling.alphas) * M)
    else:
        lifted: dict[tuple[int, int], np.ndarray] = {}
        for (mu_a, mu_b) in config.coupling_blocks:
            for m in range(M):
                for mp in range(M):
                    if (mu_b - m + mp) % M:
                        continue
                    disp = (mu_a, (mu_b - m + mp) // M)
                    block = lifted.setdefault(disp, np.zeros((M * K, M * K), dtype=complex))
                    for i in range(K):
                        for j in range(K):
                            block[m * K + i, mp * K + j] = config.coupling_entry((mu_a, mu_b), i, j, shift=(0, mp))
        coupling = CouplingMatrix.hopping(lifted, c1=None, c2=config.coupling.c2)

    logger.info(f"enlarged cell for flux {flux.N}/{M}: {M * K} sites, integer flux {flux.N}")
    return ModelConfig(
        geometry=config.geometry,
        lattice=new_lat,
        impurities=new_imp,
        coupling=coupling,
        max_denominator=config.max_denominator,
        original_m=M,
    )
