"""
Spectral assembly on top of the fiber matrices: eigencurves, dispersion
roots, torus scans, bands, multiplicity classification and gap preservation.

Every sorted eigencurve of Q~(p; z) + A~(p) increases in z between levels.
At a level the top r sorted curves escape to +inf and r new curves enter
from -inf at the bottom, so a curve followed from its entry to its escape
is a branch that crosses zero exactly once. fiber_sweep tracks these
branches per quasi-momentum; the level where a branch escapes and the
order in which branches escape there name its band slot.
"""

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .bloch import BlochControl, FiberModel, QuasiMomentum, residue_data, resolve_model
from .errors import ConfigError, ConvergenceError, CoverageError, LayerSpecError, PoleError
from .greens import SeriesControl
from .model import LevelTable, ModelConfig, reduced_impurity_set

logger = logging.getLogger(__name__)

INTERIOR = "interior-root"
TOUCH_LO = "endpoint-touch-lo"
TOUCH_HI = "endpoint-touch-hi"
EXTENDED = "extended-by-continuity"

# a level joins the point spectrum when it keeps multiplicity on more than this share of the grid
PERSIST_FRACTION = 0.5


@dataclass(frozen=True)
class SolverControl:
    """Tolerances of the spectral solver.

    energy_tol and degen_tol are relative to |B|; probe_offset is relative to
    the gap width. root_tol bounds |mu| of the eigencurve at an interior root.
    """

    root_tol: float = 1e-10
    energy_tol: float = 1e-10
    degen_tol: float = 1e-6
    probe_offset: float = 1e-6
    coverage_limit: float = 0.2
    zero_tol: float = 1e-8
    floor_steps: int = 60
    probe_p: tuple[float, float] = (0.1372, 0.6181)

    def __post_init__(self):
        for name in ("root_tol", "energy_tol", "degen_tol", "probe_offset", "zero_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.coverage_limit < 1:
            raise ConfigError(f"coverage_limit must lie in (0, 1), got {self.coverage_limit}")
        if not 0 < self.probe_offset < 0.5:
            raise ConfigError(f"probe_offset must lie in (0, 0.5), got {self.probe_offset}")


DEFAULT_SOLVER = SolverControl()


@dataclass(frozen=True)
class GapInterval:
    """Interval (lo, hi) between the entry and escape levels of a branch.

    level_index is the index of hi in the level table and slot the position
    of the branch among those escaping there.
    """

    lo: float
    hi: float
    merged_levels: tuple[float, ...] = ()
    level_index: int = 0
    slot: int = 0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"interval needs lo < hi, got ({self.lo}, {self.hi})")

    @property
    def span(self) -> int:
        """Number of free gaps covered."""
        return len(self.merged_levels) + 1

    def contains(self, energy: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= energy <= self.hi + tol


@dataclass(frozen=True)
class DispersionValue:
    energy: float
    status: str


@dataclass
class SweepResult:
    """Band values of one quasi-momentum keyed by (level index, slot)."""

    values: dict[tuple[int, int], DispersionValue] = field(default_factory=dict)
    births: dict[tuple[int, int], int] = field(default_factory=dict)
    anomalies: list[str] = field(default_factory=list)

    @property
    def generic(self) -> bool:
        return not self.anomalies


@dataclass
class DispersionSurface:
    interval: GapInterval
    p1: np.ndarray
    p2: np.ndarray
    values: np.ndarray
    status: np.ndarray

    @property
    def slot(self) -> tuple[int, int]:
        return self.interval.level_index, self.interval.slot

    @property
    def hull(self) -> tuple[float, float]:
        return float(np.min(self.values)), float(np.max(self.values))

    @property
    def width(self) -> float:
        lo, hi = self.hull
        return hi - lo


@dataclass(frozen=True)
class Band:
    band_id: int
    interval: GapInterval
    e_min: float
    e_max: float
    degeneracy: int
    degenerate_point: bool

    @property
    def width(self) -> float:
        return self.e_max - self.e_min


@dataclass(frozen=True)
class PointLevel:
    level_index: int
    energy: float
    persists: bool
    orphan: bool
    fraction: float
    cases: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class MultiplicityEntry:
    level_index: int
    level: float
    p: QuasiMomentum
    case: str
    rank: int
    d: int | None
    d_bounds: tuple[int, int]
    d_invertible: bool
    limit_value: float | None = None


@dataclass
class MultiplicityReport:
    entries: list[MultiplicityEntry]

    def for_level(self, index: int) -> list[MultiplicityEntry]:
        return [e for e in self.entries if e.level_index == index]

    def persistence(self, index: int) -> float:
        """Fraction of grid points where the level keeps a positive multiplicity."""
        entries = self.for_level(index)
        if not entries:
            return 0.0
        return sum(1 for e in entries if e.d_bounds[0] > 0) / len(entries)


@dataclass(frozen=True)
class GateResult:
    level_index: int
    level: float
    rank: int
    expected_rank: int
    d_invertible: bool

    @property
    def passed(self) -> bool:
        return self.rank == self.expected_rank and self.d_invertible


@dataclass(frozen=True)
class GapPreservation:
    level_index: int
    preserved: bool
    node: bool
    max_fiber_value: float | None
    crossings: int


@dataclass
class BandStructure:
    """Bands and point spectrum of one scan.

    count_mismatches lists the non-orphan levels where the number of split-off
    bands differs from expected_bands_per_level.
    """

    bands: list[Band]
    point_spectrum: list[PointLevel]
    intervals: list[GapInterval]
    surfaces: list[DispersionSurface]
    common_endpoints: list[float]
    r_max: int
    expected_bands_per_level: int
    generation: list[int]
    count_mismatches: list[int] = field(default_factory=list)


def _model(config, series=None, bloch=None) -> FiberModel:
    return resolve_model(config, series, bloch)


def mu_eigencurves(p: QuasiMomentum, z: float, config, series: SeriesControl | None = None,
                   bloch: BlochControl | None = None) -> np.ndarray:
    """Ascending eigenvalues of Q~(p; z) + A~(p).

    Raises:
        PoleError: z within the pole guard of a level; carries the number of
            curves diverging there.
    """
    model = _model(config, series, bloch)
    try:
        values = model.eigenvalues(p, z)
    except PoleError as exc:
        if exc.level is None or exc.diverging is not None:
            raise
        rank = residue_data(p, exc.level, model).rank
        raise PoleError(str(exc), level=exc.level, diverging=rank) from exc
    if not np.all(np.isfinite(values)):
        raise PoleError(f"eigencurves overflow at z={z}")
    return values


def torus_grid(shape: tuple[int, int], M: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred grid over [0, 1/M) x [0, 1)."""
    g1, g2 = shape
    if g1 < 1 or g2 < 1:
        raise ConfigError(f"grid must be positive, got {shape}")
    p1 = (np.arange(g1) + 0.5) / (g1 * M)
    p2 = (np.arange(g2) + 0.5) / g2
    return p1, p2


def generation_counts(model: FiberModel, levels: LevelTable, control: SolverControl | None = None) -> list[int]:
    """Number of curves escaping at each level, from the residue rank at a probe quasi-momentum."""
    control = control or DEFAULT_SOLVER
    probe = QuasiMomentum(control.probe_p[0] / model.M, control.probe_p[1])
    counts = []
    for index, level in enumerate(levels.levels):
        if levels.orphan[index]:
            counts.append(0)
            continue
        counts.append(residue_data(probe, level, model).rank)
    return counts


def build_intervals(config, levels: LevelTable, generation: list[int] | None = None,
                    control: SolverControl | None = None) -> list[GapInterval]:
    """Intervals owned by the band slots up to the last level of the table."""
    model = _model(config)
    if generation is None:
        generation = generation_counts(model, levels, control)
    size = model.size
    births = [-1] * size
    intervals = []
    for index, level in enumerate(levels.levels):
        r = generation[index]
        escaping = births[size - r:] if r else []
        for slot, birth in enumerate(escaping):
            lo = -math.inf if birth < 0 else levels.levels[birth]
            merged = tuple(levels.levels[birth + 1:index])
            intervals.append(GapInterval(lo=lo, hi=level, merged_levels=merged, level_index=index, slot=slot))
        births = [index] * r + births[: size - r]
    return intervals


def _floor_energy(model: FiberModel, p: QuasiMomentum, levels: LevelTable, control: SolverControl) -> float:
    """An energy below which every eigencurve is negative."""
    abs_b = model.geometry.abs_b
    distance = abs_b
    for _ in range(control.floor_steps):
        z = levels.levels[0] - distance
        if np.max(model.eigenvalues(p, z)) < 0:
            return z
        distance *= 2.0
    raise ConvergenceError(f"no energy with all eigencurves negative found at p=({p.p1}, {p.p2})")


def _interior_root(curve, z_lo: float, z_hi: float, energy_tol: float, root_tol: float) -> float:
    """Sign change of one eigencurve, accepted once |mu| <= root_tol.

    Raises:
        ConvergenceError: the curve stays above root_tol even at machine resolution.
    """
    root = float(brentq(curve, z_lo, z_hi, xtol=energy_tol, maxiter=200))
    residual = abs(curve(root))
    if residual <= root_tol:
        return root
    # second pass down to the rtol floor of brentq
    root = float(brentq(curve, z_lo, z_hi, xtol=np.finfo(float).tiny, maxiter=400))
    residual = abs(curve(root))
    if residual > root_tol:
        raise ConvergenceError(f"eigencurve root at z={root!r} leaves |mu|={residual:.3e} > root_tol={root_tol:.1e}")
    return root


def fiber_sweep(model: FiberModel, p: QuasiMomentum, levels: LevelTable, generation: list[int],
                control: SolverControl | None = None, last_level: int | None = None) -> SweepResult:
    """Band values at one quasi-momentum for every slot up to last_level."""
    control = control or DEFAULT_SOLVER
    size = model.size
    energy_tol = control.energy_tol * model.geometry.abs_b
    last = len(levels) - 1 if last_level is None else last_level
    result = SweepResult()

    # branches in sorted-index order; root None while pending
    branches = [{"birth": -1, "root": None} for _ in range(size)]
    lo = _floor_energy(model, p, levels, control)

    for index in range(last + 1):
        hi = levels.levels[index]
        offset = control.probe_offset * (hi - lo)
        z_lo = lo + offset
        z_hi = hi - offset
        n_lo = int(np.sum(model.eigenvalues(p, z_lo) < 0))
        n_hi = int(np.sum(model.eigenvalues(p, z_hi) < 0))
        pending = sum(1 for b in branches if b["root"] is None)

        if n_lo > pending:
            result.anomalies.append(f"gap {index}: {n_lo} negative curves but {pending} pending branches")
            n_lo = pending
        for k in range(n_lo, pending):
            branches[k]["root"] = DispersionValue(lo, TOUCH_LO)
        if n_hi > n_lo:
            result.anomalies.append(f"gap {index}: negative count grows from {n_lo} to {n_hi}")
            n_hi = n_lo

        for k in range(n_hi, n_lo):
            def curve(z, k=k):
                return float(model.eigenvalues(p, z)[k])

            root = _interior_root(curve, z_lo, z_hi, energy_tol, control.root_tol)
            branches[k]["root"] = DispersionValue(root, INTERIOR)

        r = generation[index]
        escaping = branches[size - r:] if r else []
        for slot, branch in enumerate(escaping):
            if branch["root"] is None:
                branch["root"] = DispersionValue(hi, TOUCH_HI)
            result.values[(index, slot)] = branch["root"]
            result.births[(index, slot)] = branch["birth"]
        branches = [{"birth": index, "root": None} for _ in range(r)] + branches[: size - r]
        lo = hi
    return result


def dispersion_root(p: QuasiMomentum, interval: GapInterval, config, levels: LevelTable,
                    generation: list[int] | None = None, control: SolverControl | None = None) -> DispersionValue:
    """Band value of the slot owning `interval` at quasi-momentum p."""
    model = _model(config)
    if generation is None:
        generation = generation_counts(model, levels, control)
    sweep = fiber_sweep(model, p, levels, generation, control, last_level=interval.level_index)
    return sweep.values[(interval.level_index, interval.slot)]


def _newton_polish(model: FiberModel, p: QuasiMomentum, energy: float, interval: GapInterval) -> float:
    try:
        values, vectors = np.linalg.eigh(model.matrix(p, energy))
        k = int(np.argmin(np.abs(values)))
        v = vectors[:, k]
        slope = float(np.real(v.conj() @ model.derivative(p, energy) @ v))
        if slope > 0:
            energy = energy - float(values[k]) / slope
    except LayerSpecError:
        return energy
    return float(min(max(energy, interval.lo), interval.hi))


def scan_torus(config, levels: LevelTable, shape: tuple[int, int] = (16, 16),
               control: SolverControl | None = None, jobs: int = 1,
               generation: list[int] | None = None) -> list[DispersionSurface]:
    """Dispersion surfaces of every band slot over a torus grid.

    Raises:
        CoverageError: more than coverage_limit of the grid needed the continuity fill.
    """
    control = control or DEFAULT_SOLVER
    model = _model(config)
    if shape[0] < 4 or shape[1] < 4:
        raise ConfigError(f"torus grid must be at least 4x4, got {shape}")
    if generation is None:
        generation = generation_counts(model, levels, control)
    intervals = build_intervals(model, levels, generation, control)
    p1, p2 = torus_grid(shape, model.M)
    points = [(a, b) for a in range(shape[0]) for b in range(shape[1])]

    def work(index):
        a, b = index
        p = QuasiMomentum(float(p1[a]), float(p2[b]))
        try:
            sweep = fiber_sweep(model, p, levels, generation, control)
        except (PoleError, ConvergenceError, ValueError) as exc:
            logger.warning(f"sweep failed at p=({p.p1:.4f}, {p.p2:.4f}): {exc}")
            return index, None
        if not sweep.generic:
            logger.warning(f"non-generic sweep at p=({p.p1:.4f}, {p.p2:.4f}): {'; '.join(sweep.anomalies)}")
            return index, None
        return index, sweep

    logger.info("=" * 60)
    logger.info(f"Scanning {shape[0]}x{shape[1]} torus grid for {len(intervals)} band slots")
    logger.info("=" * 60)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(work, points))
    else:
        results = dict(work(index) for index in points)

    missing = [index for index, sweep in results.items() if sweep is None]
    if len(missing) > control.coverage_limit * len(points):
        raise CoverageError(
            f"{len(missing)} of {len(points)} grid points have no dispersion root; "
            f"the configuration looks non-generic"
        )
    if missing:
        logger.warning(f"{len(missing)} grid points filled by continuity")

    surfaces = []
    for interval in intervals:
        slot = (interval.level_index, interval.slot)
        values = np.full(shape, np.nan)
        status = np.empty(shape, dtype=object)
        for (a, b), sweep in results.items():
            if sweep is not None:
                values[a, b] = sweep.values[slot].energy
                status[a, b] = sweep.values[slot].status
        for a, b in missing:
            neighbours = [
                values[(a + da) % shape[0], (b + db) % shape[1]]
                for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1))
            ]
            defined = [v for v in neighbours if np.isfinite(v)]
            guess = float(np.mean(defined)) if defined else float(np.nanmean(values))
            p = QuasiMomentum(float(p1[a]), float(p2[b]))
            if interval.lo < guess < interval.hi:
                guess = _newton_polish(model, p, guess, interval)
            values[a, b] = guess
            status[a, b] = EXTENDED
        surfaces.append(DispersionSurface(interval=interval, p1=p1, p2=p2, values=values, status=status))
    logger.info(f"Scan finished: {len(points) - len(missing)} points solved, {len(missing)} extended")
    return surfaces


def classify_multiplicity(config, levels: LevelTable, shape: tuple[int, int] = (4, 4),
                          control: SolverControl | None = None) -> MultiplicityReport:
    """Multiplicity of every level at every grid point from its residue data."""
    control = control or DEFAULT_SOLVER
    model = _model(config)
    p1, p2 = torus_grid(shape, model.M)
    n_flux = abs(model.N)
    size = model.size
    entries = []
    for index, level in enumerate(levels.levels):
        n_pairs = len(levels.pairs(index))
        for a in p1:
            for b in p2:
                p = QuasiMomentum(float(a), float(b))
                data = residue_data(p, level, model)
                r = data.rank
                limit_value = None
                if size == 1:
                    if r == 1:
                        case, d = "generic-split", n_flux * n_pairs - 1
                    else:
                        limit_value = float(np.real(data.D_op[0, 0]))
                        if abs(limit_value) > control.zero_tol:
                            case, d = "persists", n_flux * n_pairs
                        else:
                            case, d = "enlarged", n_flux * n_pairs + 1
                    bounds = (d, d)
                elif data.d_invertible:
                    case, d = "exact", n_flux * n_pairs - r
                    bounds = (d, d)
                else:
                    case, d = "bracket", None
                    bounds = (n_flux * n_pairs - r, n_flux * n_pairs + size - r)
                entries.append(MultiplicityEntry(
                    level_index=index, level=level, p=p, case=case, rank=r, d=d,
                    d_bounds=bounds, d_invertible=data.d_invertible, limit_value=limit_value,
                ))
    return MultiplicityReport(entries=entries)


def generic_gate(config, levels: LevelTable, control: SolverControl | None = None) -> list[GateResult]:
    """Rank and invertibility check of every non-orphan level at the probe quasi-momentum."""
    control = control or DEFAULT_SOLVER
    model = _model(config)
    probe = QuasiMomentum(control.probe_p[0] / model.M, control.probe_p[1])
    reduced = len(reduced_impurity_set(model.working.impurities))
    results = []
    for index, level in enumerate(levels.levels):
        if levels.orphan[index]:
            continue
        data = residue_data(probe, level, model)
        expected = min(abs(model.N) * len(levels.pairs(index)), reduced)
        gate = GateResult(index, level, data.rank, expected, data.d_invertible)
        if not gate.passed:
            logger.warning(
                f"level {index} ({level:.6f}): rank {data.rank}, expected {expected}, "
                f"D invertible={data.d_invertible}; reporting multiplicity brackets"
            )
        results.append(gate)
    return results


def common_endpoints(surfaces: list[DispersionSurface], report: MultiplicityReport | None,
                     levels: LevelTable, tol: float) -> list[float]:
    """Levels shared as an endpoint by the bands just below and just above them."""
    shared = []
    for index, level in enumerate(levels.levels):
        below = [s for s in surfaces if s.interval.hi == level]
        above = [s for s in surfaces if s.interval.lo == level]
        if not below or not above:
            continue
        touching = max(s.hull[1] for s in below) >= level - tol and min(s.hull[0] for s in above) <= level + tol
        two_sided = False
        if report is not None:
            limits = [e.limit_value for e in report.for_level(index) if e.limit_value is not None]
            two_sided = bool(limits) and min(limits) <= 0 <= max(limits)
        if touching or two_sided:
            shared.append(level)
    return shared


def assemble_bands(surfaces: list[DispersionSurface], config, levels: LevelTable,
                   report: MultiplicityReport | None = None, control: SolverControl | None = None,
                   generation: list[int] | None = None) -> BandStructure:
    """Bands, point spectrum and common endpoints from scanned surfaces."""
    control = control or DEFAULT_SOLVER
    model = _model(config)
    abs_b = model.geometry.abs_b
    bands = []
    for band_id, surface in enumerate(surfaces):
        e_min, e_max = surface.hull
        bands.append(Band(
            band_id=band_id,
            interval=surface.interval,
            e_min=e_min,
            e_max=e_max,
            degeneracy=model.M,
            degenerate_point=(e_max - e_min) < control.degen_tol * abs_b,
        ))

    point_spectrum = []
    if report is not None:
        for index, level in enumerate(levels.levels):
            entries = report.for_level(index)
            if not entries:
                continue
            fraction = report.persistence(index)
            cases = tuple(sorted(Counter(e.case for e in entries).items()))
            point_spectrum.append(PointLevel(
                level_index=index, energy=level, persists=fraction > PERSIST_FRACTION,
                orphan=levels.orphan[index], fraction=fraction, cases=cases,
            ))

    reduced = len(reduced_impurity_set(model.config.impurities))
    r_max = min(abs(model.N), len(reduced_impurity_set(model.working.impurities)))
    expected = min(reduced * model.M, abs(model.N))
    if generation is None:
        generation = generation_counts(model, levels, control)
    mismatches = []
    for index, count in enumerate(generation):
        if not levels.orphan[index] and count != expected:
            mismatches.append(index)
            logger.warning(f"level {index}: {count} bands split off, expected min(nM, N) = {expected}")

    shared = common_endpoints(surfaces, report, levels, control.energy_tol * abs_b) if model.size == 1 else []
    return BandStructure(
        bands=bands,
        point_spectrum=point_spectrum,
        intervals=[s.interval for s in surfaces],
        surfaces=surfaces,
        common_endpoints=shared,
        r_max=r_max,
        expected_bands_per_level=expected,
        generation=list(generation),
        count_mismatches=mismatches,
    )


def gap_preservation_check(config, level_index: int, levels: LevelTable, shape: tuple[int, int] = (4, 4),
                           control: SolverControl | None = None) -> GapPreservation:
    """Whether (levels[i-1], levels[i]) stays free of band values on the grid."""
    control = control or DEFAULT_SOLVER
    model = _model(config)
    if not 0 <= level_index < len(levels):
        raise ConfigError(f"level index {level_index} outside the table")
    node = levels.orphan[level_index]
    hi = levels.levels[level_index]
    p1, p2 = torus_grid(shape, model.M)
    grid = [QuasiMomentum(float(a), float(b)) for a in p1 for b in p2]

    max_value = None
    if node:
        max_value = max(float(np.max(model.eigenvalues(p, hi))) for p in grid)
    if level_index == 0:
        return GapPreservation(level_index, False, node, max_value, crossings=-1)

    lo = levels.levels[level_index - 1]
    offset = control.probe_offset * (hi - lo)
    crossings = 0
    for p in grid:
        n_lo = int(np.sum(model.eigenvalues(p, lo + offset) < 0))
        n_hi = int(np.sum(model.eigenvalues(p, hi - offset) < 0))
        crossings += abs(n_lo - n_hi)
    preserved = crossings == 0
    logger.info(f"gap below level {level_index} ({hi:.6f}): node={node}, crossings={crossings}, preserved={preserved}")
    return GapPreservation(level_index, preserved, node, max_value, crossings)


def full_spectrum(config: ModelConfig, E_max: float, shape: tuple[int, int] = (16, 16),
                  control: SolverControl | None = None, series: SeriesControl | None = None,
                  bloch: BlochControl | None = None, jobs: int = 1,
                  multiplicity_shape: tuple[int, int] | None = None) -> tuple[BandStructure, MultiplicityReport]:
    """Bands and multiplicities of every level up to E_max."""
    control = control or DEFAULT_SOLVER
    model = _model(config, series, bloch)
    levels = config.levels(E_max)
    logger.info("=" * 60)
    logger.info(f"Full spectrum: {len(levels)} levels up to {E_max}, flux {config.flux.N}/{config.flux.M}, "
                f"{model.size} working sites")
    logger.info("=" * 60)
    generation = generation_counts(model, levels, control)
    surfaces = scan_torus(model, levels, shape, control, jobs, generation)
    report = classify_multiplicity(model, levels, multiplicity_shape or (4, 4), control)
    structure = assemble_bands(surfaces, model, levels, report, control, generation)
    logger.info(f"Found {len(structure.bands)} bands, "
                f"{sum(1 for lv in structure.point_spectrum if lv.persists)} persisting levels")
    return structure, report
