"""
Free Green functions of the magnetic layer and the Krein Q-matrix kernels.

All layer kernels are organized through the parameter
u_n = (|B| - z + (πn/d)²) / (2|B|) = c + w n², so no square-root branch is
ever chosen explicitly for real z.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import CoincidenceError, ConfigError, ConvergenceError, DomainError, PoleError
from .model import CHI_ZERO_TOL, LayerGeometry, wedge
from .specfun import EULER_GAMMA, digamma, gamma_tricomi_u_1, trigamma

logger = logging.getLogger(__name__)

POLE_GUARD = 1e-10
VERTICAL_THRESHOLD = 1e-9


@dataclass(frozen=True)
class SeriesControl:
    """Truncation controls for transverse series.

    Attributes:
        abs_tol: Absolute tolerance for series tails.
        n_max: Hard cap on the transverse index.
        tail_mode: "accelerated" adds the analytic tail of Q0, "direct" sums to n_max.
    """

    abs_tol: float = 1e-12
    n_max: int = 65536
    tail_mode: str = "accelerated"

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ConfigError(f"abs_tol must be positive, got {self.abs_tol}")
        if self.n_max < 32:
            raise ConfigError(f"n_max must be at least 32, got {self.n_max}")
        if self.tail_mode not in ("direct", "accelerated"):
            raise ConfigError(f"unknown tail_mode: {self.tail_mode}")


DEFAULT_SERIES = SeriesControl()


@dataclass(frozen=True)
class KernelPoint:
    """A point of the layer: planar (x1, x2) and transverse x3 in [0, d]."""

    x1: float
    x2: float
    x3: float

    @property
    def planar(self) -> np.ndarray:
        return np.array([self.x1, self.x2], dtype=float)


def transverse_momentum(z: complex, n: int, geom: LayerGeometry) -> complex:
    """k_n = sqrt(z - (πn/d)²) on the branch Im k_n >= 0."""
    k = np.sqrt(complex(z) - (math.pi * n / geom.d) ** 2)
    if k.imag < 0 or (k.imag == 0 and k.real < 0):
        k = -k
    return complex(k)


def decay_exponent(energy: float, geom: LayerGeometry) -> float:
    """Polynomial growth exponent |E - |B| - (π/d)²| / |B| of Q at large distances."""
    return abs(float(np.real(energy)) - geom.abs_b - geom.transverse_unit) / geom.abs_b


def _c_and_w(z, geom: LayerGeometry):
    abs_b = geom.abs_b
    c = (abs_b - z) / (2.0 * abs_b)
    w = math.pi**2 / (2.0 * abs_b * geom.d**2)
    return c, w


def _near_pole(u: np.ndarray) -> np.ndarray:
    # |z - ε| < POLE_GUARD·|B|  <=>  |u + l| < POLE_GUARD / 2
    nearest = np.round(np.real(u))
    return (nearest <= 0) & (np.abs(u - nearest) < 0.5 * POLE_GUARD)


def _pole_energy(u: complex, n: int, geom: LayerGeometry) -> float:
    l = int(-round(float(np.real(u))))
    return geom.abs_b * (2 * l + 1) + (math.pi * n / geom.d) ** 2


def g2d_free(x, xp, z: complex, geom: LayerGeometry) -> complex:
    """Kernel of the planar magnetic resolvent (h - z)^-1.

    (1/4π) exp(-i(B/2) x∧x' - s/2) Γ(u) U(u, 1; s), s = (|B|/2)|x - x'|²,
    u = (|B| - z)/(2|B|).

    Raises:
        CoincidenceError: x == x'.
        PoleError: z within the guard of a planar Landau level.
    """
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    r2 = float(np.sum((x - xp) ** 2))
    if r2 == 0.0:
        raise CoincidenceError("planar kernel diverges logarithmically at coincident points")
    u = (geom.abs_b - z) / (2.0 * geom.abs_b)
    if _near_pole(np.atleast_1d(u))[0]:
        raise PoleError(f"z={z} is a planar Landau level", level=geom.abs_b * (1 - 2 * round(float(np.real(u)))))
    s = 0.5 * geom.abs_b * r2
    phase = np.exp(-0.5j * geom.B * wedge(x, xp))
    return complex(phase * math.exp(-0.5 * s) * gamma_tricomi_u_1(u, s) / (4 * math.pi))


def _layer_series(s, phase, x3, x3p, z, geom: LayerGeometry, ctrl: SeriesControl, derivative: bool) -> np.ndarray:
    """Σ_n G2D(s; z - (πn/d)²) χ_n(x3) χ_n(x3') for many point pairs at once.

    With derivative set, the z-derivative of the same series is returned.
    """
    c, w = _c_and_w(z, geom)
    abs_b = geom.abs_b
    d = geom.d
    norm = math.sqrt(2.0 / d)

    _, first, inverse = np.unique(np.round(s, 12), return_index=True, return_inverse=True)
    s_key = np.asarray(s, dtype=float)[first]
    inverse = inverse.ravel()
    # pairs sharing (s, x3, x3') share the whole series
    pair_keys = np.stack([inverse.astype(float), x3, x3p], axis=1)
    unique_pairs, pair_inverse = np.unique(pair_keys, axis=0, return_inverse=True)
    pair_inverse = pair_inverse.ravel()
    s_idx = unique_pairs[:, 0].astype(int)
    a3 = unique_pairs[:, 1]
    b3 = unique_pairs[:, 2]
    s_pair = s_key[s_idx]

    rho = np.exp(-math.pi * np.sqrt(2.0 * s_pair / abs_b) / d)
    geometric = rho / (1.0 - rho)
    total = np.zeros(len(unique_pairs), dtype=complex)
    active = np.ones(len(unique_pairs), dtype=bool)

    n0 = 1
    chunk = 8
    while np.any(active):
        if n0 > ctrl.n_max:
            raise ConvergenceError(
                f"layer series did not meet abs_tol={ctrl.abs_tol} within n_max={ctrl.n_max} "
                f"(smallest planar separation² {s_pair[active].min() * 2 / abs_b:.3e})"
            )
        n = np.arange(n0, min(n0 + chunk, ctrl.n_max + 1))
        cols = np.nonzero(active)[0]
        u = c + w * n.astype(float) ** 2

        chi_a = norm * np.sin(np.outer(n, a3[cols]) * math.pi / d)
        chi_b = norm * np.sin(np.outer(n, b3[cols]) * math.pi / d)
        zero = (np.abs(chi_a) <= CHI_ZERO_TOL) | (np.abs(chi_b) <= CHI_ZERO_TOL)
        pole_rows = _near_pole(u)
        if np.any(pole_rows[:, None] & ~zero):
            row = int(np.nonzero(pole_rows[:, None] & ~zero)[0][0])
            level = _pole_energy(u[row], int(n[row]), geom)
            raise PoleError(f"z={z} within the pole guard of level {level}", level=level)

        u_safe = np.where(pole_rows, 1.0, u)
        s_cols = s_pair[cols]
        uu, ss = np.broadcast_arrays(u_safe[:, None], s_cols[None, :])
        if derivative:
            v, dv = gamma_tricomi_u_1(uu, ss, derivative=True)
            term_values = dv * (-1.0 / (2.0 * abs_b))
        else:
            v = gamma_tricomi_u_1(uu, ss)
            term_values = v
        weights = np.where(zero, 0.0, chi_a * chi_b)
        total[cols] += np.sum(term_values * weights, axis=0)

        last = np.abs(v[-1]) * np.exp(-0.5 * s_cols)
        bound = last * (2.0 / d) * geometric[cols] / (4 * math.pi)
        settled = (np.real(u[-1]) > 1.0) & (bound < ctrl.abs_tol)
        active[cols[settled]] = False
        n0 = int(n[-1]) + 1
        chunk = min(2 * chunk, 1024)

    total *= np.exp(-0.5 * s_pair) / (4 * math.pi)
    return phase * total[pair_inverse]


def _cosine_tail(x: float, n_terms: int, power: int) -> float:
    """Σ_{n > n_terms} cos(2πnx) / n^power for power 2 or 4."""
    x = x % 1.0
    if power == 2:
        full = math.pi**2 * (x * x - x + 1.0 / 6.0)
    else:
        full = -(math.pi**4 / 3.0) * (x**4 - 2 * x**3 + x * x - 1.0 / 30.0)
    n = np.arange(1, n_terms + 1, dtype=float)
    return full - float(np.sum(np.cos(2 * math.pi * n * x) / n**power))


def _bracket(arg: float) -> float:
    """C_E + ψ(arg) + (π/2) cot(π arg)."""
    return EULER_GAMMA + digamma(arg) + 0.5 * math.pi / math.tan(math.pi * arg)


def _transverse_sum(a3: float, b3: float, z, geom: LayerGeometry, ctrl: SeriesControl, derivative: bool) -> complex:
    """Regularized coincident-planar series for heights a3, b3 (a3 == b3 gives Q0)."""
    d = geom.d
    abs_b = geom.abs_b
    c, w = _c_and_w(z, geom)
    if ctrl.tail_mode == "accelerated":
        by_energy = 32.0 * math.sqrt(abs(c) / w + 1.0)
        by_tol = ((abs(c) + 1.0) ** 3 / (w**3 * ctrl.abs_tol)) ** 0.2
        n_terms = int(min(max(1024, math.ceil(by_energy), math.ceil(by_tol)), ctrl.n_max))
    else:
        n_terms = ctrl.n_max

    n = np.arange(1, n_terms + 1, dtype=float)
    u = c + w * n * n
    sin_a = np.sin(n * math.pi * a3 / d)
    sin_b = np.sin(n * math.pi * b3 / d)
    norm = math.sqrt(2.0 / d)
    zero = (np.abs(norm * sin_a) <= CHI_ZERO_TOL) | (np.abs(norm * sin_b) <= CHI_ZERO_TOL)
    poles = _near_pole(u)
    if np.any(poles & ~zero):
        k = int(np.nonzero(poles & ~zero)[0][0])
        level = _pole_energy(u[k], k + 1, geom)
        raise PoleError(f"z={z} within the pole guard of level {level}", level=level)
    u_safe = np.where(poles | zero, 1.0, u)

    if derivative:
        summand = trigamma(u_safe) / (2.0 * abs_b)
    else:
        summand = np.log(w * n * n) - digamma(u_safe)
    series = np.sum(np.where(zero, 0.0, summand * sin_a * sin_b))

    if ctrl.tail_mode == "accelerated":
        x_minus = (a3 - b3) / (2.0 * d)
        x_plus = (a3 + b3) / (2.0 * d)
        tail2 = 0.5 * (_cosine_tail(x_minus, n_terms, 2) - _cosine_tail(x_plus, n_terms, 2))
        tail4 = 0.5 * (_cosine_tail(x_minus, n_terms, 4) - _cosine_tail(x_plus, n_terms, 4))
        if derivative:
            series += (tail2 / w + (0.5 - c) * tail4 / w**2) / (2.0 * abs_b)
        else:
            a1 = 0.5 - c
            a2 = 0.5 * c * c - 0.5 * c + 1.0 / 12.0
            series += a1 * tail2 / w + a2 * tail4 / w**2

    value = series / (2 * math.pi * d)
    if derivative:
        return complex(value)
    sigma = (a3 + b3) / (2.0 * d)
    value += _bracket(sigma) / (4 * math.pi * d)
    if a3 != b3:
        value -= _bracket(abs(a3 - b3) / (2.0 * d)) / (4 * math.pi * d)
    return complex(value)


def _check_height(x3: float, geom: LayerGeometry, strict: bool = True):
    if strict and not 0.0 < x3 < geom.d:
        raise DomainError(f"height {x3} must lie strictly inside (0, {geom.d})")


def q0_regularized(kappa3: float, z, geom: LayerGeometry, ctrl: SeriesControl | None = None) -> complex:
    """Regularized diagonal Q0(κ3; z) of the Krein matrix.

    Raises:
        PoleError: z within the pole guard of a level whose mode does not vanish at κ3.
    """
    _check_height(kappa3, geom)
    return _transverse_sum(kappa3, kappa3, z, geom, ctrl or DEFAULT_SERIES, derivative=False)


def q0_regularized_dz(kappa3: float, z, geom: LayerGeometry, ctrl: SeriesControl | None = None) -> complex:
    _check_height(kappa3, geom)
    return _transverse_sum(kappa3, kappa3, z, geom, ctrl or DEFAULT_SERIES, derivative=True)


def q_vertical(kappa3: float, kappa3p: float, z, geom: LayerGeometry, ctrl: SeriesControl | None = None) -> complex:
    """Q between two impurities sharing planar coordinates at different heights."""
    _check_height(kappa3, geom)
    _check_height(kappa3p, geom)
    if kappa3 == kappa3p:
        raise CoincidenceError("vertical pair needs distinct heights")
    return _transverse_sum(kappa3, kappa3p, z, geom, ctrl or DEFAULT_SERIES, derivative=False)


def q_vertical_dz(kappa3: float, kappa3p: float, z, geom: LayerGeometry, ctrl: SeriesControl | None = None) -> complex:
    _check_height(kappa3, geom)
    _check_height(kappa3p, geom)
    return _transverse_sum(kappa3, kappa3p, z, geom, ctrl or DEFAULT_SERIES, derivative=True)


def _layer_pair(p: KernelPoint, pp: KernelPoint, z, geom, ctrl, derivative):
    for point in (p, pp):
        if not 0.0 <= point.x3 <= geom.d:
            raise DomainError(f"height {point.x3} outside [0, {geom.d}]")
    r2 = float(np.sum((p.planar - pp.planar) ** 2))
    if r2 == 0.0:
        raise CoincidenceError("layer kernel series diverges for coincident planar points")
    if p.x3 in (0.0, geom.d) or pp.x3 in (0.0, geom.d):
        return 0j
    s = np.array([0.5 * geom.abs_b * r2])
    phase = np.exp(-0.5j * geom.B * wedge(p.planar, pp.planar))
    out = _layer_series(s, np.array([phase]), np.array([p.x3]), np.array([pp.x3]), z, geom, ctrl or DEFAULT_SERIES, derivative)
    return complex(out[0])


def g0_layer(p: KernelPoint, pp: KernelPoint, z, geom: LayerGeometry, ctrl: SeriesControl | None = None) -> complex:
    """Free layer resolvent kernel as a transverse-mode series.

    Raises:
        ConvergenceError: n_max reached before the K0 tail bound meets abs_tol.
    """
    return _layer_pair(p, pp, z, geom, ctrl, derivative=False)


def g0_layer_dz(p: KernelPoint, pp: KernelPoint, z, geom: LayerGeometry, ctrl: SeriesControl | None = None) -> complex:
    return _layer_pair(p, pp, z, geom, ctrl, derivative=True)


def q_elements(x, xp, x3, x3p, z, geom: LayerGeometry, ctrl: SeriesControl | None = None,
               lattice_scale: float = 1.0, derivative: bool = False) -> np.ndarray:
    """Krein kernel Q(γ, γ'; z) for many pairs.

    Args:
        x, xp: Planar coordinates, shape (P, 2).
        x3, x3p: Heights, shape (P,).
        lattice_scale: a1; planar distances below 1e-9·a1 use the coincident formulas.
        derivative: Return dQ/dz instead.

    Returns:
        Complex array of shape (P,).
    """
    ctrl = ctrl or DEFAULT_SERIES
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    x3 = np.atleast_1d(np.asarray(x3, dtype=float))
    x3p = np.atleast_1d(np.asarray(x3p, dtype=float))
    for h in (x3, x3p):
        if np.any(h <= 0) or np.any(h >= geom.d):
            raise DomainError("impurity heights must lie strictly inside the layer")

    r2 = np.sum((x - xp) ** 2, axis=1)
    coincident = r2 < (VERTICAL_THRESHOLD * lattice_scale) ** 2
    out = np.zeros(len(r2), dtype=complex)

    cache: dict[tuple[float, float], complex] = {}
    for idx in np.nonzero(coincident)[0]:
        key = (float(x3[idx]), float(x3p[idx]))
        if key not in cache:
            cache[key] = _transverse_sum(key[0], key[1], z, geom, ctrl, derivative)
        out[idx] = cache[key]

    others = ~coincident
    if np.any(others):
        s = 0.5 * geom.abs_b * r2[others]
        phase = np.exp(-0.5j * geom.B * wedge(x[others], xp[others]))
        out[others] = _layer_series(s, phase, x3[others], x3p[others], z, geom, ctrl, derivative)
    return out


def q_element(gamma: KernelPoint, gammap: KernelPoint, z, geom: LayerGeometry,
              ctrl: SeriesControl | None = None, lattice_scale: float = 1.0) -> complex:
    """Single Krein-matrix element with dispatch on the pair geometry."""
    out = q_elements(gamma.planar, gammap.planar, gamma.x3, gammap.x3, z, geom, ctrl, lattice_scale)
    return complex(out[0])
