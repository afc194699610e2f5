"""
Tests for the planar and layer kernels and the Krein Q-matrix elements.
"""

import math

import numpy as np
import pytest
from scipy import integrate, special

from .errors import CoincidenceError, DomainError, PoleError
from .greens import (
    KernelPoint,
    SeriesControl,
    decay_exponent,
    g0_layer,
    g2d_free,
    q0_regularized,
    q0_regularized_dz,
    q_element,
    q_elements,
    q_vertical,
    q_vertical_dz,
    transverse_momentum,
)
from .model import LayerGeometry, modified_landau_level, transverse_mode

PI = math.pi


def _v_by_quadrature(u, s):
    """Γ(u)U(u,1;s) = ∫_0^∞ e^{-st} t^{u-1} (1+t)^{-u} dt."""
    peak = math.sqrt(u / s)

    def f(t):
        return math.exp(-s * t + (u - 1) * math.log(t) - u * math.log1p(t))

    left, _ = integrate.quad(f, 0, peak, epsabs=0, epsrel=1e-13, limit=200)
    right, _ = integrate.quad(f, peak, np.inf, epsabs=0, epsrel=1e-13, limit=200)
    return left + right


def _brute_q0(kappa3, z, geom, n_terms):
    """Partial transverse sum of Q0 without the analytic tail."""
    n = np.arange(1, n_terms + 1, dtype=float)
    c = (geom.abs_b - z) / (2 * geom.abs_b)
    w = PI**2 / (2 * geom.abs_b * geom.d**2)
    u = c + w * n * n
    big = u > 100
    psi_minus_log = np.where(big, -0.5 / u - 1 / (12 * u * u) + 1 / (120 * u**4), special.digamma(u) - np.log(u))
    summand = -psi_minus_log - np.log1p(c / (w * n * n))
    return float(np.sum(summand * np.sin(n * PI * kappa3 / geom.d) ** 2))


def _reference_q0(kappa3, z, geom):
    n_terms = 400_000
    # partial sums have a 1/N tail
    series = 2 * _brute_q0(kappa3, z, geom, 2 * n_terms) - _brute_q0(kappa3, z, geom, n_terms)
    sigma = kappa3 / geom.d
    bracket = np.euler_gamma + special.digamma(sigma) + 0.5 * PI / math.tan(PI * sigma)
    return series / (2 * PI * geom.d) + bracket / (4 * PI * geom.d)


def test_transverse_momentum_branch(unit_layer):
    assert transverse_momentum(-1.0, 1, unit_layer) == pytest.approx(1j * math.sqrt(1 + PI**2))
    assert transverse_momentum(100.0, 1, unit_layer) == pytest.approx(math.sqrt(100 - PI**2))
    assert transverse_momentum(5.0 + 1.0j, 2, unit_layer).imag > 0


def test_decay_exponent(unit_layer):
    assert decay_exponent(2 * PI + PI**2, unit_layer) == pytest.approx(0.0, abs=1e-14)
    assert decay_exponent(4 * PI + PI**2, unit_layer) == pytest.approx(1.0)


def test_g2d_hermitian_symmetry(unit_layer):
    x, xp = (0.2, -0.4), (1.1, 0.3)
    assert g2d_free(x, xp, -3.0, unit_layer) == pytest.approx(np.conj(g2d_free(xp, x, -3.0, unit_layer)), rel=1e-13)


def test_g2d_magnetic_translation_covariance(unit_layer):
    x, xp = np.array([0.2, -0.4]), np.array([1.1, 0.3])
    lam = np.array([1.0, 2.0])
    xi = unit_layer.B / (2 * PI)
    shifted = g2d_free(x - lam, xp - lam, -3.0, unit_layer)
    phase = np.exp(1j * PI * xi * ((x - xp)[0] * lam[1] - (x - xp)[1] * lam[0]))
    assert shifted == pytest.approx(phase * g2d_free(x, xp, -3.0, unit_layer), rel=1e-12)


def test_g2d_gaussian_decay(unit_layer):
    r = 6.0
    value = g2d_free((0.0, 0.0), (r, 0.0), -1.0, unit_layer)
    assert abs(value) <= 1e3 * math.exp(-(unit_layer.abs_b / 4) * r * r)


def test_g2d_matches_bessel_form(unit_layer):
    x, xp = (0.0, 0.0), (0.5, 0.0)
    s = 0.5 * unit_layer.abs_b * 0.25
    u = (unit_layer.abs_b + 2.0) / (2 * unit_layer.abs_b)
    expected = math.exp(-s / 2) * special.gamma(u) * special.hyperu(u, 1.0, s) / (4 * PI)
    assert g2d_free(x, xp, -2.0, unit_layer).real == pytest.approx(expected, rel=1e-7)


def test_g2d_errors(unit_layer):
    with pytest.raises(CoincidenceError):
        g2d_free((0.0, 0.0), (0.0, 0.0), -1.0, unit_layer)
    with pytest.raises(PoleError):
        g2d_free((0.0, 0.0), (1.0, 0.0), 3 * unit_layer.abs_b, unit_layer)


def test_g0_layer_against_quadrature(unit_layer):
    p = KernelPoint(0.1, 0.0, 0.3)
    pp = KernelPoint(0.4, 0.2, 0.7)
    z = -2.0
    geom = unit_layer
    s = 0.5 * geom.abs_b * 0.13
    phase = np.exp(-0.5j * geom.B * (p.x1 * pp.x2 - p.x2 * pp.x1))
    expected = 0j
    for n in range(1, 26):
        u = (geom.abs_b - z + (PI * n) ** 2) / (2 * geom.abs_b)
        chi = transverse_mode(n, p.x3, geom) * transverse_mode(n, pp.x3, geom)
        expected += phase * math.exp(-s / 2) * _v_by_quadrature(u, s) * chi / (4 * PI)
    assert g0_layer(p, pp, z, geom) == pytest.approx(expected, abs=1e-10)


def test_g0_layer_symmetry_and_boundary(unit_layer):
    p = KernelPoint(0.0, 0.1, 0.25)
    pp = KernelPoint(0.3, -0.2, 0.8)
    assert g0_layer(p, pp, -1.0, unit_layer) == pytest.approx(np.conj(g0_layer(pp, p, -1.0, unit_layer)), rel=1e-12)
    assert g0_layer(p, KernelPoint(0.3, -0.2, 0.0), -1.0, unit_layer) == 0j
    assert g0_layer(p, KernelPoint(0.3, -0.2, 1.0), -1.0, unit_layer) == 0j
    with pytest.raises(CoincidenceError):
        g0_layer(p, KernelPoint(0.0, 0.1, 0.6), -1.0, unit_layer)


@pytest.mark.parametrize(
    "kappa3,z",
    [(0.5, -5.0), (0.37, -5.0), (0.13, 2.0), (0.81, -17.0), (0.62, 9.5), (0.29, 15.0)],
)
def test_q0_against_brute_force_sum(unit_layer, kappa3, z):
    assert q0_regularized(kappa3, z, unit_layer) == pytest.approx(_reference_q0(kappa3, z, unit_layer), abs=1e-8)


def test_q0_deep_negative_energy(unit_layer):
    z = -1e4
    scaled = q0_regularized(0.37, z, unit_layer).real * 4 * PI / math.sqrt(-z)
    assert -1.02 <= scaled <= -0.98


def test_q0_diverges_upward_below_level(unit_layer):
    level = modified_landau_level(0, 1, unit_layer)
    near = q0_regularized(0.37, level - 1e-6, unit_layer).real
    far = q0_regularized(0.37, level - 1e-2, unit_layer).real
    assert near - far > 1e2


def test_q0_is_herglotz_on_gap(unit_layer):
    level = modified_landau_level(0, 1, unit_layer)
    for z in np.linspace(-40.0, level - 0.1, 20):
        dz = q0_regularized_dz(0.37, z, unit_layer).real
        assert dz > 0
        h = 1e-5
        fd = (q0_regularized(0.37, z + h, unit_layer) - q0_regularized(0.37, z - h, unit_layer)).real / (2 * h)
        assert dz == pytest.approx(fd, rel=1e-6)


def test_q0_is_real_for_real_energy(unit_layer):
    assert q0_regularized(0.44, 3.0, unit_layer).imag == 0.0


def test_q0_tolerance_refinement(unit_layer):
    rng = np.random.default_rng(11)
    coarse = SeriesControl(abs_tol=1e-10)
    fine = SeriesControl(abs_tol=5e-11)
    for kappa3, z in zip(rng.uniform(0.05, 0.95, 10), rng.uniform(-30.0, 14.0, 10)):
        a = q0_regularized(kappa3, z, unit_layer, coarse)
        b = q0_regularized(kappa3, z, unit_layer, fine)
        assert abs(a - b) < coarse.abs_tol


def test_q0_direct_summation_approaches_accelerated(unit_layer):
    accelerated = q0_regularized(0.37, -3.0, unit_layer)
    direct = q0_regularized(0.37, -3.0, unit_layer, SeriesControl(tail_mode="direct", n_max=65536))
    shorter = q0_regularized(0.37, -3.0, unit_layer, SeriesControl(tail_mode="direct", n_max=8192))
    assert abs(direct - accelerated) < 1e-5
    assert abs(direct - accelerated) < abs(shorter - accelerated)


def test_q0_pole_and_orphan_level(unit_layer):
    level = modified_landau_level(0, 1, unit_layer)
    with pytest.raises(PoleError) as info:
        q0_regularized(0.37, level, unit_layer)
    assert info.value.level == pytest.approx(level)
    # the n = 2 mode vanishes at mid-height, so its level is not a pole there
    orphan = modified_landau_level(0, 2, unit_layer)
    assert math.isfinite(q0_regularized(0.5, orphan, unit_layer).real)


def test_q0_rejects_heights_outside_layer(unit_layer):
    with pytest.raises(DomainError):
        q0_regularized(0.0, -1.0, unit_layer)
    with pytest.raises(DomainError):
        q_elements([[0.0, 0.0]], [[1.0, 0.0]], [1.0], [0.5], -1.0, unit_layer)


def test_vertical_pair_symmetric_and_monotone(unit_layer):
    assert q_vertical(0.3, 0.6, -2.0, unit_layer) == pytest.approx(q_vertical(0.6, 0.3, -2.0, unit_layer), rel=1e-13)
    assert q_vertical_dz(0.3, 0.6, -2.0, unit_layer).real > 0
    with pytest.raises(CoincidenceError):
        q_vertical(0.3, 0.3, -2.0, unit_layer)


def test_vertical_seam_continuity(unit_layer):
    vertical = q_vertical(0.3, 0.6, -2.0, unit_layer)
    nearby = q_element(KernelPoint(0.0, 0.0, 0.3), KernelPoint(1e-3, 0.0, 0.6), -2.0, unit_layer)
    assert nearby == pytest.approx(vertical, rel=1e-4)
    dispatched = q_element(KernelPoint(0.0, 0.0, 0.3), KernelPoint(1e-11, 0.0, 0.6), -2.0, unit_layer)
    assert dispatched == vertical


def test_q_elements_hermitian(unit_layer):
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (20, 2))
    xp = rng.uniform(-2, 2, (20, 2))
    h = rng.uniform(0.1, 0.9, 20)
    hp = rng.uniform(0.1, 0.9, 20)
    forward = q_elements(x, xp, h, hp, -1.5, unit_layer)
    backward = q_elements(xp, x, hp, h, -1.5, unit_layer)
    np.testing.assert_allclose(forward, np.conj(backward), atol=1e-12)


def test_q_element_decays_with_distance(unit_layer):
    direction = np.array([0.6, 0.8])
    radii = np.arange(1.0, 3.01, 0.25)
    values = q_elements(radii[:, None] * direction, np.zeros((len(radii), 2)),
                        np.full(len(radii), 0.3), np.full(len(radii), 0.6), -1.0, unit_layer)
    magnitude = np.abs(values)
    assert np.all(np.diff(magnitude) < 0)
    ratio = magnitude[-1] / magnitude[0]
    assert ratio <= 10 * math.exp(-(unit_layer.abs_b / 4) * (9.0 - 1.0))


def test_q_elements_derivative_matches_finite_difference(unit_layer):
    x = np.array([[0.0, 0.0], [0.0, 0.0], [0.7, 0.2]])
    xp = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    h3 = np.array([0.4, 0.3, 0.4])
    hp3 = np.array([0.4, 0.6, 0.5])
    z, h = -4.0, 1e-5
    exact = q_elements(x, xp, h3, hp3, z, unit_layer, derivative=True)
    fd = (q_elements(x, xp, h3, hp3, z + h, unit_layer) - q_elements(x, xp, h3, hp3, z - h, unit_layer)) / (2 * h)
    np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-9)


def test_wider_layer_and_negative_field():
    geom = LayerGeometry(d=2.0, B=-PI)
    value = q0_regularized(0.8, -1.0, geom)
    assert value == q0_regularized(0.8, -1.0, LayerGeometry(d=2.0, B=PI))
    x, xp = (0.2, 0.0), (0.0, 0.3)
    assert g2d_free(x, xp, -1.0, geom) == pytest.approx(np.conj(g2d_free(x, xp, -1.0, LayerGeometry(d=2.0, B=PI))))
