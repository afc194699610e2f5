"""
Tests for eigencurves, band slots, torus scans, multiplicities and gap checks.
"""

import math
from collections import Counter

import numpy as np
import pytest

from .bloch import FiberModel, QuasiMomentum, residue_data
from .conftest import build_config
from .errors import ConfigError, ConvergenceError, PoleError
from .model import modified_landau_level
from .solver import (
    INTERIOR,
    PERSIST_FRACTION,
    GapInterval,
    SolverControl,
    assemble_bands,
    build_intervals,
    classify_multiplicity,
    dispersion_root,
    full_spectrum,
    gap_preservation_check,
    generation_counts,
    generic_gate,
    mu_eigencurves,
    scan_torus,
    torus_grid,
)

PI = math.pi


@pytest.fixture(scope="module")
def mono_scan(mono_config):
    levels = mono_config.levels(30.0)
    surfaces = scan_torus(mono_config, levels, (4, 4))
    report = classify_multiplicity(mono_config, levels, (2, 2))
    structure = assemble_bands(surfaces, mono_config, levels, report)
    return levels, surfaces, structure


def test_torus_grid_is_cell_centred():
    p1, p2 = torus_grid((4, 2), M=2)
    np.testing.assert_allclose(p1, [0.0625, 0.1875, 0.3125, 0.4375])
    np.testing.assert_allclose(p2, [0.25, 0.75])
    with pytest.raises(ConfigError):
        torus_grid((0, 4))


def test_control_and_interval_validation():
    with pytest.raises(ConfigError):
        SolverControl(energy_tol=0.0)
    with pytest.raises(ConfigError):
        SolverControl(coverage_limit=1.5)
    with pytest.raises(ConfigError):
        GapInterval(lo=2.0, hi=1.0)
    interval = GapInterval(lo=-math.inf, hi=3.0, merged_levels=(1.0,))
    assert interval.span == 2
    assert interval.contains(-1e9)


def test_eigencurves_increase_within_gap(stacked_config):
    rng = np.random.default_rng(5)
    level = modified_landau_level(0, 1, stacked_config.geometry)
    for _ in range(20):
        p = QuasiMomentum(*rng.uniform(0, 1, 2))
        z1, z2 = np.sort(rng.uniform(-30.0, level - 0.05, 2))
        below = mu_eigencurves(p, z1, stacked_config)
        above = mu_eigencurves(p, z2, stacked_config)
        assert np.all(above > below)


def test_divergent_curve_count_matches_rank(stacked_config):
    p = QuasiMomentum(0.27, 0.55)
    geom = stacked_config.geometry
    level = modified_landau_level(0, 1, geom)
    values = mu_eigencurves(p, level - 1e-8 * geom.abs_b, stacked_config)
    rank = residue_data(p, level, FiberModel(stacked_config)).rank
    assert rank == 1
    assert int(np.sum(values > 1e6)) == rank

    with pytest.raises(PoleError) as info:
        mu_eigencurves(p, level, stacked_config)
    assert info.value.diverging == rank


def test_eigencurve_pole_resolved_close_to_level(mono_config):
    p = QuasiMomentum(0.27, 0.55)
    geom = mono_config.geometry
    level = modified_landau_level(0, 1, geom)
    rank = residue_data(p, level, FiberModel(mono_config)).rank
    scaled = []
    for offset in (1e-7, 1e-8, 1e-9):
        values = mu_eigencurves(p, level - offset * geom.abs_b, mono_config)
        assert np.all(np.isfinite(values))
        assert int(np.sum(values > 1e6)) == rank
        scaled.append(values.max() * offset)
    # the diverging curve grows like the inverse distance to the level
    assert scaled[1] == pytest.approx(scaled[0], rel=1e-3)
    assert scaled[2] == pytest.approx(scaled[0], rel=1e-3)


def test_eigencurves_far_below_spectrum(mono_config):
    z = -1e4
    values = mu_eigencurves(QuasiMomentum(0.3, 0.7), z, mono_config)
    assert np.all(values < -math.sqrt(-z) / (8 * PI))


def test_build_intervals_consecutive_levels(mono_config):
    levels = mono_config.levels(42.0)
    intervals = build_intervals(mono_config, levels)
    assert [(iv.lo, iv.hi) for iv in intervals] == [
        (-math.inf, levels.levels[0]),
        (levels.levels[0], levels.levels[1]),
        (levels.levels[1], levels.levels[2]),
    ]
    assert all(iv.span == 1 for iv in intervals)


def test_build_intervals_skip_orphan_level(node_config):
    levels = node_config.levels(55.0)
    assert levels.orphan == (False, False, False, True, False)
    generation = generation_counts(FiberModel(node_config), levels)
    assert generation == [1, 1, 1, 0, 1]
    intervals = build_intervals(node_config, levels, generation)
    assert len(intervals) == 4
    merged = intervals[-1]
    assert (merged.lo, merged.hi) == (levels.levels[2], levels.levels[4])
    assert merged.merged_levels == (levels.levels[3],)
    assert merged.span == 2


def test_build_intervals_vertical_stack_spans_two_gaps(stacked_config):
    levels = stacked_config.levels(42.0)
    intervals = build_intervals(stacked_config, levels)
    assert [(iv.lo, iv.hi) for iv in intervals] == [
        (-math.inf, levels.levels[0]),
        (-math.inf, levels.levels[1]),
        (levels.levels[0], levels.levels[2]),
    ]
    assert max(iv.span for iv in intervals) == 2


def test_dispersion_root_is_unique_sign_change(mono_config):
    levels = mono_config.levels(20.0)
    interval = build_intervals(mono_config, levels)[0]
    p = QuasiMomentum(0.3, 0.7)
    value = dispersion_root(p, interval, mono_config, levels)
    assert value.status == INTERIOR
    assert interval.contains(value.energy)

    model = FiberModel(mono_config)
    assert abs(model.eigenvalues(p, value.energy)[0]) < 1e-6
    zs = np.linspace(value.energy - 5.0, levels.levels[0] - 1e-3, 64)
    signs = np.sign([model.eigenvalues(p, z)[0] for z in zs])
    assert int(np.sum(signs[1:] != signs[:-1])) == 1


def test_interior_root_meets_root_tol(mono_config):
    levels = mono_config.levels(20.0)
    interval = build_intervals(mono_config, levels)[0]
    p = QuasiMomentum(0.3, 0.7)
    control = SolverControl(root_tol=1e-10)
    value = dispersion_root(p, interval, mono_config, levels, control=control)
    assert value.status == INTERIOR
    assert np.min(np.abs(mu_eigencurves(p, value.energy, mono_config))) <= control.root_tol

    with pytest.raises(ConvergenceError):
        dispersion_root(p, interval, mono_config, levels, control=SolverControl(root_tol=1e-300))


def test_dispersion_decreases_with_coupling():
    p_points = [QuasiMomentum(0.125, 0.375), QuasiMomentum(0.375, 0.875)]
    roots = []
    for alpha in (-1.0, 0.0, 1.0):
        config = build_config(alphas=[alpha])
        levels = config.levels(20.0)
        interval = build_intervals(config, levels)[0]
        roots.append([dispersion_root(p, interval, config, levels).energy for p in p_points])
    roots = np.array(roots)
    assert np.all(np.diff(roots, axis=0) < 0)


def test_scan_confined_to_intervals(mono_scan):
    levels, surfaces, _ = mono_scan
    assert len(surfaces) == len(levels)
    for surface in surfaces:
        assert surface.values.shape == (4, 4)
        assert np.all(np.isfinite(surface.values))
        assert np.all(surface.values > surface.interval.lo)
        assert np.all(surface.values < surface.interval.hi)
        assert all(status == INTERIOR for status in surface.status.ravel())


def test_one_band_per_gap(mono_scan):
    levels, _, structure = mono_scan
    assert len(structure.bands) == len(levels)
    assert [band.interval.hi for band in structure.bands] == list(levels.levels)
    assert not any(band.degenerate_point for band in structure.bands)
    assert all(band.degeneracy == 1 for band in structure.bands)
    assert structure.expected_bands_per_level == 1
    assert structure.generation == [1, 1]


def test_stacked_band_count_per_level(stacked_config):
    levels = stacked_config.levels(30.0)
    surfaces = scan_torus(stacked_config, levels, (4, 4))
    structure = assemble_bands(surfaces, stacked_config, levels)
    # two sites on one planar position count once
    assert structure.expected_bands_per_level == 1
    counts = Counter(band.interval.level_index for band in structure.bands)
    assert [counts[index] for index in range(len(levels))] == [1] * len(levels)
    assert structure.generation == [1] * len(levels)
    assert structure.count_mismatches == []


def test_band_count_mismatch_reported(mono_config, mono_scan):
    levels, surfaces, structure = mono_scan
    assert structure.count_mismatches == []
    skewed = assemble_bands(surfaces, mono_config, levels, generation=[1, 0])
    assert skewed.count_mismatches == [1]


def test_simple_levels_leave_point_spectrum(mono_scan):
    _, _, structure = mono_scan
    assert len(structure.point_spectrum) == 2
    assert not any(level.persists for level in structure.point_spectrum)
    assert all(level.persists == (level.fraction > PERSIST_FRACTION) for level in structure.point_spectrum)
    assert all(level.cases == (("generic-split", 4),) for level in structure.point_spectrum)


def test_scan_rejects_coarse_grid(mono_config):
    with pytest.raises(ConfigError):
        scan_torus(mono_config, mono_config.levels(20.0), (2, 2))


def test_generic_gate_passes_for_monoatomic(mono_config):
    gates = generic_gate(mono_config, mono_config.levels(42.0))
    assert len(gates) == 3
    assert all(gate.passed for gate in gates)


def test_multiplicity_generic_split_at_double_flux():
    config = build_config(B=4 * PI)
    levels = config.levels(modified_landau_level(0, 1, config.geometry) + 1.0)
    report = classify_multiplicity(config, levels, (2, 2))
    for entry in report.for_level(0):
        assert entry.case == "generic-split"
        assert entry.rank == 1
        assert entry.d == 1
    assert report.persistence(0) == 1.0


def test_multiplicity_node_persists_then_enlarges(node_config):
    levels = node_config.levels(46.0)
    node = 3
    assert levels.orphan[node]
    report = classify_multiplicity(node_config, levels, (1, 1))
    (entry,) = report.for_level(node)
    assert entry.rank == 0
    assert entry.case == "persists"
    assert entry.d == 1

    p = QuasiMomentum(0.5, 0.5)
    limit = residue_data(p, levels.levels[node], FiberModel(node_config)).D_op[0, 0].real
    tuned = build_config(points=((0.0, 0.0, 0.5),), alphas=[-limit])
    (entry,) = classify_multiplicity(tuned, levels, (1, 1)).for_level(node)
    assert entry.case == "enlarged"
    assert entry.d == 2
    assert abs(entry.limit_value) <= 1e-8


def test_multiplicity_brackets_for_two_sites(stacked_config):
    levels = stacked_config.levels(20.0)
    report = classify_multiplicity(stacked_config, levels, (2, 2))
    for entry in report.for_level(0):
        assert entry.rank == 1
        assert entry.case in ("exact", "bracket")
        lo, hi = entry.d_bounds
        assert 0 <= lo <= hi


def test_gap_preserved_below_node_level(node_config):
    levels = node_config.levels(46.0)
    node = 3
    model = FiberModel(node_config)
    p1, p2 = torus_grid((4, 4))
    largest = max(abs(model.matrix(QuasiMomentum(a, b), levels.levels[node])[0, 0].real) for a in p1 for b in p2)
    tuned = build_config(points=((0.0, 0.0, 0.5),), alphas=[-2.0 * largest])

    result = gap_preservation_check(tuned, node, levels)
    assert result.node
    assert result.preserved
    assert result.crossings == 0
    assert result.max_fiber_value < 0


def test_gap_not_preserved_below_visible_level(mono_config):
    levels = mono_config.levels(46.0)
    result = gap_preservation_check(mono_config, 3, levels)
    assert not result.node
    assert not result.preserved
    assert result.crossings == 16


def test_lowest_gap_never_preserved(node_config):
    levels = node_config.levels(46.0)
    assert not gap_preservation_check(node_config, 0, levels).preserved
    with pytest.raises(ConfigError):
        gap_preservation_check(node_config, 7, levels)


def test_half_flux_fibers_degenerate(half_flux_config):
    levels = half_flux_config.levels(14.0)
    generation = generation_counts(FiberModel(half_flux_config), levels)
    assert generation == [1]
    interval = build_intervals(half_flux_config, levels, generation)[0]
    for p1, p2 in ((0.1, 0.3), (0.4, 0.8)):
        first = dispersion_root(QuasiMomentum(p1, p2, j=0), interval, half_flux_config, levels, generation)
        second = dispersion_root(QuasiMomentum(p1, p2, j=1), interval, half_flux_config, levels, generation)
        assert first.energy == pytest.approx(second.energy, abs=1e-8)


def test_full_spectrum_matches_stepwise_pipeline(mono_config, mono_scan):
    levels, _, stepwise = mono_scan
    structure, report = full_spectrum(mono_config, 30.0, (4, 4), multiplicity_shape=(2, 2))
    assert len(structure.bands) == len(levels)
    for band, expected in zip(structure.bands, stepwise.bands):
        assert band.e_min == pytest.approx(expected.e_min, abs=1e-9)
        assert band.e_max == pytest.approx(expected.e_max, abs=1e-9)
    assert len(report.for_level(0)) == 4
