"""Cell problems, mobility tables, the Darcy problem and the limit reconstruction."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thinbingham.errors import ExtrapolationError, ParameterError, PartialTableError, ThresholdAboveRangeError
from thinbingham.geometry import RoughProfile
from thinbingham.homogenization import (DarcyOptions, MacroForcing, MobilityTable, SquareGrid, build_mobility_table,
                                        darcy_residuals, default_radii, eval_mobility, limit_inequality_defect,
                                        linear_table, newtonian_permeability, reconstruct_limit, solve_cell,
                                        solve_darcy, yield_threshold)
from thinbingham.vi import SolverOptions

FLAT = RoughProfile.flat()
RES = (2, 2, 16)


def test_cell_zero_force():
    cs = solve_cell((0.0, 0.0), FLAT, 1.0, 0.2, RES)
    assert not cs.flows and cs.plug_fraction == 1.0


def test_flat_newtonian_permeability():
    K = newtonian_permeability(FLAT, resolution=RES)
    np.testing.assert_allclose(K, np.eye(2) / 12, rtol=0.01, atol=1e-12)


def test_half_height_permeability():
    K = newtonian_permeability(RoughProfile.flat(0.5), resolution=RES)
    assert K[0, 0] == pytest.approx(0.125 / 12, rel=0.01)


def test_rough_permeability_is_spd():
    K = newtonian_permeability(RoughProfile.sinusoidal(0.3), resolution=(4, 4, 4))
    assert np.abs(K - K.T).max() <= 1e-4 * np.abs(K).max()
    assert np.all(np.linalg.eigvalsh(0.5 * (K + K.T)) > 0)


def test_cell_vertical_flux_vanishes():
    cs = solve_cell((1.0, 0.5), RoughProfile.sinusoidal(0.3), 1.0, 0.05, (4, 4, 4))
    assert cs.vertical_flux_defect() <= 1e-10


def test_subyield_cell_is_exactly_rigid():
    cs = solve_cell((0.4, 0.0), FLAT, 1.0, 0.25, RES)
    assert np.all(cs.A_value == 0.0)


def plateau_bound(g, layers):
    """Force at which a plug profile with one-element ramps already flows.

    The profile has ``int |u'| = 2`` and ``int u = 1 - 1/layers`` on the unit
    layer, so the discrete threshold is at most ``2 g / (1 - 1/layers)``;
    the continuous value is ``2 g``.
    """
    return 2 * g / (1 - 1 / layers)


def test_yield_threshold_flat():
    assert yield_threshold(0.0, FLAT, 1.0, 0.0) == 0.0
    tau = yield_threshold(0.0, FLAT, 1.0, 0.25, 1e-3, (2, 2, 48))
    assert 0.5 - 1e-3 <= tau <= plateau_bound(0.25, 48) + 1e-3
    assert tau == pytest.approx(0.5, abs=0.02)


def test_yield_threshold_scales_with_g():
    a = yield_threshold(np.pi / 2, FLAT, 1.0, 0.1, 1e-4, (2, 2, 24))
    b = yield_threshold(np.pi / 2, FLAT, 1.0, 0.2, 2e-4, (2, 2, 24))
    assert b == pytest.approx(2 * a, abs=4e-4)


def test_yield_threshold_above_range():
    with pytest.raises(ThresholdAboveRangeError):
        yield_threshold(0.0, FLAT, 1.0, 0.25, 1e-3, RES, r_max=0.3)
    with pytest.raises(ParameterError):
        yield_threshold(0.0, FLAT, 1.0, -1.0)


def test_default_radii():
    r = default_radii(0.5, 4.0, 5)
    assert (r[0], r[-1]) == (pytest.approx(0.25), pytest.approx(4.0))
    np.testing.assert_allclose(r[1:] / r[:-1], 2.0)
    np.testing.assert_allclose(default_radii(0.0, 4.0, 3), [1.0, 2.0, 4.0])


@pytest.fixture(scope="module")
def bingham_table():
    return build_mobility_table(FLAT, 1.0, 0.25, radii=[0.3, 1.0, 2.0], n_angles=4, resolution=RES,
                                threshold_tol=1e-2)


def test_table_is_zero_below_threshold(bingham_table):
    assert np.all(bingham_table.values[0] == 0.0)
    assert np.all(bingham_table.thresholds >= 0.5 - 1e-2)
    assert np.all(bingham_table.thresholds <= plateau_bound(0.25, RES[2]) + 1e-2)
    assert np.all(bingham_table.values[1:, 0, 0] > 0)


def test_table_oddness_and_monotonicity(bingham_table):
    xs, As = bingham_table.symmetric_samples()
    for a in range(len(xs)):
        for b in range(len(xs)):
            assert (As[a] - As[b]) @ (xs[a] - xs[b]) >= -1e-8
    np.testing.assert_allclose(eval_mobility(bingham_table, -xs[1:]), -eval_mobility(bingham_table, xs[1:]),
                               atol=1e-12 * bingham_table.scale())


def test_table_csv_roundtrip(tmp_path, bingham_table):
    path = bingham_table.to_csv(tmp_path / "mobility.csv")
    text = path.read_text()
    assert text.startswith("# profile=")
    t = MobilityTable.from_csv(path)
    np.testing.assert_array_equal(t.values, bingham_table.values)
    np.testing.assert_array_equal(t.radii, bingham_table.radii)
    np.testing.assert_array_equal(t.thresholds, bingham_table.thresholds)
    assert (t.g, t.mu, t.resolution) == (bingham_table.g, bingham_table.mu, bingham_table.resolution)


def test_partial_table_reports_failed_samples():
    with pytest.raises(PartialTableError) as info:
        build_mobility_table(FLAT, 1.0, 0.1, radii=[1.0], n_angles=2, resolution=RES,
                             opts=SolverOptions(max_iter=2), threshold_tol=0.05)
    assert info.value.failed == [0, 1]


def test_table_scale_invariance():
    a = build_mobility_table(FLAT, 1.0, 0.2, radii=[1.0], n_angles=2, resolution=RES, threshold_tol=0.05)
    for t in (2.0, 10.0):
        b = build_mobility_table(FLAT, t, t * 0.2, radii=[t], n_angles=2, r_max=2.0 * t,
                                 resolution=RES, threshold_tol=0.05 * t)
        np.testing.assert_allclose(b.values, a.values, atol=1e-6 * np.abs(a.values).max())


def test_eval_mobility_nodes_and_extrapolation(bingham_table):
    xs, As = bingham_table.samples()
    np.testing.assert_array_equal(eval_mobility(bingham_table, xs), As)
    assert np.all(eval_mobility(bingham_table, np.zeros(2)) == 0.0)
    with pytest.raises(ExtrapolationError):
        eval_mobility(bingham_table, [2.5, 0.0])


@given(st.floats(-1.9, 1.9), st.floats(-1.9, 1.9), st.floats(0.1, 2.0), st.floats(-0.5, 0.5))
def test_linear_tables_are_reproduced_exactly(x1, x2, k, off):
    K = np.array([[k, off], [off, 1.0]])
    t = linear_table(K, radii=(1.0, 3.0), n_angles=6)
    np.testing.assert_allclose(eval_mobility(t, [x1, x2]), K @ [x1, x2], atol=1e-12)


# -- Darcy ---------------------------------------------------------------------


K_ROUGH = np.array([[1 / 12, 0.01], [0.01, 1 / 20]])


def test_square_grid():
    grid = SquareGrid(4)
    assert grid.npoints == 25 and len(grid.triangles) == 32
    assert grid.area.sum() == pytest.approx(1.0)
    assert grid.mean(np.ones(grid.npoints)) == pytest.approx(1.0)
    P = grid.identification(periodic=True)
    assert P.shape == (25, 16) and np.all(P.sum(axis=1) == 1)


def test_darcy_zero_forcing():
    d = solve_darcy(MacroForcing("constant", 0.0), linear_table(K_ROUGH), DarcyOptions(n=8))
    assert np.all(d.p == 0.0) and np.all(d.V == 0.0)


def test_darcy_conservative_forcing_is_balanced():
    table = linear_table(K_ROUGH, radii=(2.0, 8.0))
    f = MacroForcing("conservative")
    d = solve_darcy(f, table, DarcyOptions(n=16))
    KF = np.linalg.norm(f.on_triangles(d.grid) @ K_ROUGH.T)
    assert np.linalg.norm(d.V) <= 1e-6 * KF
    q = f.potential(d.grid.points)
    np.testing.assert_allclose(d.p, q - d.grid.mean(q), atol=1e-6)


def test_darcy_solenoidal_forcing_is_divergence_free():
    table = linear_table(np.eye(2) / 12, radii=(2.0, 8.0))
    d = solve_darcy(MacroForcing("solenoidal"), table, DarcyOptions(n=16))
    assert d.residuals["divergence"] <= 1e-6 and d.residuals["boundary_flux"] <= 1e-6
    # isotropic mobility: the solenoidal force needs no pressure
    assert np.abs(d.p).max() <= 1e-6


def test_darcy_periodic_constant_forcing():
    table = linear_table(K_ROUGH, radii=(2.0, 4.0))
    d = solve_darcy(MacroForcing("constant", 1.0, (1.0, 0.5)), table, DarcyOptions(n=8, periodic=True))
    # the solver regularises the mobility by delta * xi
    expected = (K_ROUGH + d.delta * np.eye(2)) @ [1.0, 0.5]
    np.testing.assert_allclose(d.V, np.tile(expected, (len(d.V), 1)), rtol=1e-10)
    div, flux, _ = darcy_residuals(d.grid, d.V, periodic=True)
    assert div <= 1e-10 and flux <= 1e-10


def test_darcy_wall_constant_forcing_blocks_flow():
    table = linear_table(K_ROUGH, radii=(2.0, 4.0))
    d = solve_darcy(MacroForcing("constant", 1.0, (1.0, 0.5)), table, DarcyOptions(n=8))
    assert np.abs(d.V).max() <= 1e-6 * np.abs(K_ROUGH @ [1.0, 0.5]).max()


def test_darcy_bingham_table(bingham_table):
    d = solve_darcy(MacroForcing("solenoidal", 0.5), bingham_table, DarcyOptions(n=8))
    assert d.residuals["divergence"] <= 1e-6 and d.residuals["boundary_flux"] <= 1e-6


def test_darcy_outputs(tmp_path):
    d = solve_darcy(MacroForcing("solenoidal"), linear_table(K_ROUGH, radii=(2.0, 8.0)), DarcyOptions(n=4))
    assert d.to_vtk(tmp_path / "d.vtk").read_text().startswith("# vtk DataFile")
    assert "divergence" in d.to_csv(tmp_path / "d.csv").read_text()


# -- limit reconstruction ------------------------------------------------------


def test_reconstruct_limit_newtonian_superposition():
    centres = np.array([[0.25, 0.25], [0.75, 0.5]])
    f = MacroForcing("constant", 1.0, (1.0, 0.5))
    lim = reconstruct_limit(f, None, FLAT, 1.0, 0.0, centres, RES)
    np.testing.assert_allclose(lim.V, np.tile([1 / 12, 0.5 / 12], (2, 1)), rtol=0.01)
    direct = solve_cell((1.0, 0.5), FLAT, 1.0, 0.0, RES)
    np.testing.assert_allclose(lim.chi_values[0], direct.chi.at_vertices(), atol=1e-12)


def test_reconstruct_limit_rigid_below_threshold():
    centres = np.array([[0.25, 0.25]])
    lim = reconstruct_limit(MacroForcing("constant", 0.3), None, FLAT, 1.0, 0.25, centres, RES)
    assert np.all(lim.chi_values == 0.0) and np.all(lim.V == 0.0)


@pytest.mark.parametrize("g", [0.0, 0.1, 0.25])
def test_limit_pair_satisfies_cell_inequality(g):
    centres = np.array([[0.25, 0.25], [0.75, 0.5]])
    f = MacroForcing("constant", 1.0, (1.0, 0.5))
    lim = reconstruct_limit(f, None, FLAT, 1.0, g, centres, RES)
    assert limit_inequality_defect(lim, FLAT, 1.0, g, RES) <= 1e-6


def test_cell_inequality_detects_non_minimiser():
    centres = np.array([[0.5, 0.5]])
    f = MacroForcing("constant", 1.0, (1.0, 0.0))
    lim = reconstruct_limit(f, None, FLAT, 1.0, 0.1, centres, RES)
    lim.chi_values *= 1.3
    lim.chi_bubble *= 1.3
    assert limit_inequality_defect(lim, FLAT, 1.0, 0.1, RES) > 1e-4


def test_forcing_kinds():
    x = np.array([[0.3, 0.6]])
    with pytest.raises(ParameterError):
        MacroForcing("swirl")(x)
    grid = ((0.0, 1.0), (0.0, 1.0), np.ones((2, 2, 2)))
    np.testing.assert_allclose(MacroForcing("tabulated", 2.0, grid=grid)(x), [[2.0, 2.0]])
    assert MacroForcing("constant", 1.0, (0.0, 0.0)).is_zero()
