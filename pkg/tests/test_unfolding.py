"""Discrete unfolding: exact identities on block-compatible meshes."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thinbingham.errors import FieldMismatchError
from thinbingham.fem import FunctionSpace, cell_space, scaled_norms
from thinbingham.geometry import RoughProfile, ThinDomainSpec, build_cell_mesh, build_domain_mesh, eval_profile
from thinbingham.io import read_csv
from thinbingham.unfolding import (CellIndexing, UnfoldedField, cell_average, reference_gradient, rescale_vertical,
                                   unfold, unfold_all, unfold_gradient, unfold_vertex_values, vertical_integrals,
                                   y_average, y_variance)
from thinbingham.vi import BinghamProblem, FluidParams, solve_bingham


def _mesh(profile, eps, res=(3, 3, 3)):
    return build_domain_mesh(ThinDomainSpec(eps, profile), build_cell_mesh(profile, res))


def _open_space(mesh):
    return FunctionSpace(mesh.vertices, mesh.tets, np.arange(mesh.nv), np.zeros(mesh.nv, dtype=bool), mesh)


@pytest.fixture(scope="module", params=["flat", "wavy"])
def mesh(request):
    p = RoughProfile.flat() if request.param == "flat" else RoughProfile.sinusoidal(0.3)
    return _mesh(p, 0.5)


@pytest.fixture(scope="module")
def solved(mesh):
    problem = BinghamProblem.full(mesh, FluidParams(1.0, 0.05), lambda x: np.column_stack(
        [np.cos(np.pi * x[:, 1]), np.sin(np.pi * x[:, 0])]), bc="periodic")
    return solve_bingham(problem)


def test_constant_unfolds_to_constant(mesh):
    s = _open_space(mesh)
    uf = unfold(s.interpolate(lambda v: np.full((len(v), 1), 3.5)))
    assert np.all(uf.values == 3.5)


def test_coordinate_unfolding_at_half():
    p = RoughProfile.flat()
    mesh = _mesh(p, 0.5)
    uf = unfold(_open_space(mesh).interpolate(lambda v: v[:, :1]))
    y1 = mesh.cell_mesh.vertices[:, 0]
    for c, (i, j) in enumerate(mesh.cell_ij):
        np.testing.assert_allclose(uf.values[c, :, 0], i / 2 + y1 / 2, atol=1e-15)


def test_vertical_coordinate_unfolds_to_scaled_y3(mesh):
    uf = unfold(_open_space(mesh).interpolate(lambda v: v[:, 2:3]))
    y3 = mesh.cell_mesh.vertices[:, 2]
    np.testing.assert_allclose(uf.values[:, :, 0], np.tile(mesh.epsilon * y3, (mesh.ncells, 1)), atol=1e-15)


def test_integral_identity(mesh, solved):
    u = solved.u
    uf = unfold(u)
    p = mesh.spec.profile
    lhs = uf.integral() / (p.L1 * p.L2)
    rhs = u.integral() / mesh.epsilon
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()


def test_unit_integral_identity(mesh):
    one = unfold(_open_space(mesh).interpolate(lambda v: np.ones((len(v), 1))))
    vol = mesh.volumes().sum()
    assert one.integral()[0] == pytest.approx(vol / mesh.epsilon, rel=1e-13)


def test_norm_identity(mesh, solved):
    uf = unfold(solved.u)
    p = mesh.spec.profile
    rhs = np.sqrt(p.L1 * p.L2) * scaled_norms(solved.u, mesh.epsilon)["L2"]
    assert uf.l2_norm() == pytest.approx(rhs, rel=1e-12)


def test_derivative_identity(mesh, solved):
    G = unfold_gradient(solved.u)
    R = reference_gradient(unfold(solved.u))
    assert np.abs(mesh.epsilon * G.values - R).max() <= 1e-12 * np.abs(R).max()


def test_nonlinear_identity(mesh, solved):
    G = unfold_gradient(solved.u)
    R = reference_gradient(unfold(solved.u))
    Rn = np.sqrt(np.sum(R ** 2, axis=(-2, -1)))
    assert np.abs(mesh.epsilon * G.norms() - Rn).max() <= 1e-12 * Rn.max()


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(a, b):
    mesh = _mesh(RoughProfile.sinusoidal(0.2), 0.5, (2, 2, 2))
    s = _open_space(mesh)
    f = s.interpolate(lambda v: np.sin(v[:, :1] * 3) + v[:, 2:3])
    g = s.interpolate(lambda v: v[:, 1:2] ** 2)
    lhs = unfold(f.scaled(a) + g.scaled(b))
    rhs = unfold(f).combine(unfold(g), a, b)
    assert np.abs(lhs.values - rhs.values).max() <= 1e-14 * (1 + abs(a) + abs(b)) * 4


def test_product_rule_on_vertex_values(mesh):
    s = _open_space(mesh)
    f = s.interpolate(lambda v: v[:, :1] + 1)
    g = s.interpolate(lambda v: v[:, 2:3] - v[:, 1:2])
    prod = unfold_vertex_values(mesh, f.at_vertices() * g.at_vertices())
    np.testing.assert_array_equal(unfold(f).multiply(unfold(g)).values, prod.values)


def test_oscillating_function_unfolds_to_profile():
    p = RoughProfile.sinusoidal(0.3)
    mesh = _mesh(p, 0.25)
    G = unfold_vertex_values(mesh, eval_profile(p, mesh.vertices[:, :2] / 0.25))
    ref = eval_profile(p, mesh.cell_mesh.vertices[:, :2])
    np.testing.assert_allclose(G.values[:, :, 0], np.tile(ref, (mesh.ncells, 1)), atol=1e-14)


def test_rescale_vertical(mesh, solved):
    U = rescale_vertical(solved.u)
    np.testing.assert_allclose(U.space.vertices[:, 2], mesh.vertices[:, 2] / mesh.epsilon)
    # ||U||^2 over the stretched domain equals ||u||^2 / eps
    assert U.l2_norm() ** 2 == pytest.approx(solved.u.l2_norm() ** 2 / mesh.epsilon, rel=1e-12)
    x3 = rescale_vertical(_open_space(mesh).interpolate(lambda v: v[:, 2:3]))
    np.testing.assert_allclose(x3.values[:, 0], mesh.vertices[:, 2], atol=1e-15)


def test_cell_average_of_x1():
    mesh = _mesh(RoughProfile.flat(), 0.5)
    avg = cell_average(unfold(_open_space(mesh).interpolate(lambda v: v[:, :1])))
    y1 = mesh.cell_mesh.vertices[:, 0]
    np.testing.assert_allclose(avg.values[:, 0], 0.25 + y1 / 2, atol=1e-15)


def test_vertical_integrals_of_constant_field():
    mesh = _mesh(RoughProfile.sinusoidal(0.3), 0.5)
    uf = unfold(_open_space(mesh).interpolate(lambda v: np.tile([1.0, 2.0, 0.0], (len(v), 1)), rank=3))
    vol = mesh.cell_mesh.volumes().sum()
    np.testing.assert_allclose(vertical_integrals(uf), np.tile([vol, 2 * vol, 0.0], (4, 1)), rtol=1e-13)


def test_y_variance():
    mesh = _mesh(RoughProfile.flat(), 0.5, (2, 2, 8))
    s = _open_space(mesh)
    assert y_variance(unfold(s.interpolate(lambda v: np.full((len(v), 1), 2.0)))) == pytest.approx(0, abs=1e-28)
    # T(x3) = eps y3 on a unit flat cell: variance eps^2 / 12 for the P1 field, exactly
    var = y_variance(unfold(s.interpolate(lambda v: v[:, 2:3])))
    assert var == pytest.approx(0.25 / 12, rel=1e-12)
    np.testing.assert_allclose(y_average(unfold(s.interpolate(lambda v: v[:, 2:3])))[:, 0], 0.25, rtol=1e-13)


def test_unfold_all_pressure_has_zero_mean(solved):
    u, p, G = unfold_all(solved)
    assert abs(p.integral()[0]) <= 1e-12 * max(np.abs(p.values).max(), 1e-300)
    assert G.values.shape[:2] == (u.ncells, u.cell_mesh.nt)


@given(st.floats(0, 1), st.floats(0, 1))
def test_indexing_decomposition(x1, x2):
    ix = CellIndexing(0.25, 1.0, 1.0, 4, 4)
    x = np.array([[x1, x2]])
    k, y = ix.integer_part(x), ix.fractional_part(x)
    assert np.all((k >= 0) & (k <= 3))
    assert np.all((y >= -1e-12) & (y <= 1 + 1e-12))
    np.testing.assert_allclose(ix.recompose(k, y), x, atol=1e-15)


def test_field_on_cell_mesh_is_rejected(flat_cell):
    with pytest.raises(FieldMismatchError):
        unfold(cell_space(flat_cell).zero())


def test_unfolded_shape_mismatch(mesh):
    ix = CellIndexing.of(mesh)
    with pytest.raises(FieldMismatchError):
        UnfoldedField(mesh.cell_mesh, ix, np.zeros((1, 3, 1)))


def test_unfolded_csv(tmp_path, solved):
    uf = unfold(solved.u)
    _, header, rows = read_csv(uf.to_csv(tmp_path / "u.csv"))
    assert header == ["i", "j", "dof", "value"]
    assert len(rows) == uf.values.size
    assert float(rows[5][3]) == pytest.approx(uf.values[0].ravel()[5])
