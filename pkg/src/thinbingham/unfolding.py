"""Discrete periodic unfolding on block-compatible meshes.

A domain mesh is a tiling of ``eps``-scaled copies of one cell mesh, so
unfolding a finite element field is an exact reindexing of its
coefficients: cell ``c = i * n2 + j`` receives the values at
``block_vertices[c]`` and the bubbles of tetrahedra ``c * nt + k``. No
interpolation takes place and every identity of the operator holds to
rounding error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FieldMismatchError
from .fem import ElementData, Field, FunctionSpace
from .geometry import CellMesh, DomainMesh
from .io import write_csv, write_vtk


@dataclass(frozen=True)
class CellIndexing:
    """Integer/fractional decomposition ``x = eps ([x/eps]_L L + {x/eps}_L)``."""

    epsilon: float
    L1: float
    L2: float
    n1: int
    n2: int

    @classmethod
    def of(cls, mesh: DomainMesh):
        p = mesh.spec.profile
        return cls(mesh.epsilon, p.L1, p.L2, mesh.spec.n1, mesh.spec.n2)

    @property
    def residual_cells(self):
        """Cells cut by the boundary of the square; always empty since the cell counts are integers."""
        return np.zeros((0, 2), dtype=np.int64)

    def integer_part(self, x):
        """``[x/eps]_L`` as ``(n, 2)`` integers, clipped into the grid for points on the far sides."""
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, :2]
        k = np.floor(x / (self.epsilon * np.array([self.L1, self.L2])) + 1e-12).astype(np.int64)
        return np.clip(k, 0, [self.n1 - 1, self.n2 - 1])

    def fractional_part(self, x):
        """``{x/eps}_L`` in ``[0, L1] x [0, L2]``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, :2]
        L = np.array([self.L1, self.L2])
        return x / self.epsilon - self.integer_part(x) * L

    def recompose(self, k, y):
        L = np.array([self.L1, self.L2])
        return self.epsilon * (np.asarray(k) * L + np.asarray(y))

    def cell_index(self, x):
        k = self.integer_part(x)
        return k[:, 0] * self.n2 + k[:, 1]

    def cell_centres(self):
        i, j = np.meshgrid(np.arange(self.n1), np.arange(self.n2), indexing="ij")
        return np.column_stack([(i.ravel() + 0.5) * self.epsilon * self.L1,
                                (j.ravel() + 0.5) * self.epsilon * self.L2])


@dataclass(eq=False)
class UnfoldedField:
    """Per-cell coefficients of an unfolded field on the cell mesh.

    ``values`` has shape ``(n1 * n2, nv_cell, rank)``; ``bubble`` (optional)
    ``(n1 * n2, nt_cell, rank)``. Cells are ordered ``c = i * n2 + j``.
    """

    cell_mesh: CellMesh
    indexing: CellIndexing
    values: np.ndarray
    bubble: np.ndarray | None = None

    def __post_init__(self):
        nc = self.indexing.n1 * self.indexing.n2
        if self.values.shape[:2] != (nc, self.cell_mesh.nv):
            raise FieldMismatchError(f"unfolded values have shape {self.values.shape}, expected ({nc}, "
                                     f"{self.cell_mesh.nv}, rank)")
        if self.bubble is not None and self.bubble.shape[:2] != (nc, self.cell_mesh.nt):
            raise FieldMismatchError("unfolded bubble shape does not match the cell mesh")

    @property
    def rank(self):
        return self.values.shape[2]

    @property
    def ncells(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape

    def _elements(self):
        return _cell_elements(self.cell_mesh)

    def __add__(self, other):
        return self.combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self.combine(other, 1.0, -1.0)

    def scaled(self, t):
        return UnfoldedField(self.cell_mesh, self.indexing, t * self.values,
                             None if self.bubble is None else t * self.bubble)

    def combine(self, other, a, b):
        if other.values.shape != self.values.shape:
            raise FieldMismatchError("unfolded fields live on different grids")
        if self.bubble is None and other.bubble is None:
            bub = None
        else:
            zb = np.zeros(self.values.shape[:1] + (self.cell_mesh.nt, self.rank))
            bub = a * (zb if self.bubble is None else self.bubble) + b * (zb if other.bubble is None else other.bubble)
        return UnfoldedField(self.cell_mesh, self.indexing, a * self.values + b * other.values, bub)

    def multiply(self, other):
        """Pointwise product of two P1 unfolded fields (vertex values); bubbles are dropped."""
        return UnfoldedField(self.cell_mesh, self.indexing, self.values * other.values, None)

    def cell_integrals(self):
        """``int_{Y*} T(u)(c, y) dy`` per cell, shape ``(ncells, rank)``."""
        el = self._elements()
        out = np.empty((self.ncells, self.rank))
        for c in range(self.ncells):
            out[c] = el.integral(self.values[c], None if self.bubble is None else self.bubble[c]).sum(axis=0)
        return out

    def cell_moments(self, weight_vertices):
        """``int_{Y*} T(u) w dy`` per cell for a P1 weight ``w`` on the cell mesh (exact)."""
        el = self._elements()
        out = np.empty((self.ncells, self.rank))
        for c in range(self.ncells):
            out[c] = el.weighted_integral(self.values[c], None if self.bubble is None else self.bubble[c],
                                          weight_vertices).sum(axis=0)
        return out

    def cell_sq_integrals(self):
        """``int_{Y*} |T(u)|^2 dy`` per cell."""
        el = self._elements()
        return np.array([el.l2_squared(self.values[c], None if self.bubble is None else self.bubble[c]).sum()
                         for c in range(self.ncells)])

    def omega_measure(self):
        """Area of one macroscopic cell ``eps^2 L1 L2``."""
        ix = self.indexing
        return ix.epsilon ** 2 * ix.L1 * ix.L2

    def integral(self):
        """``int_{omega x Y*} T(u)`` (piecewise constant in ``x``)."""
        return self.omega_measure() * self.cell_integrals().sum(axis=0)

    def l2_norm(self):
        """``||T(u)||_{L2(omega x Y*)}``."""
        return float(np.sqrt(self.omega_measure() * self.cell_sq_integrals().sum()))

    def to_csv(self, path):
        """Rows ``i,j,dof,value``; ``dof = vertex * rank + component`` on the cell mesh."""
        n2 = self.indexing.n2
        nv, rank = self.values.shape[1:]
        dof = np.arange(nv * rank)

        def rows():
            for c in range(self.ncells):
                i, j = divmod(c, n2)
                flat = self.values[c].ravel()
                for d in dof:
                    yield (i, j, int(d), float(flat[d]))

        return write_csv(path, ["i", "j", "dof", "value"], rows())


def _cell_elements(cell_mesh):
    el = getattr(cell_mesh, "_elements", None)
    if el is None:
        el = ElementData(cell_mesh.vertices, cell_mesh.tets)
        cell_mesh._elements = el
    return el


def _domain_mesh(field: Field) -> DomainMesh:
    mesh = field.space.mesh
    if not isinstance(mesh, DomainMesh):
        raise FieldMismatchError("unfolding needs a field on a DomainMesh")
    return mesh


def unfold(field: Field) -> UnfoldedField:
    """Unfold a P1(+bubble) field on the thin domain by exact reindexing."""
    mesh = _domain_mesh(field)
    cm = mesh.cell_mesh
    vals = field.at_vertices()[mesh.block_vertices]
    bub = None
    if field.bubble is not None:
        bub = field.bubble.reshape(mesh.ncells, cm.nt, field.rank)
    return UnfoldedField(cm, CellIndexing.of(mesh), vals, bub)


def unfold_vertex_values(mesh: DomainMesh, vertex_values) -> UnfoldedField:
    """Unfold raw per-vertex data (e.g. an interpolated function)."""
    v = np.asarray(vertex_values, dtype=float)
    v = v[:, None] if v.ndim == 1 else v
    return UnfoldedField(mesh.cell_mesh, CellIndexing.of(mesh), v[mesh.block_vertices], None)


@dataclass(eq=False)
class UnfoldedGradient:
    """Unfolded physical gradient ``T(grad u)`` at the quadrature points.

    ``values`` has shape ``(ncells, nt_cell, 4, rank, 3)``.
    """

    indexing: CellIndexing
    values: np.ndarray

    def norms(self):
        return np.sqrt(np.sum(self.values ** 2, axis=(-2, -1)))


def unfold_gradient(field: Field) -> UnfoldedGradient:
    mesh = _domain_mesh(field)
    g = field.space.elements.qp_gradient(field.at_vertices(), field.bubble)
    return UnfoldedGradient(CellIndexing.of(mesh), g.reshape((mesh.ncells, mesh.cell_mesh.nt) + g.shape[1:]))


def reference_gradient(uf: UnfoldedField) -> np.ndarray:
    """``grad_y T(u)`` at the quadrature points of the cell mesh, per cell."""
    el = uf._elements()
    return np.stack([el.qp_gradient(uf.values[c], None if uf.bubble is None else uf.bubble[c])
                     for c in range(uf.ncells)])


def unfold_all(sol):
    """Unfold a full-problem solution: ``(T(u), T(p), T(grad u))``.

    The pressure is returned with zero mean over ``omega x Y*``.
    """
    u = unfold(sol.u)
    p = unfold(sol.p)
    mean = p.integral() / (p.omega_measure() * p.ncells * float(_cell_elements(p.cell_mesh).vol.sum()))
    p = UnfoldedField(p.cell_mesh, p.indexing, p.values - mean, None)
    return u, p, unfold_gradient(sol.u)


def rescale_vertical(field: Field) -> Field:
    """``U(x, y3) = u(x, eps y3)`` on the stretched domain ``0 < y3 < G(x/eps)``.

    Same dofs and bubbles; only the vertices move.
    """
    mesh = _domain_mesh(field)
    s = field.space
    v = s.vertices.copy()
    v[:, 2] /= mesh.epsilon
    # dof_of_vertex as the master array reproduces the dof numbering exactly
    master = s.dof_of_vertex
    dirichlet = s.dirichlet_dofs[s.dof_of_vertex]
    space = FunctionSpace(v, s.tets, master, dirichlet, None)
    return Field(space, field.values.copy(), None if field.bubble is None else field.bubble.copy())


def cell_average(uf: UnfoldedField) -> Field:
    """Mean over the macroscopic cells, as a field on the (unidentified) cell mesh."""
    cm = uf.cell_mesh
    vid = np.arange(cm.nv)
    space = FunctionSpace(cm.vertices, cm.tets, vid, np.zeros(cm.nv, dtype=bool), cm)
    bub = None if uf.bubble is None else uf.bubble.mean(axis=0)
    return Field(space, uf.values.mean(axis=0), bub)


def vertical_integrals(uf: UnfoldedField) -> np.ndarray:
    """Per-cell ``(1/(L1 L2)) int_{Y*} T(u) dy``, i.e. the cell flux of each component."""
    ix = uf.indexing
    return uf.cell_integrals() / (ix.L1 * ix.L2)


def y_average(uf: UnfoldedField) -> np.ndarray:
    """Per-cell mean over ``Y*`` (the projection used for pressure comparisons)."""
    vol = float(_cell_elements(uf.cell_mesh).vol.sum())
    return uf.cell_integrals() / vol


def y_variance(up: UnfoldedField) -> float:
    """Mean over cells of the variance in ``y`` of a scalar unfolded field."""
    vol = float(_cell_elements(up.cell_mesh).vol.sum())
    means = y_average(up)
    centred = UnfoldedField(up.cell_mesh, up.indexing, up.values - means[:, None, :],
                            None if up.bubble is None else up.bubble)
    return float(np.mean(centred.cell_sq_integrals() / vol))


def export_cell_average_vtk(uf: UnfoldedField, path, name="u"):
    """VTK of the cell-averaged field on ``Y*``."""
    avg = uf.values.mean(axis=0)
    return write_vtk(path, uf.cell_mesh.vertices, uf.cell_mesh.tets, point_data={name: avg})
