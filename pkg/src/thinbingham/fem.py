"""Mini-element (P1 + bubble / P1) machinery on tetrahedral meshes.

Velocities are continuous piecewise-linear vectors enriched with one cubic
bubble ``b = l0 l1 l2 l3`` per tetrahedron and component; pressures are
continuous piecewise-linear. Because the element-average of the bubble
gradient vanishes, the bubble decouples from the P1 part in the viscous
form and is eliminated element by element (static condensation). What
remains is a symmetric saddle system for the P1 velocity and the pressure,
with the condensed bubble acting as a pressure stabilisation block ``C``.

Integrals of polynomial products on a tetrahedron use the exact formula
``int l^a = 3! a! |K| / (3 + |a|)!``; the non-smooth plastic term is
sampled at the symmetric 4-point degree-2 rule (``QP_BARY``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, FieldMismatchError, NonConvergenceError

_QA = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
_QB = (5.0 - np.sqrt(5.0)) / 20.0
QP_BARY = np.full((4, 4), _QB) + np.eye(4) * (_QA - _QB)
QP_WEIGHTS = np.full(4, 0.25)

# exact bubble integrals, as multiples of |K|
BUBBLE_INT = 1.0 / 840.0  # int b
BUBBLE_P1 = 1.0 / 3360.0  # int b l_i
BUBBLE_SQ = 1.0 / 415800.0  # int b^2
BUBBLE_GRAD_SQ = 1.0 / 15120.0  # int |grad b|^2 = |K| sum_i |grad l_i|^2 / 15120
BUBBLE_QP = _QA * _QB ** 3  # b at each quadrature point
BUBBLE_QP_GRAD = _QB ** 2 * (_QB - _QA)  # grad b at point q = c grad l_q

DIRECT_SIZE_LIMIT = 60_000


class ElementData:
    """Per-tetrahedron volumes and barycentric gradients."""

    def __init__(self, vertices, tets):
        self.vertices = np.asarray(vertices, dtype=float)
        self.tets = np.asarray(tets, dtype=np.int64)
        x = self.vertices[self.tets]
        E = x[:, 1:, :] - x[:, :1, :]
        det = np.linalg.det(E)
        if np.any(det <= 0.0):
            raise AssemblyError(f"{int(np.sum(det <= 0))} elements with non-positive Jacobian")
        self.vol = det / 6.0
        g = np.empty((len(self.tets), 4, 3))
        g[:, 1:, :] = np.linalg.inv(E).transpose(0, 2, 1)
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        self.grad = g

    @property
    def nt(self):
        return len(self.tets)

    def p1_gradient(self, vv):
        """Element gradients of a P1 field given at vertices, ``(nt, rank, 3)``."""
        vv = _as_2d(vv)
        return np.matmul(vv[self.tets].transpose(0, 2, 1), self.grad)

    def qp_gradient(self, vv, bubble=None):
        """Gradients at the quadrature points, ``(nt, 4, rank, 3)``."""
        g = self.p1_gradient(vv)[:, None, :, :]
        if bubble is None:
            return np.repeat(g, 4, axis=1)
        return g + BUBBLE_QP_GRAD * _as_2d(bubble)[:, None, :, None] * self.grad[:, :, None, :]

    def qp_values(self, vv, bubble=None):
        vv = _as_2d(vv)
        val = np.einsum("qi,kir->kqr", QP_BARY, vv[self.tets])
        if bubble is not None:
            val = val + BUBBLE_QP * _as_2d(bubble)[:, None, :]
        return val

    def integral(self, vv, bubble=None):
        """Per-element integral ``(nt, rank)``."""
        vv = _as_2d(vv)
        out = self.vol[:, None] * vv[self.tets].mean(axis=1)
        if bubble is not None:
            out = out + BUBBLE_INT * self.vol[:, None] * _as_2d(bubble)
        return out

    def weighted_integral(self, vv, bubble, weight_vv):
        """Per-element ``int u * w`` for P1 ``w`` given at vertices, exact."""
        vv = _as_2d(vv)
        u = vv[self.tets]
        w = np.asarray(weight_vv, dtype=float)[self.tets]
        # P1 mass: (1 + delta_ij)/20
        out = (u.sum(axis=1) * w.sum(axis=1)[:, None] + np.einsum("kir,ki->kr", u, w)) / 20.0
        if bubble is not None:
            out = out + BUBBLE_P1 * _as_2d(bubble) * w.sum(axis=1)[:, None]
        return self.vol[:, None] * out

    def l2_squared(self, vv, bubble=None):
        """Per-element ``int |u|^2``."""
        vv = _as_2d(vv)
        u = vv[self.tets]
        s = u.sum(axis=1)
        out = (np.sum(s * s, axis=1) + np.sum(u * u, axis=(1, 2))) / 20.0
        if bubble is not None:
            b = _as_2d(bubble)
            out = out + 2.0 * BUBBLE_P1 * np.sum(b * s, axis=1) + BUBBLE_SQ * np.sum(b * b, axis=1)
        return self.vol * out

    def grad_l2_squared(self, vv, bubble=None):
        """Per-element ``int |grad u|^2`` (the P1/bubble cross term vanishes)."""
        g = self.p1_gradient(vv)
        out = self.vol * np.sum(g * g, axis=(1, 2))
        if bubble is not None:
            b = _as_2d(bubble)
            out = out + self.bubble_stiffness() * np.sum(b * b, axis=1)
        return out

    def grad_abs_integral(self, vv, bubble=None):
        """Per-element degree-2 quadrature of ``|grad u|``."""
        g = self.qp_gradient(vv, bubble)
        return self.vol * np.einsum("q,kq->k", QP_WEIGHTS, np.sqrt(np.sum(g * g, axis=(2, 3))))

    def bubble_stiffness(self):
        return BUBBLE_GRAD_SQ * self.vol * np.sum(self.grad ** 2, axis=(1, 2))

    def bubble_qp_stiffness(self):
        """Quadrature of ``|grad b|^2``, the bubble part of the relaxed-gradient penalty."""
        return BUBBLE_QP_GRAD ** 2 * self.vol * np.einsum("q,kq->k", QP_WEIGHTS, np.sum(self.grad ** 2, axis=2))


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


@dataclass(eq=False)
class FunctionSpace:
    """P1(+bubble) dofs on a tetrahedral mesh with constraints.

    Vertices sharing a ``master`` are one periodic dof; ``dirichlet`` marks
    vertices where velocities vanish. ``mesh`` keeps the originating
    ``CellMesh``/``DomainMesh`` when there is one.
    """

    vertices: np.ndarray
    tets: np.ndarray
    master: np.ndarray
    dirichlet: np.ndarray
    mesh: object = None
    elements: ElementData = field(init=False, repr=False)

    def __post_init__(self):
        self.elements = ElementData(self.vertices, self.tets)
        uniq, inv = np.unique(self.master, return_inverse=True)
        self.dof_of_vertex = inv.astype(np.int64)
        self.ndof = len(uniq)
        dd = np.zeros(self.ndof, dtype=bool)
        dd[self.dof_of_vertex[self.dirichlet]] = True
        self.dirichlet_dofs = dd
        self.free_dofs = np.flatnonzero(~dd)
        self._periodic_pairs = None

    @property
    def nv(self):
        return len(self.vertices)

    @property
    def nt(self):
        return len(self.tets)

    def constraint_table(self):
        """``(dirichlet_vertices, periodic_pairs)``; pairs are ``(slave, master)``.

        A vertex is listed under at most one constraint: Dirichlet vertices
        are never reported as periodic slaves.
        """
        vid = np.arange(self.nv)
        slaves = np.flatnonzero((self.master != vid) & ~self.dirichlet)
        return np.flatnonzero(self.dirichlet), np.stack([slaves, self.master[slaves]], axis=1)

    def vertex_values(self, dof_values):
        return np.asarray(dof_values)[self.dof_of_vertex]

    def dof_values(self, vertex_values):
        """Restrict vertex data to dofs (takes the representative's value)."""
        out = np.zeros((self.ndof,) + np.shape(vertex_values)[1:])
        out[self.dof_of_vertex] = vertex_values
        return out

    def interpolate(self, func, rank=1):
        """P1 interpolant of ``func(points) -> (n, rank)`` as a Field (no bubble)."""
        vals = np.asarray(func(self.vertices), dtype=float).reshape(self.nv, -1)
        if vals.shape[1] != rank:
            raise FieldMismatchError(f"function returned rank {vals.shape[1]}, expected {rank}")
        return Field(self, self.dof_values(vals), None)

    def zero(self, rank=3, bubble=True):
        return Field(self, np.zeros((self.ndof, rank)), np.zeros((self.nt, rank)) if bubble else None)


def cell_space(cell_mesh):
    """Lateral-periodic space on ``Y*`` with no-slip top and bottom."""
    dirichlet = cell_mesh.bottom | cell_mesh.top
    return FunctionSpace(cell_mesh.vertices, cell_mesh.tets, cell_mesh.periodic_master, dirichlet, cell_mesh)


def domain_space(domain_mesh, bc="dirichlet"):
    """Space on the thin domain: ``dirichlet`` (no-slip everywhere) or
    ``periodic`` (lateral sides of the square identified, no-slip top/bottom)."""
    if bc == "dirichlet":
        master = np.arange(domain_mesh.nv)
        dirichlet = domain_mesh.bottom | domain_mesh.top | domain_mesh.lateral
    elif bc == "periodic":
        master = domain_mesh.periodic_master()
        dirichlet = domain_mesh.bottom | domain_mesh.top
    else:
        raise ValueError(f"unknown bc mode {bc!r}")
    return FunctionSpace(domain_mesh.vertices, domain_mesh.tets, master, dirichlet, domain_mesh)


@dataclass(eq=False)
class Field:
    """Coefficients of a P1(+bubble) field: ``values`` per dof, ``bubble`` per element."""

    space: FunctionSpace
    values: np.ndarray
    bubble: np.ndarray | None = None

    def __post_init__(self):
        self.values = _as_2d(self.values)
        if self.values.shape[0] != self.space.ndof:
            raise FieldMismatchError(
                f"field has {self.values.shape[0]} coefficients, space has {self.space.ndof} dofs"
            )
        if self.bubble is not None:
            self.bubble = _as_2d(self.bubble)
            if self.bubble.shape != (self.space.nt, self.rank):
                raise FieldMismatchError("bubble coefficients do not match elements x rank")

    @property
    def rank(self):
        return self.values.shape[1]

    def at_vertices(self):
        return self.space.vertex_values(self.values)

    def scaled(self, t):
        return Field(self.space, t * self.values, None if self.bubble is None else t * self.bubble)

    def __add__(self, other):
        if other.space is not self.space:
            raise FieldMismatchError("fields live on different spaces")
        b = None
        if self.bubble is not None or other.bubble is not None:
            b = (0 if self.bubble is None else self.bubble) + (0 if other.bubble is None else other.bubble)
        return Field(self.space, self.values + other.values, b)

    def __neg__(self):
        return self.scaled(-1.0)

    def l2_norm(self):
        return float(np.sqrt(self.space.elements.l2_squared(self.at_vertices(), self.bubble).sum()))

    def grad_l2_norm(self):
        return float(np.sqrt(self.space.elements.grad_l2_squared(self.at_vertices(), self.bubble).sum()))

    def integral(self):
        return self.space.elements.integral(self.at_vertices(), self.bubble).sum(axis=0)


@dataclass(eq=False)
class AssembledOperators:
    """Sparse P1 operators on merged (periodic) dofs plus condensed-bubble data.

    ``K``/``M`` are scalar stiffness and mass; the vector versions are
    ``kron(I3, K)`` in component-major layout ``c * ndof + dof``. ``B`` is
    the divergence coupling ``(B u)_j = int phi_j div u``. ``*_free``
    variants have the Dirichlet rows and columns eliminated.
    """

    space: FunctionSpace
    K: sp.csr_matrix
    M: sp.csr_matrix
    B: sp.csr_matrix
    pressure_mass: np.ndarray
    bubble_stiffness: np.ndarray
    bubble_qp_stiffness: np.ndarray

    @property
    def free_velocity(self):
        s = self.space
        return np.concatenate([c * s.ndof + s.free_dofs for c in range(3)])

    @property
    def K_free(self):
        f = self.space.free_dofs
        return self.K[f][:, f]

    @property
    def M_free(self):
        f = self.space.free_dofs
        return self.M[f][:, f]

    @property
    def B_free(self):
        return self.B[:, self.free_velocity]

    def load(self, f_vertices):
        """Load vectors ``(F_p1 (ndof, 3), F_bubble (nt, 3))`` of a P1-interpolated force."""
        s = self.space
        fv = _as_2d(f_vertices)
        el = s.elements
        local = fv[el.tets]
        Fl = el.vol[:, None, None] * (local.sum(axis=1)[:, None, :] + local) / 20.0
        F1 = np.zeros((s.ndof, fv.shape[1]))
        np.add.at(F1, s.dof_of_vertex[el.tets].ravel(), Fl.reshape(-1, fv.shape[1]))
        Fb = BUBBLE_P1 * el.vol[:, None] * local.sum(axis=1)
        return F1, Fb


def _scatter(space, local, weights=None):
    """Assemble ``sum_K w_K local_K[i, j]`` on merged dofs."""
    el = space.elements
    d = space.dof_of_vertex[el.tets]
    rows = np.repeat(d, 4, axis=1).ravel()
    cols = np.tile(d, (1, 4)).ravel()
    vals = local.reshape(len(d), 16) if weights is None else (weights[:, None] * local.reshape(len(d), 16))
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(space.ndof, space.ndof))


def weighted_stiffness(space, weights):
    """``sum_K w_K grad l_i . grad l_j`` assembled on dofs."""
    g = space.elements.grad
    return _scatter(space, np.einsum("kid,kjd->kij", g, g), weights)


def assemble(space: FunctionSpace) -> AssembledOperators:
    el = space.elements
    vol = el.vol
    K = weighted_stiffness(space, vol)
    mloc = (np.ones((4, 4)) + np.eye(4)) / 20.0
    M = _scatter(space, np.broadcast_to(mloc, (el.nt, 4, 4)), vol)
    d = space.dof_of_vertex[el.tets]
    rows = np.repeat(d, 4, axis=1).ravel()
    cols = np.tile(d, (1, 4)).ravel()
    blocks = []
    for c in range(3):
        # int phi_j d_c phi_i = |K|/4 d_c l_i
        v = np.repeat((vol[:, None] * el.grad[:, :, c] / 4.0)[:, None, :], 4, axis=1).ravel()
        blocks.append(sp.csr_matrix((v, (rows, cols)), shape=(space.ndof, space.ndof)))
    B = sp.hstack(blocks, format="csr")
    pm = np.asarray(M.sum(axis=1)).ravel()
    return AssembledOperators(space, K, M, B, pm, el.bubble_stiffness(), el.bubble_qp_stiffness())


class SaddleSolver:
    """Reusable solver for the condensed mini-element saddle system.

    Solves ``min 1/2 a_p1 |grad u1|^2 + 1/2 sum_K D_K |u_b|^2 - F.u`` subject
    to ``div u = 0`` (weakly, against P1 pressures), where the bubble weight
    is ``D_K = mu * int|grad b|^2 + r * quad(|grad b|^2)``. Pressure is
    returned with zero mean.
    """

    def __init__(self, ops: AssembledOperators, mu: float, r: float = 0.0, method="auto", tol=1e-9,
                 maxiter=2000):
        self.ops = ops
        self.mu = float(mu)
        self.r = float(r)
        self.tol = tol
        self.maxiter = maxiter
        s = ops.space
        el = s.elements
        self.D = self.mu * ops.bubble_stiffness + self.r * ops.bubble_qp_stiffness
        self.bint = BUBBLE_INT * el.vol
        self.C = weighted_stiffness(s, self.bint ** 2 / self.D)
        self.free = ops.free_velocity
        self.A1 = (self.mu + self.r) * ops.K_free
        self.Bf = ops.B_free
        nf = len(s.free_dofs)
        self.nu = 3 * nf
        self.np_ = s.ndof
        if method == "auto":
            method = "direct" if self.nu + self.np_ <= DIRECT_SIZE_LIMIT else "minres"
        self.method = method
        if method == "direct":
            self._setup_direct()
        elif method == "minres":
            self._setup_minres()
        else:
            raise ValueError(f"unknown linear solver {method!r}")

    def _setup_direct(self):
        A = sp.block_diag([self.A1] * 3, format="csr")
        # pin pressure dof 0 (constants are the only kernel); zero mean is restored after the solve
        keep = np.arange(1, self.np_)
        self._pkeep = keep
        self.system = sp.bmat([[A, -self.Bf[keep].T], [-self.Bf[keep], -self.C[keep][:, keep]]], format="csc")
        # quasi-definite after pinning: symmetric mode, diagonal pivots
        self.lu = spla.splu(self.system, permc_spec="COLAMD", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})

    def _setup_minres(self):
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(self.A1.tocsr(), symmetry="symmetric")
        self._amg = ml.aspreconditioner(cycle="V")
        lumped = self.ops.pressure_mass / (self.mu + self.r)
        self._sdiag = lumped + self.C.diagonal()
        n1 = self.A1.shape[0]
        self.system = sp.bmat([[sp.block_diag([self.A1] * 3), -self.Bf.T], [-self.Bf, -self.C]], format="csr")

        def prec(x):
            out = np.empty_like(x)
            for c in range(3):
                out[c * n1:(c + 1) * n1] = self._amg @ x[c * n1:(c + 1) * n1]
            out[self.nu:] = x[self.nu:] / self._sdiag
            return out

        self._prec = spla.LinearOperator(self.system.shape, prec)

    def solve(self, F1, Fb):
        """Return ``(u1 (ndof,3), u_b (nt,3), p (ndof,), info)``."""
        s = self.ops.space
        rhs_u = np.asarray(F1, dtype=float).T.ravel()[self.free]
        Db = np.asarray(Fb, dtype=float) / self.D[:, None]
        # (Bb D^-1 Fb)_j = sum_K -int b_K grad l_j . Db_K
        g = s.elements.grad
        loc = -self.bint[:, None] * np.einsum("kjd,kd->kj", g, Db)
        rhs_p = np.zeros(s.ndof)
        np.add.at(rhs_p, s.dof_of_vertex[s.elements.tets].ravel(), loc.ravel())
        info = {}
        if self.method == "direct":
            b = np.concatenate([rhs_u, rhs_p[self._pkeep]])
            sol = self.lu.solve(b)
            sol += self.lu.solve(b - self.system @ sol)
            x_u = sol[:self.nu]
            p = np.zeros(self.np_)
            p[self._pkeep] = sol[self.nu:]
        else:
            b = np.concatenate([rhs_u, rhs_p])
            x0 = getattr(self, "_x0", None)
            hist = []
            x, code = spla.minres(self.system, b, x0=x0, rtol=self.tol, maxiter=self.maxiter, M=self._prec,
                                  callback=lambda xk: hist.append(0))
            res = np.linalg.norm(self.system @ x - b) / max(np.linalg.norm(b), 1e-300)
            info.update(iterations=len(hist), residual=res)
            if code != 0 and res > 10 * self.tol:
                raise NonConvergenceError(f"MINRES stopped with code {code}, residual {res:.3e}",
                                          [{"iterations": len(hist), "residual": res}])
            self._x0 = x
            x_u, p = x[:self.nu], x[self.nu:]
        p = p - p @ self.ops.pressure_mass / self.ops.pressure_mass.sum()
        u1 = np.zeros(3 * s.ndof)
        u1[self.free] = x_u
        u1 = u1.reshape(3, s.ndof).T
        gp = s.elements.p1_gradient(s.vertex_values(p))[:, 0, :]
        ub = Db - (self.bint / self.D)[:, None] * gp
        return u1, ub, p, info

    def divergence_residual(self, u1, ub):
        """``|B u|`` relative to ``|B| |u|``-type scale, on merged pressure dofs."""
        s = self.ops.space
        d1 = self.ops.B @ u1.T.ravel()
        g = s.elements.grad
        loc = -self.bint[:, None] * np.einsum("kjd,kd->kj", g, ub)
        db = np.zeros(s.ndof)
        np.add.at(db, s.dof_of_vertex[s.elements.tets].ravel(), loc.ravel())
        scale = np.abs(self.ops.B) @ np.abs(u1.T.ravel())
        np.add.at(scale, s.dof_of_vertex[s.elements.tets].ravel(), np.abs(loc).ravel())
        return float(np.linalg.norm(d1 + db) / max(np.linalg.norm(scale), 1e-300))


def solve_saddle(ops: AssembledOperators, forcing: Field, mu: float = 1.0, method="auto", tol=1e-9):
    """Discrete Stokes solve ``-mu lap u + grad p = f, div u = 0``.

    ``mu`` is the effective viscosity (``mu eps^2`` for the full problem,
    ``mu`` for the cell problem). Returns velocity and zero-mean pressure.
    """
    solver = SaddleSolver(ops, mu, 0.0, method=method, tol=tol)
    F1, Fb = ops.load(forcing.at_vertices())
    if forcing.bubble is not None:
        el = ops.space.elements
        F1b = np.zeros_like(F1)
        np.add.at(F1b, ops.space.dof_of_vertex[el.tets].ravel(),
                  np.repeat(BUBBLE_P1 * el.vol[:, None, None] * forcing.bubble[:, None, :], 4, axis=1).reshape(-1, 3))
        F1 = F1 + F1b
        Fb = Fb + BUBBLE_SQ * el.vol[:, None] * forcing.bubble
    u1, ub, p, _ = solver.solve(F1, Fb)
    s = ops.space
    return Field(s, u1, ub), Field(s, p[:, None], None)


def scaled_norms(field: Field, epsilon: float) -> dict:
    """Thin-domain norms ``eps^-1/2 ||u||_L2`` and ``eps^-1/2 ||grad u||_L2``."""
    scale = float(epsilon) ** -0.5
    l2 = field.l2_norm()
    h1 = field.grad_l2_norm()
    return {"L2": scale * l2, "H1_semi": scale * h1, "H1": scale * float(np.hypot(l2, h1))}
