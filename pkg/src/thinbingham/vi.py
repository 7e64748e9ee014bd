"""Bingham variational inequality solver (augmented Lagrangian, ALG2).

The discrete problem minimises

    J(u) = mu/2 int |grad u|^2 + g int |grad u| - int f.u

over mini-element velocities that are weakly divergence free. The plastic
term uses the full velocity gradient (not its symmetric part) sampled at the
degree-2 quadrature points. The relaxed gradient ``q`` and its multiplier
``lam`` live at those points.

In full-problem mode the coefficients are ``mu eps^2`` and ``g eps``; in cell
mode ``mu`` and ``g`` are used as given.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NonConvergenceError, ParameterError
from .fem import (QP_WEIGHTS, BUBBLE_QP_GRAD, Field, FunctionSpace, SaddleSolver, assemble,
                  cell_space, domain_space, scaled_norms)

log = logging.getLogger(__name__)

# relative machine floor of the energy-equality defect (rounding of the saddle solves)
ENERGY_FLOOR = 1e-10
# relative margin by which the work must exceed the plastic dissipation to certify flow
FLOW_MARGIN = 1e-8


@dataclass(frozen=True)
class FluidParams:
    """Viscosity ``mu`` and yield coefficient ``g``.

    With ``epsilon`` set, the full thin-domain scaling applies
    (``mu eps^2``, ``g eps``); with ``epsilon=None`` the cell problem uses
    ``mu`` and ``g`` directly.
    """

    mu: float = 1.0
    g: float = 0.0
    epsilon: float | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ParameterError(f"viscosity must be positive, got {self.mu}")
        if not self.g >= 0:
            raise ParameterError(f"yield coefficient must be non-negative, got {self.g}")

    @property
    def mu_eff(self) -> float:
        return self.mu if self.epsilon is None else self.mu * self.epsilon ** 2

    @property
    def g_eff(self) -> float:
        return self.g if self.epsilon is None else self.g * self.epsilon

    def scaled(self, t):
        return FluidParams(t * self.mu, t * self.g, self.epsilon)


@dataclass(frozen=True)
class SolverOptions:
    r: float | None = None  # augmentation; defaults to mu_eff
    tol: float = 1e-7
    max_iter: int = 5000
    linear: str = "auto"
    linear_tol: float = 1e-12
    record_energy: bool = True
    # restarted Nesterov extrapolation of (q, lam); much faster near the yield limit,
    # but the energy of the iterates is then no longer monotone
    accelerate: bool = False
    restart_eta: float = 0.999
    # probe mode: return at the first iterate that certifies a nonzero minimiser
    stop_at_flow: bool = False


@dataclass(eq=False)
class BinghamProblem:
    space: FunctionSpace
    params: FluidParams
    force: object  # callable (n,3)->(n,3) or a constant 3-vector
    bc: str = "dirichlet"

    def force_at_vertices(self):
        f = self.force
        if callable(f):
            vals = np.asarray(f(self.space.vertices), dtype=float)
        else:
            vals = np.broadcast_to(np.asarray(f, dtype=float), (self.space.nv, 3))
        if vals.shape != (self.space.nv, 3):
            raise ParameterError(f"force must be 3-vector valued, got shape {vals.shape}")
        return np.array(vals)

    @classmethod
    def full(cls, domain_mesh, params: FluidParams, fhat, bc="dirichlet"):
        """Thin-domain problem with force ``(fhat(x1, x2), 0)``.

        ``fhat`` maps ``(n, 2)`` points to ``(n, 2)`` values, or is a
        constant 2-vector.
        """
        if params.epsilon is None:
            params = FluidParams(params.mu, params.g, domain_mesh.epsilon)
        return cls(_cached_domain_space(domain_mesh, bc), params, thin_force(fhat), bc)

    @classmethod
    def cell(cls, cell_mesh, mu, g, xi):
        """Cell problem on ``Y*`` with constant force ``(xi, 0)``."""
        xi = np.asarray(xi, dtype=float)
        return cls(_cached_cell_space(cell_mesh), FluidParams(mu, g, None), np.array([xi[0], xi[1], 0.0]),
                   "periodic")


def thin_force(fhat):
    """Lift a horizontal force ``fhat(x_hat)`` to ``(fhat, 0)`` on 3D points."""
    if callable(fhat):
        def f(x):
            v = np.asarray(fhat(x[:, :2]), dtype=float)
            return np.column_stack([v, np.zeros(len(x))])
        return f
    v = np.asarray(fhat, dtype=float)
    return np.array([v[0], v[1], 0.0])


def _cached_cell_space(cell_mesh):
    sp_ = getattr(cell_mesh, "_space", None)
    if sp_ is None:
        sp_ = cell_space(cell_mesh)
        cell_mesh._space = sp_
    return sp_


def _cached_domain_space(domain_mesh, bc):
    cache = domain_mesh.__dict__.setdefault("_spaces", {})
    if bc not in cache:
        cache[bc] = domain_space(domain_mesh, bc)
    return cache[bc]


def operators(space):
    ops = getattr(space, "_ops", None)
    if ops is None:
        ops = assemble(space)
        space._ops = ops
    return ops


def saddle_solver(space, mu_eff, r, method="auto", tol=1e-12):
    """Factorisations are cached per space; the mobility table reuses one."""
    cache = space.__dict__.setdefault("_solvers", {})
    key = (float(mu_eff), float(r), method)
    if key not in cache:
        if len(cache) > 4:
            cache.clear()
        cache[key] = SaddleSolver(operators(space), mu_eff, r, method=method, tol=tol)
    return cache[key]


@dataclass(eq=False)
class VISolution:
    u: Field
    p: Field
    q: np.ndarray  # (nt, 4, 3, 3) relaxed gradient at quadrature points
    lam: np.ndarray  # multiplier conjugate to q
    residuals: dict
    iterations: int
    history: list = field(default_factory=list)
    params: FluidParams | None = None
    r: float | None = None

    @property
    def converged(self):
        return self.residuals.get("converged", True)


@dataclass(eq=False)
class DiagnosticFields:
    D: np.ndarray  # (nt, 3, 3) symmetrised gradient per element
    DII: np.ndarray  # (nt,)
    plug: np.ndarray  # (nt,) in {0, 1}
    tol: float

    @property
    def plug_fraction(self):
        return float(self.plug.mean())

    def plug_volume_fraction(self, vol):
        return float(np.sum(vol * self.plug) / np.sum(vol))


def _qp_weights(space):
    return space.elements.vol[:, None] * QP_WEIGHTS[None, :]


def _sq(a):
    """Squared Frobenius norm per quadrature point of a ``(nt, 4, 3, 3)`` field."""
    d = a.reshape(-1, 9)
    return np.einsum("ij,ij->i", d, d).reshape(a.shape[:-2])


def _wnorm(w, a):
    return float(np.sqrt(np.dot(w.ravel(), _sq(a).ravel())))


def _scatter_matrix(space):
    """Sparse sum of element-vertex contributions onto dofs, cached on the space."""
    S = getattr(space, "_vertex_scatter", None)
    if S is None:
        idx = space.dof_of_vertex[space.elements.tets].ravel()
        S = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(space.ndof, len(idx)))
        space._vertex_scatter = S
    return S


def _augmented_load(space, T):
    """Loads of ``int T : grad v`` for a quadrature-point tensor field ``T``."""
    el = space.elements
    S = (el.vol / 4.0)[:, None, None] * T.sum(axis=1)  # (nt, 3, 3)
    loc = np.matmul(el.grad, S.transpose(0, 2, 1))  # (nt, 4, 3)
    F1 = _scatter_matrix(space) @ loc.reshape(-1, 3)
    Fb = (el.vol / 4.0 * BUBBLE_QP_GRAD)[:, None] * np.einsum("kqij,kqj->ki", T, el.grad)
    return F1, Fb


def shrink(w, threshold):
    """Closed-form minimiser of ``threshold |q| + 1/2 |q - w|^2`` per point (Frobenius norm)."""
    nrm = np.sqrt(np.sum(w * w, axis=(-2, -1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(nrm > threshold, 1.0 - threshold / np.where(nrm > 0, nrm, 1.0), 0.0)
    return factor[..., None, None] * w


def _shrink_qp(w, threshold):
    """``shrink`` for ``(nt, 4, 3, 3)`` fields, sharing the per-point norms."""
    nrm = np.sqrt(_sq(w))
    factor = np.zeros_like(nrm)
    mask = nrm > threshold
    factor[mask] = 1.0 - threshold / nrm[mask]
    return factor[..., None, None] * w


def certifies_flow(plastic, work) -> bool:
    """Whether an admissible field with dissipation ``plastic`` and work ``work`` proves flow.

    ``J(t v) = t^2 mu/2 |grad v|^2 + t (g int|grad v| - int f.v)`` is negative
    for small ``t > 0`` when the bracket is, so the minimiser is nonzero.
    """
    return work > 0 and plastic < (1.0 - FLOW_MARGIN) * work


def solve_bingham(problem: BinghamProblem, opts: SolverOptions | None = None, init=None) -> VISolution:
    """Augmented-Lagrangian solve of the Bingham inequality.

    Each outer step solves the saddle problem with viscosity ``mu + r``,
    shrinks ``w = grad u + lam / r`` onto the relaxed gradient ``q`` and
    updates ``lam += r (grad u - q)``. Stops when the relative gap
    ``|grad u - q|``, the relative change of ``q`` and the divergence
    residual are all below ``opts.tol``.

    Every iterate is admissible, so ``residuals["flow_certified"]`` records
    whether some iterate satisfied ``certifies_flow``. With
    ``opts.stop_at_flow`` the solve returns at that iterate with
    ``residuals["converged"] = False``.
    """
    opts = opts or SolverOptions()
    space = problem.space
    mu, g = problem.params.mu_eff, problem.params.g_eff
    r = mu if opts.r is None else float(opts.r)
    if not r > 0:
        raise ParameterError(f"augmentation parameter must be positive, got {r}")
    ops = operators(space)
    fv = problem.force_at_vertices()
    F1, Fb = ops.load(fv)
    nt = space.nt
    zeros_q = np.zeros((nt, 4, 3, 3))
    if not np.any(fv):
        u = space.zero(3)
        p = Field(space, np.zeros((space.ndof, 1)))
        res = {"primal": 0.0, "divergence": 0.0, "q_change": 0.0, "energy": 0.0, "converged": True,
               "flow_certified": False}
        return VISolution(u, p, zeros_q, zeros_q.copy(), res, 0, [], problem.params, r)

    el = space.elements
    w = _qp_weights(space)
    if g == 0.0:
        # Newtonian: a single Stokes solve; q = grad u, lam = 0
        solver = saddle_solver(space, mu, 0.0, opts.linear, opts.linear_tol)
        u1, ub, p, info = solver.solve(F1, Fb)
        Gu = el.qp_gradient(space.vertex_values(u1), ub)
        div = solver.divergence_residual(u1, ub)
        u = Field(space, u1, ub)
        work = float(np.sum(F1 * u1) + np.sum(Fb * ub))
        res = {"primal": 0.0, "divergence": div, "q_change": 0.0, "converged": True,
               "flow_certified": certifies_flow(0.0, work), **info}
        sol = VISolution(u, Field(space, p[:, None]), Gu, zeros_q, res, 1, [], problem.params, r)
        res["energy"] = energy_residual(sol, problem)
        sol.history.append({"iter": 1, "primal": 0.0, "div": div, "q_change": 0.0,
                            "J": primal_energy(space, mu, 0.0, u1, ub, F1, Fb)})
        return sol

    if init is None:
        # warm start from the Newtonian flow: q = grad u_N, lam = 0
        u1, ub, _, _ = saddle_solver(space, mu, 0.0, opts.linear, opts.linear_tol).solve(F1, Fb)
        q = el.qp_gradient(space.vertex_values(u1), ub)
        lam = zeros_q.copy()
    else:
        q, lam = (np.array(a, dtype=float).reshape(nt, 4, 3, 3) for a in init)
    solver = saddle_solver(space, mu, r, opts.linear, opts.linear_tol)
    history = []
    # extrapolated points (q_hat, lam_hat) and momentum state of the restarted scheme
    q_hat, lam_hat = q, lam
    alpha, c_prev = 1.0, np.inf
    bubble_k = el.bubble_stiffness()
    certified = stopped = False
    for it in range(1, opts.max_iter + 1):
        Fa1, Fab = _augmented_load(space, r * q_hat - lam_hat)
        u1, ub, p, _ = solver.solve(F1 + Fa1, Fb + Fab)
        Gu = el.qp_gradient(space.vertex_values(u1), ub)
        q_old, lam_old = q, lam
        q = _shrink_qp(Gu + lam_hat / r, g / r)
        gap = Gu - q
        lam = lam_hat + r * gap
        gap2 = _wnorm(w, gap) ** 2
        if opts.accelerate:
            # lam - lam_hat = r (Gu - q)
            c = r * gap2 + r * _wnorm(w, q - q_hat) ** 2
            if c < opts.restart_eta * c_prev:
                alpha_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * alpha * alpha))
                beta = (alpha - 1.0) / alpha_next
                q_hat = q + beta * (q - q_old)
                lam_hat = lam + beta * (lam - lam_old)
                alpha, c_prev = alpha_next, c
            else:
                # restart: drop the momentum and continue from the plain iterate
                alpha, c_prev = 1.0, c_prev / opts.restart_eta
                q_hat, lam_hat = q, lam
        else:
            q_hat, lam_hat = q, lam
        gu2 = _sq(Gu)
        scale = max(np.sqrt(np.dot(w.ravel(), gu2.ravel())), _wnorm(w, q), _wnorm(w, lam) / r, 1e-300)
        primal = float(np.sqrt(gap2) / scale)
        dq = _wnorm(w, q - q_old) / scale
        div = solver.divergence_residual(u1, ub)
        rec = {"iter": it, "primal": primal, "div": div, "q_change": dq}
        # slope of t -> J(t u) at t = 0; a negative value certifies that the minimiser is nonzero
        plastic = g * float(np.dot(w.ravel(), np.sqrt(gu2).ravel()))
        work = float(np.sum(F1 * u1) + np.sum(Fb * ub))
        rec["slope"] = plastic - work
        certified = certified or certifies_flow(plastic, work)
        if opts.record_energy:
            # the P1 part of the gradient is the quadrature-point mean (bubble gradients sum to zero)
            g1 = Gu.mean(axis=1)
            visc = float(np.dot(el.vol, np.einsum("kij,kij->k", g1, g1))
                         + np.dot(bubble_k, np.einsum("ki,ki->k", ub, ub)))
            rec["J"] = 0.5 * mu * visc + plastic - work
        history.append(rec)
        if max(primal, dq, div) <= opts.tol:
            break
        if certified and opts.stop_at_flow:
            stopped = True
            break
    else:
        raise NonConvergenceError(
            f"ALG2 did not converge in {opts.max_iter} iterations "
            f"(primal {primal:.2e}, q-change {dq:.2e}, div {div:.2e})", history)

    if not np.any(q) or not certified:
        # no iterate proves flow: the minimiser is the rigid state u = 0 up to the solver
        # tolerance (with q = 0 every point is sheared below the yield level)
        u1 = np.zeros_like(u1)
        ub = np.zeros_like(ub)
    u = Field(space, u1, ub)
    res = {"primal": primal, "divergence": div, "q_change": dq, "converged": not stopped,
           "flow_certified": certified}
    sol = VISolution(u, Field(space, p[:, None]), q, lam, res, it, history, problem.params, r)
    res["energy"] = energy_residual(sol, problem)
    log.debug("ALG2 %s after %d iterations, energy defect %.2e", "stopped at a flow certificate" if stopped
              else "converged", it, res["energy"])
    return sol


def primal_energy(space, mu, g, u1, ub, F1, Fb):
    """``J(u) = mu/2 |grad u|^2 + g int |grad u| - int f.u`` for dof values ``u1`` and bubbles ``ub``."""
    el = space.elements
    vv = space.vertex_values(u1)
    return (0.5 * mu * float(el.grad_l2_squared(vv, ub).sum()) + g * float(el.grad_abs_integral(vv, ub).sum())
            - float(np.sum(F1 * u1) + np.sum(Fb * ub)))


def energy_terms(sol: VISolution, problem: BinghamProblem):
    """``(mu_eff |grad u|^2, g_eff int |grad u|, int f.u, int |f.u|)`` for the discrete field."""
    space = problem.space
    el = space.elements
    uv = sol.u.at_vertices()
    ub = sol.u.bubble
    F1, Fb = operators(space).load(problem.force_at_vertices())
    visc = problem.params.mu_eff * float(el.grad_l2_squared(uv, ub).sum())
    plast = problem.params.g_eff * float(el.grad_abs_integral(uv, ub).sum())
    work = float(np.sum(F1 * sol.u.values) + np.sum(Fb * ub))
    abs_work = float(np.sum(np.abs(F1 * sol.u.values)) + np.sum(np.abs(Fb * ub)))
    return visc, plast, work, abs_work


def energy_residual(sol: VISolution, problem: BinghamProblem) -> float:
    """Normalised defect of ``mu |grad u|^2 + g int|grad u| = int f.u``.

    The denominator is ``int |f.u|`` plus a machine floor, ``ENERGY_FLOOR``
    times the work scale ``||f||^2 H^2 / mu`` of an unobstructed flow in a
    layer of height ``H``. The floor keeps a velocity that vanishes up to
    the rounding of the linear solves (a gradient force under no-slip walls)
    from reporting a spurious defect.
    """
    visc, plast, work, abs_work = energy_terms(sol, problem)
    space = problem.space
    fv = problem.force_at_vertices()
    fnorm2 = float(space.elements.l2_squared(fv).sum())
    height = float(np.ptp(space.vertices[:, 2]))
    floor = ENERGY_FLOOR * fnorm2 * height ** 2 / problem.params.mu_eff
    return abs(visc + plast - work) / (abs_work + floor + np.finfo(float).tiny)


def rigid_zones(sol: VISolution, tol: float | None = None) -> DiagnosticFields:
    """Plug indicator (all quadrature points with ``|q| <= tol``), ``D`` and ``D_II``."""
    space = sol.u.space
    qmag = np.sqrt(np.sum(sol.q ** 2, axis=(2, 3)))
    if tol is None:
        tol = 1e-8 * (qmag.max() + 1.0)
    G = space.elements.p1_gradient(sol.u.at_vertices())
    D = 0.5 * (G + G.transpose(0, 2, 1))
    DII = 0.5 * np.sum(D * D, axis=(1, 2))
    plug = np.all(qmag <= tol, axis=1).astype(int)
    return DiagnosticFields(D, DII, plug, float(tol))


def apriori_report(sol: VISolution, epsilon: float) -> dict:
    """``r1 = eps |||grad u|||`` and ``r2 = |||u|||``."""
    n = scaled_norms(sol.u, epsilon)
    return {"r1": epsilon * n["H1_semi"], "r2": n["L2"]}


def poincare_ratio(field: Field, epsilon: float) -> float:
    """``|||u||| / (eps |||grad u|||)``, the constant in the thin-domain Poincare inequality."""
    n = scaled_norms(field, epsilon)
    return n["L2"] / (epsilon * n["H1_semi"]) if n["H1_semi"] > 0 else 0.0
