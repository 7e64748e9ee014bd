"""Cell problem, mobility table, nonlinear Darcy law and limit reconstruction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ExtrapolationError, NonConvergenceError, ParameterError, PartialTableError,
                     ThresholdAboveRangeError)
from .fem import Field
from .geometry import RoughProfile, build_cell_mesh
from .io import read_csv, write_csv, write_vtk, VTK_TRIANGLE
from .vi import BinghamProblem, SolverOptions, rigid_zones, solve_bingham

log = logging.getLogger(__name__)

_MESHES = {}


def cell_mesh_for(profile: RoughProfile, resolution):
    """Cell meshes are cached so repeated solves share one factorisation."""
    key = (profile.fingerprint(), tuple(int(m) for m in resolution))
    if key not in _MESHES:
        if len(_MESHES) > 8:
            _MESHES.clear()
        _MESHES[key] = build_cell_mesh(profile, key[1])
    return _MESHES[key]


@dataclass(eq=False)
class CellSolution:
    xi: np.ndarray
    chi: Field
    A_value: np.ndarray
    plug_fraction: float
    residuals: dict
    iterations: int

    @property
    def flows(self):
        return bool(np.any(self.A_value != 0.0) or np.any(self.chi.values))

    def vertical_flux_defect(self):
        """``|int chi_3| / ||chi||``; zero flux through horizontal slices forces it to vanish."""
        n = self.chi.l2_norm()
        return abs(float(self.chi.integral()[2])) / n if n > 0 else 0.0


def solve_cell(xi, profile: RoughProfile, mu=1.0, g=0.0, resolution=(8, 8, 8), opts: SolverOptions | None = None):
    """Solve the Bingham cell problem on ``Y*`` with driving force ``(xi, 0)``.

    Lateral sides are periodic, top and bottom are no-slip. The mobility
    value is ``A(xi) = (1/(L1 L2)) int_{Y*} (chi_1, chi_2) dy``.

    Examples
    --------
    >>> sol = solve_cell((1.0, 0.0), RoughProfile.flat(), resolution=(4, 4, 8))
    >>> abs(float(sol.A_value[0]) - 1 / 12) < 0.002
    True
    """
    xi = np.asarray(xi, dtype=float).reshape(2)
    mesh = cell_mesh_for(profile, resolution)
    problem = BinghamProblem.cell(mesh, mu, g, xi)
    sol = solve_bingham(problem, opts)
    flux = sol.u.integral()
    A = flux[:2] / (profile.L1 * profile.L2)
    plug = rigid_zones(sol).plug_volume_fraction(problem.space.elements.vol)
    return CellSolution(xi, sol.u, A, plug, dict(sol.residuals), sol.iterations)


def yield_threshold(theta, profile: RoughProfile, mu=1.0, g=0.0, tol=1e-3, resolution=(8, 8, 8),
                    r_max=10.0, bracket=None, opts=None, probe_iter=400):
    """Smallest force magnitude that makes the cell flow in direction ``theta``.

    Bisection on ``r`` of ``A(r (cos theta, sin theta)) = 0`` versus ``!= 0``
    down to bracket width ``tol``; the bracket midpoint is returned.
    ``bracket=(lo, hi)`` is a guess which is widened until valid.

    A probe counts as flowing only when an ALG2 iterate certifies it
    (``vi.certifies_flow``): the iterates are admissible fields, and one with
    ``g int|grad v| < int f.v`` proves that the minimiser is nonzero. Probes
    stop at the first certificate, so they are cheap above the threshold.
    Below it the iteration reaches the all-plug state within a few dozen
    steps. A probe that reaches ``probe_iter`` outer iterations without a
    certificate counts as rigid, so the result never falls below a force
    at which flow was not proven.
    """
    if g < 0:
        raise ParameterError("g must be non-negative")
    if g == 0:
        return 0.0
    d = np.array([np.cos(theta), np.sin(theta)])
    mesh = cell_mesh_for(profile, resolution)
    probe = replace(opts or SolverOptions(), max_iter=probe_iter, record_energy=False, stop_at_flow=True)

    def flows(r):
        try:
            out = solve_bingham(BinghamProblem.cell(mesh, mu, g, r * d), probe).residuals["flow_certified"]
        except NonConvergenceError as exc:
            out = False
            log.debug("threshold probe r=%.6g reached %d iterations without a flow certificate", r,
                      len(exc.history))
        log.debug("threshold probe r=%.6g: %s", r, "flows" if out else "rigid")
        return out

    lo, hi = 0.0, None
    if bracket is not None:
        a, b = bracket
        if 0 < b < r_max:
            if flows(b):
                hi = b
                if 0 < a < b and not flows(a):
                    lo = a
            else:
                lo = b
    if hi is None:
        if not flows(r_max):
            raise ThresholdAboveRangeError(f"no flow below r_max = {r_max} in direction {theta:.4f}")
        hi = r_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if flows(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@dataclass(eq=False)
class MobilityTable:
    """Polar samples of the mobility map.

    ``values[k, j]`` is ``A`` at radius ``radii[k]`` and angle ``angles[j]``
    (angles in ``[0, pi)``; the opposite half plane follows from oddness).
    """

    radii: np.ndarray
    angles: np.ndarray
    values: np.ndarray  # (n_r, n_theta, 2)
    iterations: np.ndarray  # (n_r, n_theta)
    residuals: np.ndarray  # (n_r, n_theta)
    thresholds: np.ndarray  # (n_theta,)
    profile_hash: str
    mu: float
    g: float
    resolution: tuple = (8, 8, 8)

    @property
    def r_max(self):
        return float(self.radii[-1])

    def samples(self):
        """``(xi, A)`` pairs for every stored node, the origin first."""
        xs = [np.zeros(2)]
        As = [np.zeros(2)]
        for k, r in enumerate(self.radii):
            for j, t in enumerate(self.angles):
                xs.append(r * np.array([np.cos(t), np.sin(t)]))
                As.append(self.values[k, j])
        return np.array(xs), np.array(As)

    def symmetric_samples(self):
        """Stored samples together with their odd reflections."""
        xs, As = self.samples()
        return np.concatenate([xs, -xs[1:]]), np.concatenate([As, -As[1:]])

    def scale(self):
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def fingerprint_line(self):
        return f"profile={self.profile_hash} mu={self.mu!r} g={self.g!r}"

    def to_csv(self, path):
        """Columns ``xi1,xi2,A1,A2,iters,residual`` after a fingerprint comment line."""
        rows = [(0.0, 0.0, 0.0, 0.0, 0, 0.0)]
        for k, r in enumerate(self.radii):
            for j, t in enumerate(self.angles):
                rows.append((r * np.cos(t), r * np.sin(t), self.values[k, j, 0], self.values[k, j, 1],
                             int(self.iterations[k, j]), float(self.residuals[k, j])))
        comments = [self.fingerprint_line(),
                    "radii=" + " ".join(repr(float(r)) for r in self.radii),
                    "angles=" + " ".join(repr(float(a)) for a in self.angles),
                    "thresholds=" + " ".join(repr(float(a)) for a in self.thresholds),
                    "resolution=" + " ".join(str(int(m)) for m in self.resolution)]
        return write_csv(path, ["xi1", "xi2", "A1", "A2", "iters", "residual"], rows, comments)

    @classmethod
    def from_csv(cls, path):
        comments, header, rows = read_csv(path)
        meta = {}
        for c in comments:
            for tok in c.split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta.setdefault(k, v)
            if c.startswith(("radii=", "angles=", "thresholds=", "resolution=")):
                k, v = c.split("=", 1)
                meta[k] = v
        radii = np.array([float(v) for v in meta["radii"].split()])
        angles = np.array([float(v) for v in meta["angles"].split()])
        thr = np.array([float(v) for v in meta.get("thresholds", "").split()])
        res = tuple(int(v) for v in meta.get("resolution", "8 8 8").split())
        data = np.array([[float(v) for v in row] for row in rows])[1:]
        nr, nt = len(radii), len(angles)
        values = data[:, 2:4].reshape(nr, nt, 2)
        return cls(radii, angles, values, data[:, 4].reshape(nr, nt).astype(int), data[:, 5].reshape(nr, nt),
                   thr, meta["profile"], float(meta["mu"]), float(meta["g"]), res)


def default_radii(tau, r_max, n=8):
    """``n`` radii, geometric from ``tau / 2`` to ``r_max`` (from ``r_max / 2^(n-1)`` when ``tau = 0``)."""
    r0 = tau / 2 if tau > 0 else r_max / 2 ** (n - 1)
    if n == 1:
        return np.array([float(r_max)])
    return np.geomspace(r0, r_max, n)


def build_mobility_table(profile: RoughProfile, mu=1.0, g=0.0, radii=None, n_angles=8, n_radii=8,
                         r_max=2.0, resolution=(8, 8, 8), threshold_tol=1e-3, opts=None, angles=None):
    """Cell solves on a polar grid of forces.

    Thresholds ``tau*(theta)`` are located first (zero when ``g = 0``);
    without explicit ``radii`` the grid is geometric from
    ``min tau* / 2`` to ``r_max``.
    """
    angles = np.arange(n_angles) * np.pi / n_angles if angles is None else np.asarray(angles, dtype=float)
    thresholds = np.zeros(len(angles))
    if g > 0:
        prev = None
        for j, t in enumerate(angles):
            guess = None if prev is None else (prev - 2 * threshold_tol, prev + 2 * threshold_tol)
            thresholds[j] = yield_threshold(t, profile, mu, g, threshold_tol, resolution, r_max, guess, opts)
            log.info("threshold at angle %.4f: %.6g", t, thresholds[j])
            prev = thresholds[j]
    if radii is None:
        radii = default_radii(thresholds.min(), r_max, n_radii)
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ParameterError("radii must be positive and increasing")
    nr, nt = len(radii), len(angles)
    values = np.zeros((nr, nt, 2))
    iters = np.zeros((nr, nt), dtype=int)
    resid = np.zeros((nr, nt))
    failed, history = [], []
    for k, r in enumerate(radii):
        for j, t in enumerate(angles):
            xi = r * np.array([np.cos(t), np.sin(t)])
            try:
                cs = solve_cell(xi, profile, mu, g, resolution, opts)
            except NonConvergenceError as exc:
                failed.append(k * nt + j)
                history.append({"sample": k * nt + j, "xi": xi.tolist(), "error": str(exc)})
                continue
            values[k, j] = cs.A_value
            log.info("sample r=%.4g angle=%.4f: A=(%.6g, %.6g), %d iterations", r, t, *cs.A_value, cs.iterations)
            iters[k, j] = cs.iterations
            resid[k, j] = cs.residuals.get("energy", 0.0)
    if failed:
        raise PartialTableError(f"{len(failed)} mobility samples did not converge", failed, history)
    return MobilityTable(radii, angles, values, iters, resid, thresholds, profile.fingerprint(), float(mu),
                         float(g), tuple(resolution))


def eval_mobility(table: MobilityTable, xi) -> np.ndarray:
    """Interpolate the table at ``xi`` (a 2-vector or an ``(n, 2)`` array).

    Radially the interpolation is linear, anchored at ``A(0) = 0``. In angle
    the force is split over the two neighbouring sample directions,
    ``xi = a d_j + b d_{j+1}`` with ``a, b >= 0``, and the result is
    ``(a A_j(|xi|) + b A_{j+1}(|xi|)) / |xi|``. This reproduces the nodes,
    the odd extension, and any linear map exactly.
    """
    x = np.asarray(xi, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    rho = np.hypot(x[:, 0], x[:, 1])
    if np.any(rho > table.r_max * (1 + 1e-12)):
        raise ExtrapolationError(f"|xi| = {rho.max():.6g} exceeds the largest tabulated radius {table.r_max:.6g}; "
                                 "rebuild the table with a larger r_max")
    # full circle of directions with the odd extension
    ang = np.concatenate([table.angles, table.angles + np.pi])
    vals = np.concatenate([table.values, -table.values], axis=1)  # (n_r, 2 nt, 2)
    order = np.argsort(ang)
    ang, vals = ang[order], vals[:, order]
    r_nodes = np.concatenate([[0.0], table.radii])
    v_nodes = np.concatenate([np.zeros((1,) + vals.shape[1:]), vals], axis=0)
    out = np.zeros_like(x)
    theta = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
    m = len(ang)
    for n in np.flatnonzero(rho > 0):
        j = int(np.searchsorted(ang, theta[n], side="right") - 1) % m
        ja, jb = j, (j + 1) % m
        da = np.array([np.cos(ang[ja]), np.sin(ang[ja])])
        db = np.array([np.cos(ang[jb]), np.sin(ang[jb])])
        a, b = np.linalg.solve(np.column_stack([da, db]), x[n])
        a, b = max(a, 0.0), max(b, 0.0)
        Aa = np.array([np.interp(rho[n], r_nodes, v_nodes[:, ja, c]) for c in range(2)])
        Ab = np.array([np.interp(rho[n], r_nodes, v_nodes[:, jb, c]) for c in range(2)])
        out[n] = (a * Aa + b * Ab) / rho[n]
    return out[0] if single else out


def newtonian_permeability(profile: RoughProfile, mu=1.0, resolution=(8, 8, 8), opts=None):
    """``K`` with columns ``A(e1)``, ``A(e2)`` for ``g = 0``."""
    a1 = solve_cell((1.0, 0.0), profile, mu, 0.0, resolution, opts).A_value
    a2 = solve_cell((0.0, 1.0), profile, mu, 0.0, resolution, opts).A_value
    return np.column_stack([a1, a2])


def linear_table(K, radii=(1.0, 2.0), n_angles=8, profile_hash="linear", mu=1.0):
    """Table of the linear map ``xi -> K xi`` (Newtonian mobility)."""
    K = np.asarray(K, dtype=float)
    angles = np.arange(n_angles) * np.pi / n_angles
    radii = np.asarray(radii, dtype=float)
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    values = radii[:, None, None] * (d @ K.T)[None, :, :]
    z = np.zeros(values.shape[:2])
    return MobilityTable(radii, angles, values, z.astype(int), z, np.zeros(n_angles), profile_hash, mu, 0.0)


# ---------------------------------------------------------------------------
# macroscopic forcing and the Darcy problem


@dataclass(frozen=True)
class MacroForcing:
    """Horizontal forcing on the unit square.

    ``conservative``: ``f = grad q`` with ``q = A cos(pi x1) cos(pi x2)``;
    ``solenoidal``: ``f = (-d2 psi, d1 psi)`` with ``psi = A sin(pi x1) sin(pi x2)``;
    ``constant``: ``f = (c1, c2)``; ``tabulated``: bilinear data on a grid.
    """

    kind: str = "constant"
    amplitude: float = 1.0
    vector: tuple = (1.0, 0.0)
    grid: tuple | None = None  # (x1 nodes, x2 nodes, values (n1, n2, 2)) for tabulated data

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a, pi = self.amplitude, np.pi
        if self.kind == "constant":
            return np.tile(np.asarray(self.vector, dtype=float) * a, (len(x), 1))
        if self.kind == "conservative":
            return a * pi * np.column_stack([-np.sin(pi * x[:, 0]) * np.cos(pi * x[:, 1]),
                                             -np.cos(pi * x[:, 0]) * np.sin(pi * x[:, 1])])
        if self.kind == "solenoidal":
            return a * pi * np.column_stack([-np.sin(pi * x[:, 0]) * np.cos(pi * x[:, 1]),
                                             np.cos(pi * x[:, 0]) * np.sin(pi * x[:, 1])])
        if self.kind == "tabulated":
            from scipy.interpolate import RegularGridInterpolator
            g1, g2, vals = self.grid
            interp = RegularGridInterpolator((np.asarray(g1), np.asarray(g2)), np.asarray(vals))
            return a * interp(np.clip(x[:, :2], 0.0, 1.0))
        raise ParameterError(f"unknown forcing kind {self.kind!r}")

    def potential(self, x):
        """``q`` for conservative forcing."""
        return self.amplitude * np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])

    def stream(self, x):
        """``psi`` for solenoidal forcing."""
        return self.amplitude * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def on_triangles(self, grid: "SquareGrid"):
        """Element forcing: rotated/plain gradients of the P1 interpolant of ``psi``/``q``, else centroid values."""
        if self.kind == "conservative":
            return grid.gradient(self.potential(grid.points))
        if self.kind == "solenoidal":
            gp = grid.gradient(self.stream(grid.points))
            return np.column_stack([-gp[:, 1], gp[:, 0]])
        return self(grid.centroids)

    def is_zero(self):
        return self.amplitude == 0.0 or (self.kind == "constant" and not np.any(self.vector))


@dataclass(eq=False)
class SquareGrid:
    """Structured P1 triangulation of ``(0,1)^2`` with ``n x n`` squares split along a diagonal."""

    n: int
    points: np.ndarray = field(init=False)
    triangles: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.n
        if n < 1:
            raise ParameterError("Darcy grid needs at least one square")
        s = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(s, s, indexing="ij")
        self.points = np.column_stack([X.ravel(), Y.ravel()])
        vid = lambda i, j: i * (n + 1) + j  # noqa: E731
        tris = []
        for i in range(n):
            for j in range(n):
                a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
                tris.append((a, b, c))
                tris.append((a, c, d))
        self.triangles = np.array(tris, dtype=np.int64)
        x = self.points[self.triangles]
        E = x[:, 1:] - x[:, :1]
        det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
        self.area = 0.5 * det
        inv = np.linalg.inv(E)
        g = np.empty((len(self.triangles), 3, 2))
        g[:, 1:, :] = inv.transpose(0, 2, 1)
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        self.grad = g
        self.centroids = x.mean(axis=1)
        self.boundary = ((self.points[:, 0] == 0) | (self.points[:, 0] == 1) | (self.points[:, 1] == 0)
                         | (self.points[:, 1] == 1))

    @property
    def npoints(self):
        return len(self.points)

    def gradient(self, nodal):
        return np.einsum("ti,tid->td", np.asarray(nodal)[self.triangles], self.grad)

    def identification(self, periodic=False):
        """Prolongation ``(npoints, nmaster)`` from independent nodal values.

        With ``periodic`` the nodes on ``x_k = 1`` are copies of those on
        ``x_k = 0``; otherwise it is the identity.
        """
        n = self.n
        if not periodic:
            return sp.identity(self.npoints, format="csr")
        i, j = np.divmod(np.arange(self.npoints), n + 1)
        master = (i % n) * n + (j % n)
        return sp.csr_matrix((np.ones(self.npoints), (np.arange(self.npoints), master)), shape=(self.npoints, n * n))

    def mass_lumped(self):
        m = np.zeros(self.npoints)
        np.add.at(m, self.triangles.ravel(), np.repeat(self.area / 3.0, 3))
        return m

    def mean(self, nodal):
        return float(self.mass_lumped() @ nodal)

    def assemble_vector(self, V):
        """``int V . grad phi_i`` for element-constant ``V``."""
        loc = self.area[:, None] * np.einsum("td,tid->ti", V, self.grad)
        out = np.zeros(self.npoints)
        np.add.at(out, self.triangles.ravel(), loc.ravel())
        return out

    def assemble_matrix(self, J):
        """``int grad phi_j^T J grad phi_i`` for element-constant 2x2 ``J``."""
        loc = self.area[:, None, None] * np.einsum("tid,tde,tje->tij", self.grad, J, self.grad)
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        return sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(self.npoints, self.npoints))

    def gradient_at(self, nodal, pts):
        """Gradient at points, averaged over all triangles whose closure holds the point."""
        g = self.gradient(nodal)
        out = np.zeros((len(pts), 2))
        h = 1.0 / self.n
        for n, p in enumerate(np.atleast_2d(pts)):
            i = np.clip(np.floor(p / h + 1e-9).astype(int), 0, self.n - 1)
            cand = []
            for di in (-1, 0):
                for dj in (-1, 0):
                    a, b = i[0] + di, i[1] + dj
                    if 0 <= a < self.n and 0 <= b < self.n:
                        cand.extend([2 * (a * self.n + b), 2 * (a * self.n + b) + 1])
            hits = [t for t in cand if self._contains(t, p)]
            out[n] = g[hits].mean(axis=0)
        return out

    def value_at(self, nodal, pts):
        from scipy.interpolate import LinearNDInterpolator
        return LinearNDInterpolator(self.points, nodal)(np.atleast_2d(pts))

    def _contains(self, t, p):
        x = self.points[self.triangles[t]]
        lam = np.linalg.solve(np.vstack([x.T, np.ones(3)]), np.append(p, 1.0))
        return bool(np.all(lam >= -1e-10))


@dataclass(eq=False)
class DarcySolution:
    grid: SquareGrid
    p: np.ndarray  # nodal, zero mean
    V: np.ndarray  # (n_triangles, 2) filtration velocity at element midpoints
    residuals: dict
    iterations: int
    delta: float
    forcing: np.ndarray  # element forcing used

    def to_vtk(self, path):
        return write_vtk(path, self.grid.points, self.grid.triangles, VTK_TRIANGLE, point_data={"p": self.p},
                         cell_data={"V": self.V})

    def summary_rows(self):
        return [(k, float(v)) for k, v in sorted(self.residuals.items())] + [("iterations", self.iterations),
                                                                             ("delta", self.delta)]

    def to_csv(self, path):
        return write_csv(path, ["quantity", "value"], self.summary_rows())


@dataclass(frozen=True)
class DarcyOptions:
    n: int = 32
    tol: float = 1e-10
    max_iter: int = 100
    delta_rel: float = 1e-6
    fd_step: float = 1e-7
    periodic: bool = False


def _regularised(table, xi, delta):
    return eval_mobility(table, xi) + delta * xi


def _jacobian(table, xi, delta, h):
    J = np.empty((len(xi), 2, 2))
    for c in range(2):
        e = np.zeros(2)
        e[c] = 1.0
        step = h * np.maximum(1.0, np.hypot(xi[:, 0], xi[:, 1]))
        lo, hi = xi - step[:, None] * e, xi + step[:, None] * e
        rmax = table.r_max
        # one-sided near the edge of the table
        over = np.hypot(hi[:, 0], hi[:, 1]) > rmax
        hi[over] = xi[over]
        under = np.hypot(lo[:, 0], lo[:, 1]) > rmax
        lo[under] = xi[under]
        denom = np.where(over | under, step, 2 * step)
        J[:, :, c] = (eval_mobility(table, hi) - eval_mobility(table, lo)) / denom[:, None]
    return J + delta * np.eye(2)


def _abs_load_norm(grid, V):
    loc = np.abs(grid.area[:, None] * np.einsum("td,tid->ti", V, grid.grad))
    out = np.zeros(grid.npoints)
    np.add.at(out, grid.triangles.ravel(), loc.ravel())
    return float(np.linalg.norm(out))


def _range_cap(xi, gd, r_max):
    """Largest step ``s`` keeping every ``|xi - s gd| <= r_max``."""
    a = np.sum(gd * gd, axis=1)
    b = -2.0 * np.sum(xi * gd, axis=1)
    c = np.minimum(np.sum(xi * xi, axis=1) - r_max ** 2, 0.0)
    m = a > 0
    if not np.any(m):
        return np.inf
    roots = (-b[m] + np.sqrt(b[m] ** 2 - 4 * a[m] * c[m])) / (2 * a[m])
    return float(roots.min())


def darcy_residuals(grid, V, scale=None, periodic=False):
    """Interior divergence and boundary normal-flux residuals of ``int V . grad phi``.

    Both are relative to ``scale`` (default: the same functional with
    ``|V|``), so they compare the net flux with the gross flux. In the
    periodic mode the boundary residual is the flux mismatch between
    opposite sides.
    """
    P = grid.identification(periodic)
    r = P.T @ grid.assemble_vector(V)
    s = _abs_load_norm(grid, V) if scale is None else scale
    s = max(s, np.finfo(float).tiny)
    bd = (P.T @ grid.boundary.astype(float)) > 0
    return float(np.linalg.norm(r[~bd]) / s), float(np.linalg.norm(r[bd]) / s), r


def solve_darcy(fhat, table: MobilityTable, opts: DarcyOptions | None = None) -> DarcySolution:
    """Solve ``V = A(f - grad p)``, ``div V = 0``, ``V . n = 0`` on the unit square
    (or ``p`` periodic when ``opts.periodic``).

    The weak form ``int A_d(f - grad p) . grad phi = 0`` for all P1 ``phi`` is
    the optimality condition of a convex energy; it is solved by Newton's
    method with a finite-difference Jacobian and an exact line search on the
    monotone directional derivative. ``A_d(xi) = A(xi) + d xi`` with
    ``d = delta_rel * (table scale)`` removes the non-uniqueness of ``p`` in
    regions below the yield threshold.
    """
    opts = opts or DarcyOptions()
    grid = SquareGrid(opts.n)
    f = fhat.on_triangles(grid) if isinstance(fhat, MacroForcing) else np.asarray(fhat(grid.centroids), float)
    delta = opts.delta_rel * max(table.scale() / max(table.r_max, 1e-300), 1e-300)
    P = grid.identification(opts.periodic)
    Pt = P.T.tocsr()
    p = np.zeros(grid.npoints)
    keep = np.arange(1, P.shape[1])
    # gross flux of the unconstrained filtration velocity A(f), the scale of every residual
    fscale = max(_abs_load_norm(grid, _regularised(table, f, delta)), np.finfo(float).tiny)
    history = []
    it = 0
    for it in range(1, opts.max_iter + 1):
        xi = f - grid.gradient(p)
        V = _regularised(table, xi, delta)
        R = Pt @ grid.assemble_vector(V)
        rn = float(np.linalg.norm(R)) / fscale
        history.append(rn)
        if rn <= opts.tol:
            break
        J = (Pt @ grid.assemble_matrix(_jacobian(table, xi, delta, opts.fd_step)) @ P).tocsc()
        dm = np.zeros(P.shape[1])
        # p -> p + d changes xi by -grad d, so the Newton step solves J d = R
        dm[keep] = spla.spsolve(J[keep][:, keep], R[keep])
        d = P @ dm
        gd = grid.gradient(d)

        def slope(s):
            return -float(np.sum(grid.area * np.einsum("td,td->t", _regularised(table, xi - s * gd, delta), gd)))

        s_cap = _range_cap(xi, gd, table.r_max)
        s_lim = min(s_cap, 64.0)
        if slope(s_lim) < 0:
            s = s_lim
            if s_cap < 1e-10:
                raise ExtrapolationError("the Darcy iteration needs forces beyond the tabulated range; "
                                         "rebuild the mobility table with a larger r_max")
        else:
            s = optimize.brentq(slope, 0.0, s_lim, xtol=1e-14 * s_lim)
        p = p + s * d
    else:
        raise NonConvergenceError(f"Darcy Newton iteration did not converge (residual {rn:.2e})",
                                  [{"iter": k + 1, "residual": v} for k, v in enumerate(history)])
    p = p - grid.mean(p)
    V = _regularised(table, f - grid.gradient(p), delta)
    div, flux, _ = darcy_residuals(grid, V, fscale, opts.periodic)
    res = {"nonlinear": history[-1], "divergence": div, "boundary_flux": flux}
    return DarcySolution(grid, p, V, res, it, delta, f)


# ---------------------------------------------------------------------------
# reconstruction of the limit velocity


@dataclass(eq=False)
class LimitField:
    """Limit pair sampled at the centres of the ``eps``-cells.

    ``chi_values[c]`` and ``chi_bubble[c]`` are the cell-problem velocity at
    ``xi[c] = f(x_c) - grad p(x_c)`` on the (unidentified) cell mesh;
    ``p[c]`` is the macroscopic pressure at ``x_c``.
    """

    centres: np.ndarray
    xi: np.ndarray
    chi_values: np.ndarray  # (ncells, nv_cell, 3)
    chi_bubble: np.ndarray  # (ncells, nt_cell, 3)
    p: np.ndarray
    V: np.ndarray  # (ncells, 2)


def reconstruct_limit(fhat, darcy: DarcySolution | None, profile: RoughProfile, mu, g, centres,
                      resolution=(8, 8, 8), opts=None) -> LimitField:
    """Cell solutions at ``xi = f(x_c) - grad p(x_c)`` for each centre ``x_c``.

    With ``g = 0`` the two unit solves are superposed; otherwise one cell
    problem is solved per centre.
    """
    centres = np.atleast_2d(np.asarray(centres, dtype=float))
    mesh = cell_mesh_for(profile, resolution)
    nc = len(centres)
    fvals = np.asarray(fhat(centres), dtype=float)
    if darcy is None:
        gp = np.zeros((nc, 2))
        pc = np.zeros(nc)
    else:
        gp = darcy.grid.gradient_at(darcy.p, centres)
        pc = np.asarray(darcy.grid.value_at(darcy.p, centres), dtype=float)
    xi = fvals - gp
    nv, nt = mesh.nv, mesh.nt
    chi = np.zeros((nc, nv, 3))
    bub = np.zeros((nc, nt, 3))
    V = np.zeros((nc, 2))
    if g == 0:
        basis = [solve_cell(e, profile, mu, 0.0, resolution, opts) for e in ((1.0, 0.0), (0.0, 1.0))]
        for c in range(nc):
            for k in range(2):
                chi[c] += xi[c, k] * basis[k].chi.at_vertices()
                bub[c] += xi[c, k] * basis[k].chi.bubble
            V[c] = xi[c, 0] * basis[0].A_value + xi[c, 1] * basis[1].A_value
    else:
        for c in range(nc):
            if not np.any(xi[c]):
                continue
            cs = solve_cell(xi[c], profile, mu, g, resolution, opts)
            chi[c] = cs.chi.at_vertices()
            bub[c] = cs.chi.bubble
            V[c] = cs.A_value
    return LimitField(centres, xi, chi, bub, pc - pc.mean() if nc else pc, V)


def limit_inequality_defect(limit: LimitField, profile: RoughProfile, mu, g, resolution=(8, 8, 8), n_samples=4,
                            steps=(1.0, 1e-2, 1e-4), seed=0) -> float:
    """Check the reconstructed limit pair against sampled admissible test functions.

    At every centre the cell velocity ``chi`` must minimise the convex
    functional ``J(v) = mu/2 |grad v|^2 + g int |grad v| - int (xi, 0).v``
    over periodic, divergence-free fields vanishing on the walls, which is
    equivalent to the cell variational inequality. Test directions ``psi``
    are Stokes responses to random loads, so they are admissible, and are
    scaled to the gradient norm of ``chi``. The return value is the largest
    normalised decrease ``max(0, J(chi) - J(chi + s psi)) / E`` over centres,
    samples and steps ``s = +-steps``, with ``E = mu |grad chi|^2 + g int
    |grad chi|`` (or the matching quantity of ``psi`` when ``chi = 0``).
    A true minimiser gives zero up to the solver tolerance.

    Uniqueness of limit solutions is not examined.

    Examples
    --------
    >>> f = lambda x: np.tile([1.0, 0.0], (len(x), 1))
    >>> lim = reconstruct_limit(f, None, RoughProfile.flat(), 1.0, 0.0, [[0.5, 0.5]], (3, 3, 4))
    >>> limit_inequality_defect(lim, RoughProfile.flat(), 1.0, 0.0, (3, 3, 4), n_samples=1) < 1e-8
    True
    """
    from .vi import operators, primal_energy, saddle_solver

    mesh = cell_mesh_for(profile, resolution)
    problem = BinghamProblem.cell(mesh, mu, g, (0.0, 0.0))
    space = problem.space
    el = space.elements
    ops = operators(space)
    stokes = saddle_solver(space, mu, 0.0)
    rng = np.random.default_rng(seed)
    directions = []
    for _ in range(n_samples):
        u1, ub, _, _ = stokes.solve(*ops.load(rng.standard_normal((space.nv, 3))))
        directions.append((u1, ub, np.sqrt(float(el.grad_l2_squared(space.vertex_values(u1), ub).sum()))))

    worst = 0.0
    for xi, chi_v, chi_b in zip(limit.xi, limit.chi_values, limit.chi_bubble):
        F1, Fb = ops.load(np.broadcast_to([xi[0], xi[1], 0.0], (space.nv, 3)))
        c1 = space.dof_values(chi_v)
        J0 = primal_energy(space, mu, g, c1, chi_b, F1, Fb)
        gnorm = np.sqrt(float(el.grad_l2_squared(chi_v, chi_b).sum()))
        for u1, ub, pnorm in directions:
            scale = gnorm / pnorm if gnorm > 0 else 1.0 / pnorm
            d1, db = scale * u1, scale * ub
            dv = space.vertex_values(d1)
            E = (mu * float(el.grad_l2_squared(chi_v, chi_b).sum()) + g * float(el.grad_abs_integral(chi_v, chi_b).sum())
                 if gnorm > 0 else mu * float(el.grad_l2_squared(dv, db).sum()) + g * float(el.grad_abs_integral(dv, db).sum()))
            for s in steps:
                for t in (s, -s):
                    dJ = J0 - primal_energy(space, mu, g, c1 + t * d1, chi_b + t * db, F1, Fb)
                    worst = max(worst, dJ / E)
    return worst
