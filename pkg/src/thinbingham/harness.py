"""Configuration-driven experiments: epsilon sweeps, limit comparison and the verification ledger."""
from __future__ import annotations

import configparser
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ConfigError, ExtrapolationError, H2ViolationError, NonConvergenceError, ThinBinghamError,
                     ThresholdAboveRangeError)
from .geometry import RoughProfile, ThinDomainSpec, build_domain_mesh
from .homogenization import (DarcyOptions, LimitField, MacroForcing, build_mobility_table, cell_mesh_for,
                             limit_inequality_defect, reconstruct_limit, solve_cell, solve_darcy, yield_threshold)
from .io import read_csv, write_csv
from .unfolding import (CellIndexing, UnfoldedField, reference_gradient, unfold, unfold_all, unfold_gradient,
                        vertical_integrals, y_average, y_variance)
from .vi import (BinghamProblem, FluidParams, SolverOptions, apriori_report, energy_residual, poincare_ratio,
                 solve_bingham)
from .fem import Field, scaled_norms

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["epsilon", "r1", "r2", "energy_res", "e_weak", "e_L2", "e_p", "y_var", "iters", "seconds"]
LEDGER_COLUMNS = ["check", "measured", "threshold", "pass"]


def _floats(text):
    return [float(eval_fraction(t)) for t in text.replace(",", " ").split()]


def eval_fraction(token):
    """Parse ``0.25`` or ``1/4``."""
    token = token.strip()
    if "/" in token:
        a, b = token.split("/", 1)
        return float(a) / float(b)
    return float(token)


@dataclass
class ExperimentConfig:
    """Parsed experiment configuration (INI sections ``[domain]``, ``[fluid]``, ``[force]``,
    ``[discretization]``, ``[solver]``, ``[output]`` and optionally ``[cell]``)."""

    epsilons: list = field(default_factory=lambda: [0.5, 0.25])
    profile: RoughProfile = field(default_factory=RoughProfile.flat)
    mu: float = 1.0
    g: float = 0.0
    yield_fraction: float | None = None
    force: MacroForcing = field(default_factory=MacroForcing)
    cell_resolution: tuple = (8, 8, 16)
    darcy_grid: int = 32
    table_radii: int = 8
    radii: tuple | None = None
    table_angles: int = 8
    r_max: float | None = None
    threshold_tol: float = 1e-3
    r_aug: float | None = None
    tol: float = 1e-7
    max_iter: int = 5000
    linear: str = "auto"
    accelerate: bool = False
    output_dir: Path = Path("out")
    formats: tuple = ("csv", "vtk")
    cell_xi: tuple = (1.0, 0.0)
    bc: str = "dirichlet"
    source_text: str = ""

    # -- parsing -------------------------------------------------------------
    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_string(text)
        return cfg

    @classmethod
    def from_string(cls, text):
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls(source_text=text)
        try:
            cfg._parse(cp)
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from exc
        cfg.validate()
        return cfg

    def _parse(self, cp):
        known = {"domain", "fluid", "force", "discretization", "solver", "output", "cell"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        d = cp["domain"] if cp.has_section("domain") else {}
        if "epsilon" in d:
            self.epsilons = _floats(d["epsilon"])
        L1, L2 = float(d.get("L1", 1.0)), float(d.get("L2", 1.0))
        self.bc = d.get("bc", self.bc).strip()
        kind = d.get("profile", "flat").strip()
        height = float(d.get("height", 1.0))
        if kind == "flat":
            self.profile = RoughProfile.flat(height, L1, L2)
        elif kind == "sinusoidal":
            self.profile = RoughProfile.sinusoidal(float(d.get("amplitude", 0.25)), height, L1, L2)
        elif kind == "tabulated":
            if "profile_file" not in d:
                raise ConfigError("tabulated profile needs profile_file")
            self.profile = RoughProfile.from_csv(d["profile_file"], L1, L2)
        else:
            raise ConfigError(f"unknown profile kind {kind!r}")
        f = cp["fluid"] if cp.has_section("fluid") else {}
        self.mu = float(f.get("mu", 1.0))
        self.g = float(f.get("g", 0.0))
        if "yield_fraction" in f:
            self.yield_fraction = float(f["yield_fraction"])
        fo = cp["force"] if cp.has_section("force") else {}
        fkind = fo.get("kind", "constant").strip()
        amp = float(fo.get("amplitude", 1.0))
        vec = tuple(_floats(fo.get("vector", "1 0")))
        grid = None
        if fkind == "tabulated":
            grid = _read_force_table(fo.get("file"))
        if fkind not in ("constant", "conservative", "solenoidal", "tabulated"):
            raise ConfigError(f"unknown force kind {fkind!r}")
        self.force = MacroForcing(fkind, amp, vec, grid)
        di = cp["discretization"] if cp.has_section("discretization") else {}
        if "cell_resolution" in di:
            self.cell_resolution = tuple(int(v) for v in _floats(di["cell_resolution"]))
        self.darcy_grid = int(di.get("darcy_grid", self.darcy_grid))
        self.table_radii = int(di.get("table_radii", self.table_radii))
        self.table_angles = int(di.get("table_angles", self.table_angles))
        if "radii" in di:
            self.radii = tuple(_floats(di["radii"]))
        if "r_max" in di:
            self.r_max = float(di["r_max"])
        self.threshold_tol = float(di.get("threshold_tol", self.threshold_tol))
        so = cp["solver"] if cp.has_section("solver") else {}
        if "r_aug" in so:
            self.r_aug = float(so["r_aug"])
        self.tol = float(so.get("tol", self.tol))
        self.max_iter = int(so.get("max_iter", self.max_iter))
        self.linear = so.get("linear", self.linear).strip()
        if "accelerate" in so:
            flag = so["accelerate"].strip().lower()
            if flag not in ("true", "false", "yes", "no", "on", "off", "1", "0"):
                raise ConfigError(f"accelerate must be a boolean, got {flag!r}")
            self.accelerate = flag in ("true", "yes", "on", "1")
        out = cp["output"] if cp.has_section("output") else {}
        self.output_dir = Path(out.get("directory", str(self.output_dir)))
        if "formats" in out:
            self.formats = tuple(t.strip() for t in out["formats"].replace(",", " ").split())
        ce = cp["cell"] if cp.has_section("cell") else {}
        if "xi" in ce:
            self.cell_xi = tuple(_floats(ce["xi"]))

    def validate(self):
        for eps in self.epsilons:
            try:
                ThinDomainSpec(eps, self.profile)
            except H2ViolationError as exc:
                raise ConfigError(f"epsilon = {eps}: {exc}") from exc
        if self.bc not in ("dirichlet", "periodic"):
            raise ConfigError(f"unknown bc mode {self.bc!r} (dirichlet or periodic)")
        if not self.mu > 0:
            raise ConfigError("mu must be positive")
        if self.g < 0:
            raise ConfigError("g must be non-negative")
        if not self.tol > 0:
            raise ConfigError("solver tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.r_aug is not None and not self.r_aug > 0:
            raise ConfigError("r_aug must be positive")
        if len(self.cell_resolution) != 3 or min(self.cell_resolution) < 2:
            raise ConfigError("cell_resolution needs three integers >= 2")
        if self.radii is not None and (not self.radii or min(self.radii) <= 0
                                       or any(b <= a for a, b in zip(self.radii, self.radii[1:]))):
            raise ConfigError("radii must be positive and strictly increasing")
        if self.yield_fraction is not None and not self.yield_fraction > 0:
            raise ConfigError("yield_fraction must be positive")
        if len(self.cell_xi) != 2:
            raise ConfigError("[cell] xi needs two components")
        return self

    # -- derived quantities -------------------------------------------------
    def fingerprint(self):
        return hashlib.sha256(self.source_text.encode("utf-8")).hexdigest()[:16]

    def solver_options(self, epsilon=None):
        r = self.r_aug
        if r is not None and epsilon is not None:
            # r_aug is given relative to the cell-scale viscosity; the full problem uses mu eps^2
            r = r * epsilon ** 2
        return SolverOptions(r=r, tol=self.tol, max_iter=self.max_iter, linear=self.linear,
                             accelerate=self.accelerate)

    def darcy_options(self):
        return DarcyOptions(n=self.darcy_grid, periodic=self.bc == "periodic")

    def cell_options(self):
        return SolverOptions(r=self.r_aug, tol=self.tol, max_iter=self.max_iter, accelerate=self.accelerate)

    def force_scale(self):
        """``max |f|`` over a fine sample of the square."""
        s = np.linspace(0, 1, 65)
        X, Y = np.meshgrid(s, s, indexing="ij")
        f = self.force(np.column_stack([X.ravel(), Y.ravel()]))
        return float(np.hypot(f[:, 0], f[:, 1]).max())

    def resolve_g(self):
        """Yield coefficient; with ``yield_fraction`` set, ``g`` makes ``tau*(0) = yield_fraction * max|f|``."""
        if self.yield_fraction is None:
            return self.g
        fmax = self.force_scale()
        if fmax == 0:
            return 0.0
        # tau* is proportional to g at fixed mu
        tau1 = yield_threshold(0.0, self.profile, self.mu, 1.0, self.threshold_tol / fmax, self.cell_resolution,
                               r_max=20.0, opts=self.cell_options())
        return self.yield_fraction * fmax / tau1


def _read_force_table(path):
    if not path:
        raise ConfigError("tabulated force needs file")
    _, header, rows = read_csv(path)
    if header[:4] != ["x1", "x2", "f1", "f2"]:
        raise ConfigError("force table header must be x1,x2,f1,f2")
    data = np.array([[float(v) for v in r[:4]] for r in rows])
    g1, g2 = np.unique(data[:, 0]), np.unique(data[:, 1])
    vals = np.zeros((len(g1), len(g2), 2))
    i = np.searchsorted(g1, data[:, 0])
    j = np.searchsorted(g2, data[:, 1])
    vals[i, j] = data[:, 2:4]
    return (tuple(g1), tuple(g2), vals)


# ---------------------------------------------------------------------------
# pipeline pieces


def build_full_problem(cfg: ExperimentConfig, epsilon, g=None):
    spec = ThinDomainSpec(epsilon, cfg.profile)
    mesh = build_domain_mesh(spec, cell_mesh_for(cfg.profile, cfg.cell_resolution))
    params = FluidParams(cfg.mu, cfg.g if g is None else g, epsilon)
    return mesh, BinghamProblem.full(mesh, params, cfg.force, cfg.bc)


def solve_full(cfg, epsilon, g=None):
    mesh, problem = build_full_problem(cfg, epsilon, g)
    return mesh, problem, solve_bingham(problem, cfg.solver_options(epsilon))


def homogenized_table(cfg, g, r_max=None):
    fmax = cfg.force_scale()
    if cfg.radii is not None:
        r_max = cfg.radii[-1]
    r_max = r_max or cfg.r_max or max(2.0 * fmax, 1e-3)
    return build_mobility_table(cfg.profile, cfg.mu, g, radii=cfg.radii, n_angles=cfg.table_angles,
                                n_radii=cfg.table_radii, r_max=r_max, resolution=cfg.cell_resolution,
                                threshold_tol=cfg.threshold_tol, opts=cfg.cell_options())


@dataclass(eq=False)
class Limit:
    table: object
    darcy: object
    g: float


def homogenized_limit(cfg, g=None):
    """Mobility table and Darcy solution for the configured forcing."""
    g = cfg.resolve_g() if g is None else g
    if cfg.force.is_zero():
        return Limit(None, None, g)
    table = homogenized_table(cfg, g)
    darcy = solve_darcy(cfg.force, table, cfg.darcy_options())
    return Limit(table, darcy, g)


WEAK_BATTERY = ("1", "y1", "y3", "sin2pi_x1", "sin2pi_x2")


def _omega_cell_integrals(ix: CellIndexing, name):
    """``int_{omega_c} phi(x) dx`` for the macroscopic factor of each battery member."""
    h1, h2 = ix.epsilon * ix.L1, ix.epsilon * ix.L2
    i, j = np.meshgrid(np.arange(ix.n1), np.arange(ix.n2), indexing="ij")
    i, j = i.ravel(), j.ravel()
    if name == "sin2pi_x1":
        a, b = i * h1, (i + 1) * h1
        return h2 * (np.cos(2 * np.pi * a) - np.cos(2 * np.pi * b)) / (2 * np.pi)
    if name == "sin2pi_x2":
        a, b = j * h2, (j + 1) * h2
        return h1 * (np.cos(2 * np.pi * a) - np.cos(2 * np.pi * b)) / (2 * np.pi)
    return np.full(ix.n1 * ix.n2, h1 * h2)


def weak_functionals(diff: UnfoldedField):
    """``int_{omega x Y*} diff . Phi`` over the fixed battery, ten values (directions e1, e2)."""
    cm = diff.cell_mesh
    out = {}
    for name in WEAK_BATTERY:
        if name == "y1":
            mom = diff.cell_moments(cm.vertices[:, 0])
        elif name == "y3":
            mom = diff.cell_moments(cm.vertices[:, 2])
        else:
            mom = diff.cell_integrals()
        wx = _omega_cell_integrals(diff.indexing, name)
        total = wx @ mom
        for k in range(2):
            out[f"{name}_e{k + 1}"] = float(total[k])
    return out


def limit_unfolded(limit_field, uf: UnfoldedField):
    return UnfoldedField(uf.cell_mesh, uf.indexing, limit_field.chi_values, limit_field.chi_bubble)


def convergence_metrics(sol, mesh, limit: Limit, cfg):
    """Metrics of one full solve against the homogenized limit."""
    u_f, p_f, _ = unfold_all(sol)
    ix = u_f.indexing
    centres = ix.cell_centres()
    if limit.darcy is None and cfg.force.is_zero():
        lim = None
    else:
        lim = reconstruct_limit(cfg.force, limit.darcy, cfg.profile, cfg.mu, limit.g, centres, cfg.cell_resolution,
                                cfg.cell_options())
    if lim is None:
        diff = u_f
        pc = np.zeros(u_f.ncells)
    else:
        diff = u_f - limit_unfolded(lim, u_f)
        pc = lim.p
    e_weak = max(abs(v) for v in weak_functionals(diff).values())
    e_L2 = diff.l2_norm()
    pm = y_average(p_f)[:, 0]
    dp = (pm - pm.mean()) - (pc - pc.mean())
    e_p = float(np.sqrt(u_f.omega_measure() * np.sum(dp ** 2)))
    return {"e_weak": e_weak, "e_L2": e_L2, "e_p": e_p, "y_var": y_variance(p_f), "limit": lim, "unfolded": u_f}


@dataclass(eq=False)
class RunReport:
    rows: list
    config_fingerprint: str
    config_text: str
    flagged: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    # per-epsilon arrays that do not fit the CSV layout, e.g. the cell fluxes of T(u)_3
    extras: dict = field(default_factory=dict)
    limit: object = None  # the Limit the sweep was compared against, None when it failed

    def to_csv(self, path):
        comments = [f"config={self.config_fingerprint}"]
        comments += [f"flagged epsilon={e}: {msg}" for e, msg in self.flagged]
        rows = [[r[c] for c in REPORT_COLUMNS] for r in self.rows]
        return write_csv(path, REPORT_COLUMNS, rows, comments)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)


def run_convergence(cfg: ExperimentConfig, out_dir=None) -> RunReport:
    """Full solves over the epsilon list, unfolded and compared with the homogenized limit."""
    if len(cfg.epsilons) < 2:
        raise ConfigError("a convergence run needs at least two values of epsilon")
    t0 = time.perf_counter()
    rows, flagged, extras = [], [], {}
    limit_error = None
    g = cfg.resolve_g()
    try:
        limit = homogenized_limit(cfg, g)
    except (NonConvergenceError, ExtrapolationError, ThresholdAboveRangeError) as exc:
        # the full solves still run; only the comparison metrics are lost
        log.warning("homogenized limit failed: %s", exc)
        limit_error = f"limit: {exc}".replace("\n", " ")
        limit = None
    timings = {"limit": time.perf_counter() - t0}
    for eps in sorted(cfg.epsilons, reverse=True):
        t = time.perf_counter()
        row = {c: float("nan") for c in REPORT_COLUMNS}
        row["epsilon"] = eps
        try:
            mesh, problem, sol = solve_full(cfg, eps, g)
            rep = apriori_report(sol, eps)
            row.update(r1=rep["r1"], r2=rep["r2"], energy_res=sol.residuals["energy"], iters=sol.iterations)
            extras[eps] = {"vertical_flux": vertical_integrals(unfold(sol.u))[:, 2]}
            if limit is None:
                flagged.append((eps, limit_error))
            else:
                m = convergence_metrics(sol, mesh, limit, cfg)
                row.update(e_weak=m["e_weak"], e_L2=m["e_L2"], e_p=m["e_p"], y_var=m["y_var"])
        except (NonConvergenceError, ThinBinghamError) as exc:
            log.warning("epsilon=%s failed: %s", eps, exc)
            flagged.append((eps, str(exc).replace("\n", " ")))
            row["iters"] = -1
        row["seconds"] = time.perf_counter() - t
        rows.append(row)
        log.info("epsilon=%s: %s", eps, {k: row[k] for k in REPORT_COLUMNS})
    report = RunReport(rows, cfg.fingerprint(), cfg.source_text, flagged, timings, extras, limit)
    if out_dir is not None:
        report.to_csv(Path(out_dir) / "report.csv")
    return report


# ---------------------------------------------------------------------------
# verification ledger


@dataclass
class LedgerRow:
    check: str
    measured: float
    threshold: float
    passed: bool

    def as_row(self):
        return [self.check, float(self.measured), float(self.threshold), bool(self.passed)]


def _le(check, measured, threshold):
    measured = float(measured)
    return LedgerRow(check, measured, threshold, bool(np.isfinite(measured) and measured <= threshold))


def unfolding_identity_defects(sol, mesh):
    """Relative defects of the exact unfolding identities on a solved velocity and two test fields."""
    eps = mesh.epsilon
    prof = mesh.spec.profile
    L = prof.L1 * prof.L2
    u = sol.u
    uf = unfold(u)
    vol = float(np.sum(mesh.volumes()))
    # integral identity, normalised by the Cauchy-Schwarz bound of either side
    lhs = uf.integral() / L
    rhs = u.integral() / eps
    bound = np.sqrt(vol / eps) * scaled_norms(u, eps)["L2"] + np.finfo(float).tiny
    d_int = float(np.max(np.abs(lhs - rhs)) / bound)
    # norm identity
    n_lhs = uf.l2_norm()
    n_rhs = np.sqrt(L) * scaled_norms(u, eps)["L2"]
    d_norm = abs(n_lhs - n_rhs) / max(n_rhs, np.finfo(float).tiny)
    # derivative and nonlinear identities, element by element
    G = unfold_gradient(u)
    R = reference_gradient(uf)
    gscale = max(float(np.abs(R).max()), np.finfo(float).tiny)
    d_grad = float(np.abs(eps * G.values - R).max() / gscale)
    d_nonlin = float(np.abs(eps * G.norms() - np.sqrt(np.sum(R ** 2, axis=(-2, -1)))).max() / gscale)
    # product rule on coordinate fields
    x1 = unfold(u.space.interpolate(lambda x: x[:, :1]))
    x3 = unfold(u.space.interpolate(lambda x: x[:, 2:3]))
    prod = unfold(u.space.interpolate(lambda x: x[:, :1] * x[:, 2:3]))
    d_prod = float(np.abs(x1.multiply(x3).values - prod.values).max() / max(np.abs(prod.values).max(), 1e-300))
    return {"integral": d_int, "norm": d_norm, "derivative": d_grad, "nonlinear": d_nonlin, "product": d_prod}


def run_verify(cfg: ExperimentConfig, out_dir=None):
    """Exact-identity suite; returns the ledger rows (and writes ``ledger.csv``)."""
    rows = []
    opts = cfg.cell_options()
    xi = np.asarray(cfg.cell_xi, dtype=float)
    cs = solve_cell(xi, cfg.profile, cfg.mu, cfg.g, cfg.cell_resolution, opts)
    rows.append(_le("cell_energy_equality", cs.residuals["energy"], 1e-6))
    rows.append(_le("cell_vertical_flux", cs.vertical_flux_defect(), 1e-6))
    rows.append(_le("cell_divergence", cs.residuals["divergence"], cfg.tol))
    neg = solve_cell(-xi, cfg.profile, cfg.mu, cfg.g, cfg.cell_resolution, opts)
    scale = max(float(np.abs(cs.A_value).max()), np.finfo(float).tiny)
    rows.append(_le("cell_oddness", float(np.abs(cs.A_value + neg.A_value).max()) / scale, 1e-6))
    single = LimitField(np.zeros((1, 2)), xi[None], cs.chi.at_vertices()[None], cs.chi.bubble[None], np.zeros(1),
                        cs.A_value[None])
    rows.append(_le("cell_inequality", limit_inequality_defect(single, cfg.profile, cfg.mu, cfg.g,
                                                               cfg.cell_resolution), 1e-6))
    G1 = cfg.profile.G1
    for eps in sorted(cfg.epsilons, reverse=True):
        tag = f"eps={eps:g}"
        try:
            mesh, problem, sol = solve_full(cfg, eps)
        except NonConvergenceError as exc:
            rows.append(LedgerRow(f"solve_{tag}", float("nan"), cfg.max_iter, False))
            log.warning("verify: %s", exc)
            continue
        for name, val in unfolding_identity_defects(sol, mesh).items():
            rows.append(_le(f"unfold_{name}_{tag}", val, 1e-12))
        rows.append(_le(f"energy_equality_{tag}", energy_residual(sol, problem), 1e-6))
        # |||u||| <= (2 G1 / pi) eps |||grad u||| for fields vanishing on the bottom
        rows.append(_le(f"poincare_{tag}", poincare_ratio(sol.u, eps), 2 * G1 / np.pi))
        # energy equality plus the Poincare bound give r1 <= 2 G1 |||f||| / (pi mu) and r2 <= (2 G1 / pi) r1
        fnorm = scaled_norms(_force_field(problem), eps)["L2"]
        rep = apriori_report(sol, eps)
        b1 = 2 * G1 * fnorm / (np.pi * cfg.mu)
        rows.append(_le(f"apriori_r1_{tag}", rep["r1"], b1 * (1 + 1e-9)))
        rows.append(_le(f"apriori_r2_{tag}", rep["r2"], 2 * G1 / np.pi * b1 * (1 + 1e-9)))
    if out_dir is not None:
        write_csv(Path(out_dir) / "ledger.csv", LEDGER_COLUMNS, [r.as_row() for r in rows],
                  [f"config={cfg.fingerprint()}"])
    return rows


def _force_field(problem):
    """P1 interpolant of the force, the field the discrete load is built from."""
    s = problem.space
    return Field(s, s.dof_values(problem.force_at_vertices()), None)
