"""Command line entry point.

Every subcommand reads an INI experiment file (``--config``) and writes its
artifacts under ``--out`` (default: the ``[output] directory`` entry).

Exit codes: 0 on success, 1 when a solver fails to converge, 2 on a
configuration or usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigError, ExtrapolationError, MeshError, NonConvergenceError, ParameterError, ProfileError,
                     ThinBinghamError, ThresholdAboveRangeError)

log = logging.getLogger("thinbingham")

EXIT_OK, EXIT_NONCONVERGENCE, EXIT_CONFIG = 0, 1, 2


def _eps_tag(eps):
    return f"eps{eps:g}"


def _wants(cfg, fmt):
    return fmt in cfg.formats


def cmd_mesh(cfg, out, args=None):
    from .geometry import ThinDomainSpec, build_domain_mesh
    from .homogenization import cell_mesh_for
    from .io import write_csv, write_vtk

    cm = cell_mesh_for(cfg.profile, cfg.cell_resolution)
    written = [write_vtk(out / "cell_mesh.vtk", cm.vertices, cm.tets)]
    rows = [("cell", "", cm.nv, cm.nt)]
    for eps in cfg.epsilons:
        mesh = build_domain_mesh(ThinDomainSpec(eps, cfg.profile), cm)
        if _wants(cfg, "vtk"):
            written.append(write_vtk(out / f"mesh_{_eps_tag(eps)}.vtk", mesh.vertices, mesh.tets,
                                     cell_data={"cell_id": np.repeat(np.arange(mesh.ncells), cm.nt)}))
        rows.append(("domain", eps, mesh.nv, mesh.nt))
    written.append(write_csv(out / "mesh.csv", ["mesh", "epsilon", "vertices", "tetrahedra"], rows,
                             [f"profile={cfg.profile.fingerprint()}"]))
    return written


def cmd_solve_vi(cfg, out, args=None):
    from .harness import solve_full
    from .io import write_history_csv, write_vtk
    from .vi import energy_residual, rigid_zones

    g = cfg.resolve_g()
    written = []
    for eps in cfg.epsilons:
        mesh, problem, sol = solve_full(cfg, eps, g)
        diag = rigid_zones(sol)
        tag = _eps_tag(eps)
        if _wants(cfg, "vtk"):
            written.append(write_vtk(out / f"solution_{tag}.vtk", mesh.vertices, mesh.tets,
                                     point_data={"u": sol.u.at_vertices(), "p": sol.p.at_vertices()[:, 0]},
                                     cell_data={"plug": diag.plug, "DII": diag.DII}))
        written.append(write_history_csv(out / f"history_{tag}.csv", sol.history))
        log.info("epsilon=%g: %d iterations, energy defect %.2e, plug fraction %.3f", eps, sol.iterations,
                 energy_residual(sol, problem), diag.plug_fraction)
    return written


def cmd_cell(cfg, out, args=None):
    from .homogenization import solve_cell
    from .io import write_csv, write_vtk

    cs = solve_cell(cfg.cell_xi, cfg.profile, cfg.mu, cfg.resolve_g(), cfg.cell_resolution, cfg.cell_options())
    cm = cs.chi.space.mesh
    written = []
    if _wants(cfg, "vtk"):
        written.append(write_vtk(out / "cell.vtk", cm.vertices, cm.tets, point_data={"chi": cs.chi.at_vertices()}))
    rows = [("xi1", cs.xi[0]), ("xi2", cs.xi[1]), ("A1", cs.A_value[0]), ("A2", cs.A_value[1]),
            ("plug_fraction", cs.plug_fraction), ("iterations", cs.iterations)]
    rows += [(k, float(v)) for k, v in sorted(cs.residuals.items()) if k != "converged"]
    written.append(write_csv(out / "cell.csv", ["quantity", "value"], rows, [f"profile={cfg.profile.fingerprint()}"]))
    return written


def _table(cfg, out, args):
    from .harness import homogenized_table
    from .homogenization import MobilityTable

    if getattr(args, "table", None):
        return MobilityTable.from_csv(args.table), []
    table = homogenized_table(cfg, cfg.resolve_g())
    return table, [table.to_csv(out / "mobility.csv")]


def cmd_mobility(cfg, out, args=None):
    _, written = _table(cfg, out, args)
    return written


def _darcy(cfg, out, args):
    from .homogenization import solve_darcy

    table, written = _table(cfg, out, args)
    darcy = solve_darcy(cfg.force, table, cfg.darcy_options())
    if _wants(cfg, "vtk"):
        written.append(darcy.to_vtk(out / "darcy.vtk"))
    written.append(darcy.to_csv(out / "darcy.csv"))
    return table, darcy, written


def cmd_darcy(cfg, out, args=None):
    return _darcy(cfg, out, args)[2]


def cmd_homogenize(cfg, out, args=None):
    from .homogenization import reconstruct_limit
    from .io import write_csv
    from .unfolding import CellIndexing

    table, darcy, written = _darcy(cfg, out, args)
    eps = min(cfg.epsilons) if cfg.epsilons else 0.25
    p = cfg.profile
    ix = CellIndexing(eps, p.L1, p.L2, int(round(1 / (eps * p.L1))), int(round(1 / (eps * p.L2))))
    lim = reconstruct_limit(cfg.force, darcy, cfg.profile, cfg.mu, cfg.resolve_g(), ix.cell_centres(),
                            cfg.cell_resolution, cfg.cell_options())
    rows = [(c[0], c[1], x[0], x[1], v[0], v[1], q) for c, x, v, q in zip(lim.centres, lim.xi, lim.V, lim.p)]
    written.append(write_csv(out / "limit.csv", ["x1", "x2", "xi1", "xi2", "V1", "V2", "p"], rows,
                             [f"epsilon={eps:g}", table.fingerprint_line()]))
    return written


def cmd_converge(cfg, out, args=None):
    from .harness import run_convergence

    report = run_convergence(cfg, out)
    for row in report.rows:
        log.info("epsilon=%g e_weak=%.3e e_p=%.3e y_var=%.3e", row["epsilon"], row["e_weak"], row["e_p"],
                 row["y_var"])
    if report.flagged:
        raise NonConvergenceError(f"{len(report.flagged)} sweep rows flagged, see report.csv")
    return [out / "report.csv"]


def cmd_verify(cfg, out, args=None):
    from .harness import run_verify

    rows = run_verify(cfg, out)
    failed = [r.check for r in rows if not r.passed]
    log.info("%d ledger rows, %d failing%s", len(rows), len(failed), f": {failed}" if failed else "")
    return [out / "ledger.csv"]


COMMANDS = {
    "mesh": (cmd_mesh, "build the cell and domain meshes"),
    "solve-vi": (cmd_solve_vi, "solve the full variational inequality for each epsilon"),
    "cell": (cmd_cell, "solve one cell problem at [cell] xi"),
    "mobility": (cmd_mobility, "tabulate the mobility map"),
    "darcy": (cmd_darcy, "solve the nonlinear Darcy problem"),
    "homogenize": (cmd_homogenize, "mobility table, Darcy solve and limit reconstruction"),
    "converge": (cmd_converge, "epsilon sweep against the homogenized limit"),
    "verify": (cmd_verify, "exact-identity verification ledger"),
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors already; only the message is customised."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="thinbingham", description="Bingham flow in thin rough domains: full solves, "
                                                      "cell problems and the homogenized Darcy limit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, type=Path, help="INI experiment file")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides [output] directory)")
        p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name in ("mobility", "darcy", "homogenize"):
            p.add_argument("--table", type=Path, default=None, help="reuse an existing mobility.csv")
    return parser


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from .harness import ExperimentConfig

    func = COMMANDS[args.command][0]
    try:
        limiter = _limit_threads(args.threads)
        cfg = ExperimentConfig.from_file(args.config)
        out = Path(args.out) if args.out is not None else cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        try:
            written = func(cfg, out, args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (ConfigError, ProfileError, MeshError, ParameterError) as exc:
        print(f"thinbingham {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, ExtrapolationError, ThresholdAboveRangeError) as exc:
        print(f"thinbingham {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except ThinBinghamError as exc:
        print(f"thinbingham {args.command}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
