"""Legacy ASCII VTK and CSV writers."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

VTK_TETRA = 10
VTK_TRIANGLE = 5


def _fmt(x):
    return repr(float(x))


def _write_data(fh, kind, n, data):
    if not data:
        return
    fh.write(f"{kind} {n}\n")
    for name, arr in data.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1 or arr.shape[1] == 1:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(_fmt(v) for v in arr.ravel()) + "\n")
        elif arr.shape[1] == 3:
            fh.write(f"VECTORS {name} double\n")
            fh.write("\n".join(" ".join(_fmt(v) for v in row) for row in arr) + "\n")
        elif arr.shape[1] == 2:
            pad = np.column_stack([arr, np.zeros(len(arr))])
            fh.write(f"VECTORS {name} double\n")
            fh.write("\n".join(" ".join(_fmt(v) for v in row) for row in pad) + "\n")
        else:
            fh.write(f"FIELD {name}_field 1\n{name} {arr.shape[1]} {len(arr)} double\n")
            fh.write("\n".join(" ".join(_fmt(v) for v in row) for row in arr) + "\n")


def write_vtk(path, points, cells, cell_type=VTK_TETRA, point_data=None, cell_data=None, title="thinbingham"):
    """Write an unstructured grid in the legacy ASCII format.

    Parameters
    ----------
    points : (n, 2) or (n, 3) array
        Two-dimensional points are padded with ``z = 0``.
    cells : (m, k) int array
        Connectivity, all of one VTK type ``cell_type``.
    point_data, cell_data : dict of name -> array, optional
        Scalars ``(n,)`` or vectors ``(n, 2|3)``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = np.asarray(points, dtype=float)
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    cells = np.asarray(cells, dtype=np.int64)
    k = cells.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(pts)} double\n")
        fh.write("\n".join(" ".join(_fmt(v) for v in row) for row in pts) + "\n")
        fh.write(f"CELLS {len(cells)} {len(cells) * (k + 1)}\n")
        fh.write("\n".join(f"{k} " + " ".join(str(int(v)) for v in row) for row in cells) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("\n".join([str(cell_type)] * len(cells)) + "\n")
        _write_data(fh, "POINT_DATA", len(pts), point_data or {})
        _write_data(fh, "CELL_DATA", len(cells), cell_data or {})
    return path


def read_vtk_header(path):
    """Return ``(n_points, n_cells)`` of a legacy file written by :func:`write_vtk`."""
    npts = ncells = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("POINTS"):
                npts = int(line.split()[1])
            elif line.startswith("CELLS"):
                ncells = int(line.split()[1])
    return npts, ncells


def write_csv(path, header, rows, comments=()):
    """Write ``rows`` under ``header``; ``comments`` become leading ``#`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    """Return ``(comments, header, rows)`` with rows as lists of strings."""
    comments, lines = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            elif line.strip():
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    return comments, header, [row for row in reader]


def write_history_csv(path, history):
    """Residual history with columns ``iter,primal,div,energy``; ``energy`` is the convex energy ``J``."""
    rows = [(h["iter"], h.get("primal", 0.0), h.get("div", 0.0), h.get("J", float("nan"))) for h in history]
    return write_csv(path, ["iter", "primal", "div", "energy"], rows)
