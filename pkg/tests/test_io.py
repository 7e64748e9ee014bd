"""Legacy VTK and CSV writers."""
from __future__ import annotations

import numpy as np

from thinbingham.io import read_csv, read_vtk_header, write_csv, write_vtk


def test_vtk_tetra_file(tmp_path):
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    path = write_vtk(tmp_path / "sub" / "t.vtk", pts, [[0, 1, 2, 3]], point_data={"s": np.arange(4.0),
                     "v": np.ones((4, 3))}, cell_data={"c": [7.0], "w": np.ones((1, 2))})
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version 3.0\n")
    assert "ASCII" in text and "DATASET UNSTRUCTURED_GRID" in text
    assert "CELL_TYPES 1\n10\n" in text
    assert "SCALARS s double 1" in text and "VECTORS v double" in text and "VECTORS w double" in text
    assert read_vtk_header(path) == (4, 1)


def test_vtk_pads_planar_points(tmp_path):
    path = write_vtk(tmp_path / "tri.vtk", [[0.0, 0], [1, 0], [0, 1]], [[0, 1, 2]], cell_type=5)
    lines = path.read_text().splitlines()
    assert lines[5] == "0.0 0.0 0.0"
    assert "CELL_TYPES 1" in lines and "5" in lines


def test_csv_roundtrip(tmp_path):
    path = write_csv(tmp_path / "a.csv", ["name", "value", "ok"], [("x", 0.1, True), ("y", 2, False)],
                     ["fingerprint=abc"])
    comments, header, rows = read_csv(path)
    assert comments == ["fingerprint=abc"]
    assert header == ["name", "value", "ok"]
    assert rows == [["x", "0.1", "true"], ["y", "2", "false"]]
