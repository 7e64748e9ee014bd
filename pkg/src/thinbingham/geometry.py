"""Rough periodic profiles and block-structured meshes of the thin layer.

The reference cell ``Y* = {(y1, y2, y3): (y1, y2) in Y, 0 < y3 < G(y1, y2)}``
is meshed by a terrain-following structured grid: a box grid on
``Y x (0, 1)`` whose vertical coordinate ``s`` is mapped to ``y3 = s G(y)``.
Each hexahedron is split into six Kuhn tetrahedra sharing its main
diagonal, which gives a conforming mesh whose lateral faces match under
translation by a period.

The thin domain mesh is a tiling of ``n1 x n2`` copies of the cell mesh,
each mapped by ``y -> eps * ((i L1, j L2, 0) + y)``. Vertex and tetrahedron
numbering inside every block follows the cell mesh, which is what makes the
discrete unfolding operator an exact reindexing.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import H2ViolationError, MeshError, ProfileError

PROFILE_KINDS = ("flat", "sinusoidal", "tabulated")

# The six Kuhn tetrahedra of the unit cube, as sequences of axis steps.
_KUHN_PERMUTATIONS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


@dataclass(frozen=True, eq=False)
class RoughProfile:
    """Y-periodic height function ``G`` of the rough top boundary.

    ``flat``: ``G = height``.
    ``sinusoidal``: ``G = height + amplitude sin(2 pi y1/L1) sin(2 pi y2/L2)``.
    ``tabulated``: bilinear interpolation of ``samples[k1, k2]`` given at
    ``(k1 L1/n1, k2 L2/n2)``, extended periodically.
    """

    kind: str = "flat"
    L1: float = 1.0
    L2: float = 1.0
    height: float = 1.0
    amplitude: float = 0.0
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ProfileError(f"unknown profile kind {self.kind!r}")
        if not (self.L1 > 0 and self.L2 > 0):
            raise ProfileError("periods L1, L2 must be positive")
        if self.kind == "tabulated":
            if self.samples is None:
                raise ProfileError("tabulated profile needs samples")
            s = np.array(self.samples, dtype=float)
            if s.ndim != 2 or min(s.shape) < 1:
                raise ProfileError("samples must be a non-empty 2D array")
            if not np.all(np.isfinite(s)) or np.any(s <= 0.0):
                raise ProfileError("tabulated profile has non-positive samples")
            s.setflags(write=False)
            object.__setattr__(self, "samples", s)
        else:
            if self.height <= 0:
                raise ProfileError("profile height must be positive")
            if self.kind == "sinusoidal" and abs(self.amplitude) >= self.height:
                raise ProfileError("amplitude must be smaller than the mean height")

    @property
    def G0(self) -> float:
        if self.kind == "flat":
            return float(self.height)
        if self.kind == "sinusoidal":
            return float(self.height - abs(self.amplitude))
        return float(self.samples.min())

    @property
    def G1(self) -> float:
        if self.kind == "flat":
            return float(self.height)
        if self.kind == "sinusoidal":
            return float(self.height + abs(self.amplitude))
        return float(self.samples.max())

    @property
    def mean_height(self) -> float:
        """Exact mean of G over Y (of the interpolant, for tabulated data)."""
        if self.kind == "tabulated":
            return float(self.samples.mean())
        return float(self.height)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.kind}|{self.L1!r}|{self.L2!r}|{self.height!r}|{self.amplitude!r}".encode())
        if self.samples is not None:
            h.update(np.ascontiguousarray(self.samples).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def flat(cls, height=1.0, L1=1.0, L2=1.0):
        return cls("flat", L1=L1, L2=L2, height=height)

    @classmethod
    def sinusoidal(cls, amplitude, height=1.0, L1=1.0, L2=1.0):
        return cls("sinusoidal", L1=L1, L2=L2, height=height, amplitude=amplitude)

    @classmethod
    def from_csv(cls, path, L1=None, L2=None):
        """Read a tabulated profile from a CSV with header ``y1,y2,G``.

        Rows must cover a uniform grid ``y1 in {0, h1, ..}`` x ``y2 in
        {0, h2, ..}`` over one period (the closing row ``y = L`` is optional
        and must then repeat the opening row).
        """
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(row for row in fh if not row.startswith("#"))
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["y1", "y2", "G"]:
                raise ProfileError("profile CSV must have header y1,y2,G")
            rows = [(float(r["y1"]), float(r["y2"]), float(r["G"])) for r in reader]
        if not rows:
            raise ProfileError("profile CSV is empty")
        data = np.array(rows)
        y1s = np.unique(data[:, 0])
        y2s = np.unique(data[:, 1])
        L1 = float(L1) if L1 is not None else _period_from_axis(y1s)
        L2 = float(L2) if L2 is not None else _period_from_axis(y2s)
        y1s = y1s[y1s < L1 - 1e-12 * L1]
        y2s = y2s[y2s < L2 - 1e-12 * L2]
        n1, n2 = len(y1s), len(y2s)
        if not (np.allclose(y1s, np.arange(n1) * L1 / n1) and np.allclose(y2s, np.arange(n2) * L2 / n2)):
            raise ProfileError("profile samples are not on a uniform periodic grid")
        samples = np.full((n1, n2), np.nan)
        k1 = np.rint(data[:, 0] / (L1 / n1)).astype(int) % n1
        k2 = np.rint(data[:, 1] / (L2 / n2)).astype(int) % n2
        samples[k1, k2] = data[:, 2]
        if np.any(np.isnan(samples)):
            raise ProfileError("profile CSV does not cover the whole grid")
        return cls("tabulated", L1=L1, L2=L2, samples=samples)

    def to_csv(self, path, n=(16, 16)):
        """Write ``G`` sampled on an ``n``-point periodic grid."""
        n1, n2 = n
        y1 = np.arange(n1) * self.L1 / n1
        y2 = np.arange(n2) * self.L2 / n2
        Y1, Y2 = np.meshgrid(y1, y2, indexing="ij")
        G = eval_profile(self, np.stack([Y1.ravel(), Y2.ravel()], axis=-1))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["y1", "y2", "G"])
            for a, b, c in zip(Y1.ravel(), Y2.ravel(), G):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


def _period_from_axis(vals):
    if len(vals) < 2:
        raise ProfileError("cannot infer period from a single sample; pass L1/L2")
    h = np.diff(vals).min()
    if np.isclose(vals[-1] + h, (len(vals)) * h):
        return float(len(vals) * h)
    return float(vals[-1])


def eval_profile(profile: RoughProfile, y) -> np.ndarray | float:
    """Evaluate ``G`` at horizontal points ``y`` (shape ``(..., 2)``).

    Points are reduced modulo the periods first, so ``G`` is exactly
    periodic. A scalar is returned for a single point.
    """
    pts = np.asarray(y, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    y1 = np.mod(pts[..., 0], profile.L1)
    y2 = np.mod(pts[..., 1], profile.L2)
    if profile.kind == "flat":
        out = np.full(y1.shape, float(profile.height))
    elif profile.kind == "sinusoidal":
        out = profile.height + profile.amplitude * (
            np.sin(2.0 * np.pi * y1 / profile.L1) * np.sin(2.0 * np.pi * y2 / profile.L2)
        )
    else:
        s = profile.samples
        n1, n2 = s.shape
        t1 = y1 / profile.L1 * n1
        t2 = y2 / profile.L2 * n2
        k1 = np.minimum(np.floor(t1).astype(int), n1 - 1)
        k2 = np.minimum(np.floor(t2).astype(int), n2 - 1)
        a = t1 - k1
        b = t2 - k2
        k1p = (k1 + 1) % n1
        k2p = (k2 + 1) % n2
        out = ((1 - a) * (1 - b) * s[k1, k2] + a * (1 - b) * s[k1p, k2]
               + (1 - a) * b * s[k1, k2p] + a * b * s[k1p, k2p])
    # rounding guard only: the formulas already respect the bounds
    out = np.clip(out, profile.G0, profile.G1)
    return float(out[0]) if single else out


@dataclass(eq=False)
class ThinDomainSpec:
    """Thin domain ``0 < x3 < eps G(x/eps)`` over the unit square.

    ``1/(eps L1)`` and ``1/(eps L2)`` must be integers, so the square is
    tiled by whole periodicity cells.
    """

    epsilon: float
    profile: RoughProfile
    n1: int = field(init=False)
    n2: int = field(init=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise H2ViolationError("epsilon must be positive")
        self.n1 = _exact_count(1.0 / (self.epsilon * self.profile.L1), "1/(eps L1)")
        self.n2 = _exact_count(1.0 / (self.epsilon * self.profile.L2), "1/(eps L2)")

    @property
    def ncells(self) -> int:
        return self.n1 * self.n2


def _exact_count(value, label):
    n = int(round(value))
    if n < 1 or abs(value - n) > 1e-9 * max(1.0, value):
        raise H2ViolationError(
            f"{label} = {value:.12g} is not an integer: the square must hold whole cells"
        )
    return n


@dataclass(eq=False)
class CellMesh:
    """Terrain-following tetrahedral mesh of the reference cell ``Y*``."""

    profile: RoughProfile
    resolution: tuple
    vertices: np.ndarray  # (nv, 3)
    tets: np.ndarray  # (nt, 4)
    grid_index: np.ndarray  # (nv, 3) integer (l1, l2, l3)
    periodic_master: np.ndarray  # (nv,) vertex id of the periodic representative

    @property
    def nv(self) -> int:
        return len(self.vertices)

    @property
    def nt(self) -> int:
        return len(self.tets)

    @property
    def bottom(self) -> np.ndarray:
        return self.grid_index[:, 2] == 0

    @property
    def top(self) -> np.ndarray:
        return self.grid_index[:, 2] == self.resolution[2]

    def lateral(self, axis: int, side: int) -> np.ndarray:
        """Mask of the lateral face ``y_axis = 0`` (side 0) or ``= L`` (side 1)."""
        m = self.resolution[axis]
        return self.grid_index[:, axis] == (0 if side == 0 else m)

    def periodic_pairs(self, axis: int) -> np.ndarray:
        """``(k, 2)`` array of vertex pairs (face ``L``, face ``0``) along ``axis``."""
        hi = np.flatnonzero(self.lateral(axis, 1))
        shift = np.zeros(3, dtype=int)
        shift[axis] = self.resolution[axis]
        m1, m2, m3 = self.resolution
        g = self.grid_index[hi] - shift
        lo = (g[:, 0] * (m2 + 1) + g[:, 1]) * (m3 + 1) + g[:, 2]
        return np.stack([hi, lo], axis=1)

    def volumes(self) -> np.ndarray:
        return tet_volumes(self.vertices, self.tets)


@dataclass(eq=False)
class DomainMesh:
    """Mesh of the thin domain made of ``n1 x n2`` mapped cell meshes.

    ``block_vertices[c]`` maps cell-mesh vertex ids to domain vertex ids for
    the cell ``c = i * n2 + j``; tetrahedron ``k`` of cell ``c`` is domain
    tetrahedron ``c * nt_cell + k``.
    """

    spec: ThinDomainSpec
    cell_mesh: CellMesh
    vertices: np.ndarray
    tets: np.ndarray
    grid_index: np.ndarray  # (nv, 3) global structured index
    block_vertices: np.ndarray  # (ncells, nv_cell)
    cell_ij: np.ndarray  # (ncells, 2)

    @property
    def epsilon(self) -> float:
        return self.spec.epsilon

    @property
    def nv(self) -> int:
        return len(self.vertices)

    @property
    def nt(self) -> int:
        return len(self.tets)

    @property
    def ncells(self) -> int:
        return len(self.cell_ij)

    @property
    def shape(self):
        """Global structured vertex grid dimensions ``(N1+1, N2+1, m3+1)``."""
        m1, m2, m3 = self.cell_mesh.resolution
        return (self.spec.n1 * m1 + 1, self.spec.n2 * m2 + 1, m3 + 1)

    def block_tets(self, c: int) -> np.ndarray:
        nt = self.cell_mesh.nt
        return np.arange(c * nt, (c + 1) * nt)

    def cell_map(self, c: int, y: np.ndarray) -> np.ndarray:
        """Affine map of cell-local points into the thin domain."""
        i, j = self.cell_ij[c]
        eps = self.spec.epsilon
        p = self.spec.profile
        out = np.empty_like(y, dtype=float)
        out[..., 0] = eps * (i * p.L1 + y[..., 0])
        out[..., 1] = eps * (j * p.L2 + y[..., 1])
        out[..., 2] = eps * y[..., 2]
        return out

    @property
    def bottom(self) -> np.ndarray:
        return self.grid_index[:, 2] == 0

    @property
    def top(self) -> np.ndarray:
        return self.grid_index[:, 2] == self.cell_mesh.resolution[2]

    @property
    def lateral(self) -> np.ndarray:
        N1, N2, _ = self.shape
        g = self.grid_index
        return (g[:, 0] == 0) | (g[:, 0] == N1 - 1) | (g[:, 1] == 0) | (g[:, 1] == N2 - 1)

    def periodic_master(self) -> np.ndarray:
        """Representative vertex when the lateral sides of the square are identified."""
        N1, N2, N3 = self.shape
        g = self.grid_index
        g1 = g[:, 0] % (N1 - 1)
        g2 = g[:, 1] % (N2 - 1)
        return (g1 * N2 + g2) * N3 + g[:, 2]

    def volumes(self) -> np.ndarray:
        return tet_volumes(self.vertices, self.tets)


def tet_volumes(vertices, tets) -> np.ndarray:
    x = vertices[tets]
    d = x[:, 1:, :] - x[:, :1, :]
    return np.linalg.det(d) / 6.0


def _structured_tets(m1, m2, m3):
    """Kuhn tetrahedra of an ``m1 x m2 x m3`` box grid, hexahedron-major."""
    a, b, c = np.meshgrid(np.arange(m1), np.arange(m2), np.arange(m3), indexing="ij")
    base = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)
    strides = np.array([(m2 + 1) * (m3 + 1), m3 + 1, 1])
    tets = np.empty((len(base), 6, 4), dtype=np.int64)
    for k, perm in enumerate(_KUHN_PERMUTATIONS):
        corner = base.copy()
        ids = [corner @ strides]
        for axis in perm:
            corner = corner.copy()
            corner[:, axis] += 1
            ids.append(corner @ strides)
        t = np.stack(ids, axis=1)
        if _perm_parity(perm) == 1:
            t = t[:, [0, 2, 1, 3]]
        tets[:, k, :] = t
    return tets.reshape(-1, 4)


def _perm_parity(perm):
    p = list(perm)
    parity = 0
    for i in range(len(p)):
        for j in range(i + 1, len(p)):
            if p[i] > p[j]:
                parity ^= 1
    return parity


def build_cell_mesh(profile: RoughProfile, resolution=(8, 8, 8)) -> CellMesh:
    """Mesh ``Y*`` with an ``m1 x m2 x m3`` terrain-following grid."""
    try:
        m1, m2, m3 = (int(v) for v in resolution)
    except (TypeError, ValueError) as exc:
        raise MeshError("resolution must be three integers") from exc
    if min(m1, m2, m3) < 2:
        raise MeshError(f"resolution {resolution} must be at least 2 in every direction")
    l1, l2, l3 = np.meshgrid(np.arange(m1 + 1), np.arange(m2 + 1), np.arange(m3 + 1), indexing="ij")
    grid = np.stack([l1.ravel(), l2.ravel(), l3.ravel()], axis=1)
    y1 = _axis_coords(grid[:, 0], m1, profile.L1)
    y2 = _axis_coords(grid[:, 1], m2, profile.L2)
    sigma = grid[:, 2] / m3
    G = eval_profile(profile, np.stack([y1, y2], axis=1))
    verts = np.stack([y1, y2, sigma * G], axis=1)
    tets = _structured_tets(m1, m2, m3)
    vol = tet_volumes(verts, tets)
    if np.any(vol <= 0):
        raise MeshError(f"{int(np.sum(vol <= 0))} degenerate or inverted elements")
    master = ((grid[:, 0] % m1) * (m2 + 1) + grid[:, 1] % m2) * (m3 + 1) + grid[:, 2]
    return CellMesh(profile, (m1, m2, m3), verts, tets, grid, master)


def _axis_coords(idx, m, L):
    out = L * idx / m
    out[idx == m] = L
    return out


def build_domain_mesh(spec: ThinDomainSpec, cell_mesh: CellMesh) -> DomainMesh:
    """Tile ``eps``-scaled copies of ``cell_mesh`` over the unit square."""
    if cell_mesh.profile is not spec.profile and cell_mesh.profile.fingerprint() != spec.profile.fingerprint():
        raise MeshError("cell mesh was built for a different profile")
    m1, m2, m3 = cell_mesh.resolution
    n1, n2 = spec.n1, spec.n2
    N2, N3 = n2 * m2 + 1, m3 + 1
    nv = (n1 * m1 + 1) * N2 * N3
    verts = np.empty((nv, 3))
    cell_ij = np.array([(i, j) for i in range(n1) for j in range(n2)], dtype=np.int64).reshape(-1, 2)
    gl = cell_mesh.grid_index
    blocks = np.empty((len(cell_ij), cell_mesh.nv), dtype=np.int64)
    mesh = DomainMesh(spec, cell_mesh, verts, None, None, blocks, cell_ij)
    for c, (i, j) in enumerate(cell_ij):
        ids = ((i * m1 + gl[:, 0]) * N2 + (j * m2 + gl[:, 1])) * N3 + gl[:, 2]
        blocks[c] = ids
        verts[ids] = mesh.cell_map(c, cell_mesh.vertices)
    mesh.tets = blocks[:, cell_mesh.tets].reshape(-1, 4)
    g1, g2, g3 = np.meshgrid(np.arange(n1 * m1 + 1), np.arange(N2), np.arange(N3), indexing="ij")
    mesh.grid_index = np.stack([g1.ravel(), g2.ravel(), g3.ravel()], axis=1)
    return mesh


def rescaled_mesh_vertices(mesh: DomainMesh) -> np.ndarray:
    """Vertices of the vertically stretched domain ``0 < y3 < G(x/eps)``."""
    v = mesh.vertices.copy()
    v[:, 2] = v[:, 2] / mesh.epsilon
    return v
