"""Simplicial meshes in 1D and 2D, their dual cells and quality checks.

Vertices carry the copy numbers of the mesoscopic model; the dual cell
around vertex ``j`` has measure equal to the ``j``-th row sum of the
consistent P1 mass matrix.

Text format (``#`` starts a comment)::

    dim K E
    x [y]          # K lines
    i j [k]        # E lines, zero-based
    boundary i     # optional, any number
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

DEGENERATE_TOL = 1e-14


class MeshError(ValueError):
    """Raised for malformed or invalid meshes."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable 1D segment or 2D triangle mesh.

    Construction validates the element indices, normalizes 2D triangles
    to counter-clockwise orientation, rejects degenerate elements and
    disconnected meshes, and detects boundary vertices structurally.
    ``extra_boundary`` may add markers but never removes detected ones.
    """

    vertices: np.ndarray
    elements: np.ndarray
    extra_boundary: Iterable[int] = ()
    boundary_vertices: frozenset = field(init=False)

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float)
        if verts.ndim == 1:
            verts = verts[:, None]
        if verts.ndim != 2 or verts.shape[1] not in (1, 2):
            raise MeshError("vertices must be an array of 1D or 2D coordinates")
        dim = verts.shape[1]
        elems = np.array(self.elements, dtype=np.int64).reshape(-1, dim + 1)
        K = verts.shape[0]
        if K < 2 or len(elems) == 0:
            raise MeshError("mesh needs at least two vertices and one element")
        if elems.min() < 0 or elems.max() >= K:
            raise MeshError(f"element vertex index out of range [0, {K})")
        for e, el in enumerate(elems):
            if len(set(el.tolist())) != dim + 1:
                raise MeshError(f"element {e} repeats a vertex: {el.tolist()}")
        if not np.all(np.isfinite(verts)):
            raise MeshError("non-finite vertex coordinate")

        measure = _signed_measures(verts, elems)
        hmax = _max_edge_length(verts, elems)
        if dim == 2:
            flip = measure < 0
            if np.any(flip):
                elems = elems.copy()
                elems[flip, 1], elems[flip, 2] = elems[flip, 2], elems[flip, 1].copy()
                measure = np.abs(measure)
            bad = np.nonzero(measure < DEGENERATE_TOL * hmax**2)[0]
        else:
            # 1D segments are stored left to right
            flip = measure < 0
            if np.any(flip):
                elems = elems.copy()
                elems[flip] = elems[flip][:, ::-1]
                measure = np.abs(measure)
            bad = np.nonzero(measure < DEGENERATE_TOL * hmax)[0]
        if len(bad):
            raise MeshError(f"degenerate element(s): {bad[:10].tolist()}")

        rows = np.repeat(elems, dim + 1, axis=1).ravel()
        cols = np.tile(elems, (1, dim + 1)).ravel()
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(K, K))
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise MeshError(f"mesh is disconnected ({ncomp} components)")
        unused = np.setdiff1d(np.arange(K), elems.ravel())
        if len(unused):
            raise MeshError(f"vertices not in any element: {unused[:10].tolist()}")

        detected = _structural_boundary(elems, dim)
        extra = {int(i) for i in self.extra_boundary}
        if any(i < 0 or i >= K for i in extra):
            raise MeshError("boundary marker out of range")

        verts.setflags(write=False)
        elems.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "elements", elems)
        object.__setattr__(self, "extra_boundary", tuple(sorted(extra)))
        object.__setattr__(self, "boundary_vertices", frozenset(detected | extra))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    def element_measures(self) -> np.ndarray:
        """Length (1D) or area (2D) of every element."""
        return np.abs(_signed_measures(self.vertices, self.elements))

    def measure(self) -> float:
        return float(self.element_measures().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs (E x 2)."""
        return _unique_edges(self.elements, self.dim)

    def h_max(self) -> float:
        """Largest edge length."""
        return _max_edge_length(self.vertices, self.elements)

    def h_min(self) -> float:
        """Smallest vertex-to-opposing-edge distance (segment length in 1D)."""
        if self.dim == 1:
            return float(self.element_measures().min())
        v = self.vertices[self.elements]
        lengths = np.stack(
            [np.linalg.norm(v[:, (i + 2) % 3] - v[:, (i + 1) % 3], axis=1) for i in range(3)],
            axis=1,
        )
        return float((2.0 * self.element_measures() / lengths.max(axis=1)).min())

    def to_text(self) -> str:
        lines = [f"{self.dim} {self.num_vertices} {self.num_elements}"]
        lines += [" ".join(repr(float(c)) for c in row) for row in self.vertices]
        lines += [" ".join(str(int(i)) for i in row) for row in self.elements]
        lines += [f"boundary {i}" for i in self.extra_boundary]
        return "\n".join(lines) + "\n"


def _signed_measures(verts: np.ndarray, elems: np.ndarray) -> np.ndarray:
    if verts.shape[1] == 1:
        return verts[elems[:, 1], 0] - verts[elems[:, 0], 0]
    a, b, c = (verts[elems[:, i]] for i in range(3))
    ab, ac = b - a, c - a
    return 0.5 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])


def _unique_edges(elems: np.ndarray, dim: int) -> np.ndarray:
    if dim == 1:
        e = elems
    else:
        e = np.concatenate([elems[:, [0, 1]], elems[:, [1, 2]], elems[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def _max_edge_length(verts: np.ndarray, elems: np.ndarray) -> float:
    e = _unique_edges(elems, verts.shape[1])
    return float(np.linalg.norm(verts[e[:, 1]] - verts[e[:, 0]], axis=1).max())


def _structural_boundary(elems: np.ndarray, dim: int) -> set:
    if dim == 1:
        facets = elems.reshape(-1, 1)
    else:
        facets = np.sort(
            np.concatenate([elems[:, [0, 1]], elems[:, [1, 2]], elems[:, [2, 0]]]), axis=1
        )
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    return {int(i) for i in uniq[counts == 1].ravel()}


def parse_mesh(text: str) -> Mesh:
    """Parse the line-oriented mesh format."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((lineno, line.split()))
    if not rows:
        raise MeshError("empty mesh file")
    lineno, head = rows[0]
    try:
        dim, K, E = (int(t) for t in head)
    except ValueError:
        raise MeshError(f"line {lineno}: header must be 'dim K E'") from None
    if dim not in (1, 2) or K < 1 or E < 1:
        raise MeshError(f"line {lineno}: bad header {head}")
    if len(rows) < 1 + K + E:
        raise MeshError(f"expected {K} vertex and {E} element lines, file too short")

    verts = []
    for lineno, toks in rows[1 : 1 + K]:
        if len(toks) != dim:
            raise MeshError(f"line {lineno}: expected {dim} coordinates")
        try:
            verts.append([float(t) for t in toks])
        except ValueError:
            raise MeshError(f"line {lineno}: bad coordinate") from None
    elems = []
    for lineno, toks in rows[1 + K : 1 + K + E]:
        if len(toks) != dim + 1:
            raise MeshError(f"line {lineno}: expected {dim + 1} vertex indices")
        try:
            idx = [int(t) for t in toks]
        except ValueError:
            raise MeshError(f"line {lineno}: bad vertex index") from None
        if any(i < 0 or i >= K for i in idx):
            raise MeshError(f"line {lineno}: vertex index out of range [0, {K})")
        elems.append(idx)
    extra = []
    for lineno, toks in rows[1 + K + E :]:
        if len(toks) != 2 or toks[0] != "boundary":
            raise MeshError(f"line {lineno}: expected 'boundary i'")
        try:
            i = int(toks[1])
        except ValueError:
            raise MeshError(f"line {lineno}: bad boundary index") from None
        if i < 0 or i >= K:
            raise MeshError(f"line {lineno}: boundary index out of range")
        extra.append(i)
    return Mesh(np.array(verts), np.array(elems), extra)


def load_mesh(path) -> Mesh:
    return parse_mesh(Path(path).read_text())


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(mesh.to_text())


def build_structured_unit_square(n: int, origin_offset: Sequence[float] = (0.0, 0.0)) -> Mesh:
    """Uniform right-triangle mesh of the unit square shifted by ``origin_offset``.

    Every grid cell is split along its (lower-left, upper-right) diagonal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ox, oy = origin_offset
    ticks = np.arange(n + 1) / n
    xs = ox + ticks
    ys = oy + ticks
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    tris = []
    for j in range(n):
        for i in range(n):
            v00 = j * (n + 1) + i
            v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return Mesh(verts, np.array(tris))


def build_1d_mesh(node_positions: Sequence[float]) -> Mesh:
    x = np.asarray(node_positions, dtype=float)
    if x.ndim != 1 or len(x) < 2:
        raise MeshError("need at least two node positions")
    if np.any(np.diff(x) <= 0):
        raise MeshError("node positions must be strictly increasing")
    segs = np.column_stack([np.arange(len(x) - 1), np.arange(1, len(x))])
    return Mesh(x[:, None], segs)


def build_disk(radius: float, n_rings: int, center: Sequence[float] = (0.0, 0.0), ring_counts=None) -> Mesh:
    """Delaunay mesh of a disk from concentric rings of points.

    By default ring ``i`` holds ``6 i`` points (staggered by half a
    spacing on odd rings), giving ``K = 1 + 3 n (n + 1)``.  ``ring_counts``
    overrides the per-ring point numbers.  The outer ring is inscribed in
    the circle, so the domain is a polygon.
    """
    from scipy.spatial import Delaunay

    if n_rings < 1:
        raise ValueError("n_rings must be >= 1")
    counts = [6 * i for i in range(1, n_rings + 1)] if ring_counts is None else [int(c) for c in ring_counts]
    if len(counts) != n_rings or min(counts) < 3:
        raise ValueError("need n_rings ring counts, each at least 3")
    pts = [np.zeros(2)]
    for i, m in enumerate(counts, start=1):
        theta = 2 * np.pi * (np.arange(m) + 0.5 * (i % 2)) / m
        r = radius * i / n_rings
        pts.extend(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    pts = np.array(pts) + np.asarray(center, dtype=float)
    tri = Delaunay(pts)
    simplices = tri.simplices
    area = np.abs(_signed_measures(pts, simplices))
    keep = area > DEGENERATE_TOL * (2 * radius) ** 2
    return Mesh(pts, simplices[keep])


def disk_ring_counts(num_vertices: int, n_rings: int) -> list:
    """Ring sizes proportional to ring radius summing to ``num_vertices - 1``."""
    total = num_vertices - 1
    w = np.arange(1, n_rings + 1, dtype=float)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts))[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def perturb_interior(mesh: Mesh, amplitude: float, rng: np.random.Generator, tries: int = 20) -> Mesh:
    """Randomly displace interior vertices by at most ``amplitude``.

    Connectivity is kept. Displacements are halved until every element
    keeps its orientation.
    """
    interior = np.array(sorted(set(range(mesh.num_vertices)) - mesh.boundary_vertices), dtype=int)
    base = mesh.vertices
    orient = _signed_measures(base, mesh.elements)
    amp = amplitude
    for _ in range(tries):
        v = base.copy()
        d = rng.uniform(-amp, amp, size=(len(interior), mesh.dim))
        v[interior] += d
        m = _signed_measures(v, mesh.elements)
        if np.all(m * np.sign(orient) > 0.05 * np.abs(orient)):
            return Mesh(v, mesh.elements, mesh.extra_boundary)
        amp *= 0.5
    return mesh


@dataclass(frozen=True)
class DualGeometry:
    areas: np.ndarray
    total: float


def dual_areas(mesh: Mesh) -> DualGeometry:
    """Dual-cell measures as row sums of the consistent P1 mass matrix."""
    share = mesh.element_measures() / (mesh.dim + 1)
    areas = np.zeros(mesh.num_vertices)
    for col in range(mesh.dim + 1):
        np.add.at(areas, mesh.elements[:, col], share)
    areas.setflags(write=False)
    return DualGeometry(areas=areas, total=float(areas.sum()))


@dataclass(frozen=True)
class EdgeAngles:
    edge: tuple
    alpha: float
    beta: float | None  # None on boundary edges

    @property
    def violates(self) -> bool:
        # a boundary edge has only one opposite angle; the limit is pi/2
        if self.beta is None:
            return self.alpha > 0.5 * np.pi
        return self.alpha + self.beta > np.pi


@dataclass(frozen=True)
class QualityReport:
    edges: list
    violations: list
    min_angle: float
    max_angle: float
    h_min: float
    h_max: float

    @property
    def interior_edges(self) -> list:
        return [e for e in self.edges if e.beta is not None]


def triangle_angles(mesh: Mesh) -> np.ndarray:
    """Interior angle at each corner of every triangle (E x 3)."""
    v = mesh.vertices[mesh.elements]
    out = np.empty((mesh.num_elements, 3))
    for i in range(3):
        p, q, r = v[:, i], v[:, (i + 1) % 3], v[:, (i + 2) % 3]
        a, b = q - p, r - p
        cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        out[:, i] = np.arctan2(cross, np.einsum("ij,ij->i", a, b))
    return out


def quality_report(mesh: Mesh) -> QualityReport:
    """Opposite-angle sums per edge and the edges breaking the Delaunay sign condition.

    Boundary edges are listed with ``beta=None``; they violate when their
    single opposite angle is obtuse, since that also makes the stiffness
    coupling negative.
    """
    if mesh.dim != 2:
        raise ValueError("quality_report applies to 2D meshes; 1D couplings are always positive")
    ang = triangle_angles(mesh)
    opposite: dict = {}
    for t, tri in enumerate(mesh.elements):
        for i in range(3):
            e = tuple(sorted((int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3]))))
            opposite.setdefault(e, []).append(float(ang[t, i]))
    edges = []
    for e in sorted(opposite):
        angs = opposite[e]
        edges.append(EdgeAngles(e, angs[0], angs[1] if len(angs) > 1 else None))
    return QualityReport(
        edges=edges,
        violations=[e.edge for e in edges if e.violates],
        min_angle=float(ang.min()),
        max_angle=float(ang.max()),
        h_min=mesh.h_min(),
        h_max=mesh.h_max(),
    )
