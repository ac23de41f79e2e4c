"""Linear finite elements: stiffness, lumped mass and the diffusion operators.

Sign convention: ``S`` is assembled NEGATIVE semi-definite, i.e.
``S = -K`` with ``K_pq = int grad(phi_p) . grad(phi_q)``.  With that
choice ``D = A^-1 S`` is the macroscopic diffusion matrix and
``Q = gamma S A^-1 = gamma D^T`` holds the mesoscopic jump rates:
``Q[j, k]`` (j != k) is the rate at which one molecule in cell ``k``
jumps to cell ``j``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MeshError, dual_areas


@dataclass(frozen=True)
class Neumann:
    """Reflecting boundary: no flux, molecule numbers conserved."""

    @property
    def fixed_cells(self) -> frozenset:
        return frozenset()


@dataclass(frozen=True)
class Dirichlet:
    """Reservoir boundary: the copy numbers in ``cells`` are held at their initial values."""

    cells: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "cells", frozenset(int(c) for c in self.cells))

    @property
    def fixed_cells(self) -> frozenset:
        return self.cells


def _element_stiffness_2d(verts: np.ndarray, elems: np.ndarray) -> np.ndarray:
    """Per-triangle ``-int grad(phi_p) . grad(phi_q)`` (E x 3 x 3)."""
    x = verts[elems, 0]
    y = verts[elems, 1]
    # b_i = y_j - y_k, c_i = x_k - x_j for (i, j, k) cyclic
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    if np.any(area <= 0):
        raise MeshError("triangle with non-positive area in stiffness assembly")
    k = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area[:, None, None])
    return -k


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Assemble the symmetric, negative semi-definite P1 stiffness matrix."""
    K = mesh.num_vertices
    elems = mesh.elements
    if mesh.dim == 1:
        h = mesh.element_measures()
        if np.any(h <= 0):
            raise MeshError("segment with non-positive length")
        local = np.array([[-1.0, 1.0], [1.0, -1.0]])[None, :, :] / h[:, None, None]
    else:
        local = _element_stiffness_2d(mesh.vertices, elems)
    n = elems.shape[1]
    rows = np.repeat(elems, n, axis=1).ravel()
    cols = np.tile(elems, (1, n)).ravel()
    S = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(K, K)).tocsr()
    S.sum_duplicates()
    S.eliminate_zeros()
    S.sort_indices()
    return S


def assemble_lumped_mass(mesh: Mesh) -> np.ndarray:
    """Row-sum lumped P1 mass matrix diagonal; equals the dual-cell measures."""
    return dual_areas(mesh).areas.copy()


@dataclass(frozen=True)
class DiffusionOperator:
    """Stiffness ``S``, lumped mass ``A`` and the derived ``D`` and ``Q``.

    Matrices are never trimmed for Dirichlet conditions; the fixed cells
    are recorded in ``bc`` and handled by the samplers and steppers.
    ``coords`` are the cell centres (mesh vertices) when known.
    """

    S: sp.csr_matrix
    A: np.ndarray
    gamma: float
    D: sp.csr_matrix
    Q: sp.csr_matrix
    bc: Neumann | Dirichlet = Neumann()
    h_min: float | None = None
    coords: np.ndarray | None = None

    @property
    def num_cells(self) -> int:
        return self.A.shape[0]

    @property
    def fixed_cells(self) -> frozenset:
        return self.bc.fixed_cells

    def export_triplets(self, directory) -> list:
        """Write ``S``, ``A``, ``D`` and ``Q`` as ``row col value`` text files."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, mat in (("S", self.S), ("A", sp.diags(self.A).tocsr()), ("D", self.D), ("Q", self.Q)):
            coo = mat.tocoo()
            path = out / f"{name}.txt"
            with path.open("w") as fh:
                fh.write("# row col value\n")
                for r, c, v in zip(coo.row, coo.col, coo.data):
                    fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")
            written.append(path)
        return written


def build_operator(S, A, gamma: float, bc=None, h_min=None, coords=None) -> DiffusionOperator:
    """``D = A^-1 S`` and ``Q = gamma S A^-1``."""
    S = sp.csr_matrix(S, dtype=float)
    A = np.asarray(A, dtype=float).ravel()
    if S.shape != (A.size, A.size):
        raise ValueError(f"dimension mismatch: S is {S.shape}, A has {A.size} entries")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if np.any(A <= 0):
        raise ValueError("lumped mass must be positive")
    bc = Neumann() if bc is None else bc
    if any(c < 0 or c >= A.size for c in bc.fixed_cells):
        raise ValueError("Dirichlet cell index out of range")
    Ainv = sp.diags(1.0 / A)
    D = (Ainv @ S).tocsr()
    Q = (gamma * D.T).tocsr()
    for m in (D, Q):
        m.sort_indices()
    A = A.copy()
    A.setflags(write=False)
    return DiffusionOperator(S=S, A=A, gamma=float(gamma), D=D, Q=Q, bc=bc, h_min=h_min, coords=coords)


def operator_from_mesh(mesh: Mesh, gamma: float, bc=None, policy: str = "keep") -> DiffusionOperator:
    op = build_operator(
        assemble_stiffness(mesh),
        assemble_lumped_mass(mesh),
        gamma,
        bc,
        h_min=mesh.h_min(),
        coords=mesh.vertices,
    )
    return apply_sign_policy(op, policy)


@dataclass(frozen=True)
class SignReport:
    negative: list  # (j, k, D_jk) with j != k and D_jk < 0
    worst_relative: float
    diagonal_ok: bool

    @property
    def m_matrix_ok(self) -> bool:
        return not self.negative and self.diagonal_ok


def sign_report(op: DiffusionOperator) -> SignReport:
    """Enumerate off-diagonal entries of ``D`` that break the M-matrix sign pattern."""
    coo = op.D.tocoo()
    diag = op.D.diagonal()
    mask = (coo.row != coo.col) & (coo.data < 0)
    neg = sorted(zip(coo.row[mask].tolist(), coo.col[mask].tolist(), coo.data[mask].tolist()))
    worst = 0.0
    if neg:
        worst = max(abs(v) / abs(diag[j]) for j, _, v in neg)
    return SignReport(negative=neg, worst_relative=worst, diagonal_ok=bool(np.all(diag < 0)))


def clamp_negative_couplings(S: sp.csr_matrix) -> sp.csr_matrix:
    """Zero negative off-diagonals of ``S`` and move them onto the diagonal.

    Row sums are unchanged and symmetry is kept, so ``D`` keeps zero row
    sums under Neumann conditions.
    """
    coo = S.tocoo()
    off = coo.row != coo.col
    neg = off & (coo.data < 0)
    data = coo.data.copy()
    moved = np.zeros(S.shape[0])
    np.add.at(moved, coo.row[neg], data[neg])
    data[neg] = 0.0
    out = sp.coo_matrix((data, (coo.row, coo.col)), shape=S.shape).tocsr()
    out = out + sp.diags(moved)
    out = out.tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def apply_sign_policy(op: DiffusionOperator, policy: str = "keep") -> DiffusionOperator:
    """``keep`` warns about negative couplings; ``clamp`` removes them."""
    if policy not in ("keep", "clamp"):
        raise ValueError(f"unknown sign policy {policy!r}")
    rep = sign_report(op)
    if rep.m_matrix_ok:
        return op
    if policy == "keep":
        warnings.warn(
            f"{len(rep.negative)} negative off-diagonal couplings in D "
            f"(worst {rep.worst_relative:.3g} of |D_jj|); kept as assembled",
            stacklevel=2,
        )
        return op
    S = clamp_negative_couplings(op.S)
    return build_operator(S, op.A, op.gamma, op.bc, h_min=op.h_min, coords=op.coords)
