"""Cotangent Laplacian and low-frequency spectral basis of a mesh.

The smooth functional basis used to compress per-vertex embeddings is the
set of lowest generalized eigenpairs ``L u = lam M u`` of the cotangent
stiffness matrix L with a lumped barycentric mass matrix M. Eigenvectors
returned here are M-orthonormal and deterministically signed.
"""

import logging
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .mesh import _readonly

logger = logging.getLogger(__name__)

# clamp for cotangent magnitudes from near-degenerate faces
COT_CLAMP = 1e6


class EigensolverError(RuntimeError):
    """Sparse eigensolver failed to converge."""


@dataclass(frozen=True)
class SpectralBasis:
    """Lowest eigenpairs of the mesh Laplacian.

    ``basis`` is (K, Q) with M-orthonormal columns sorted by ascending
    eigenvalue; the first column is the constant function (eigenvalue 0).
    ``vertex_mass`` holds the lumped barycentric masses.
    """

    eigenvalues: np.ndarray   # (Q,)
    basis: np.ndarray         # (K, Q)
    vertex_mass: np.ndarray   # (K,)

    @property
    def num_vertices(self):
        return self.basis.shape[0]

    @property
    def num_modes(self):
        return self.basis.shape[1]


def build_laplacian(mesh):
    """Assemble cotangent stiffness L (positive semidefinite, CSR) and
    lumped barycentric vertex masses.

    For each face corner the half-cotangent of its angle is added to the
    weight of the opposite edge. Cotangents of near-degenerate faces are
    clamped to +-COT_CLAMP so toy or scanned meshes still assemble; a
    warning is logged when that happens.
    """
    v = mesh.vertices
    f = mesh.faces
    k = mesh.num_vertices

    i0, i1, i2 = f[:, 0], f[:, 1], f[:, 2]
    e0 = v[i2] - v[i1]  # edge opposite corner 0
    e1 = v[i0] - v[i2]
    e2 = v[i1] - v[i0]

    # double face area from any corner's adjacent edges
    cross = np.cross(e1, -e0)
    double_area = np.linalg.norm(cross, axis=1)
    degenerate = double_area < 1e-12
    if degenerate.any():
        n_bad = int(degenerate.sum())
        warnings.warn(f"{n_bad} near-degenerate faces; cotangent weights clamped")
        logger.warning("clamping cotangent weights on %d degenerate faces", n_bad)
    safe_double_area = np.maximum(double_area, 1e-12)

    # cot(angle at corner c) = dot(adjacent edges) / (2 * area)
    cot0 = np.einsum("ij,ij->i", -e1, e2) / safe_double_area
    cot1 = np.einsum("ij,ij->i", -e2, e0) / safe_double_area
    cot2 = np.einsum("ij,ij->i", -e0, e1) / safe_double_area
    cot0, cot1, cot2 = (np.clip(c, -COT_CLAMP, COT_CLAMP) for c in (cot0, cot1, cot2))

    # half-cotangent per opposite edge, symmetric assembly
    rows = np.concatenate([i1, i2, i2, i0, i0, i1])
    cols = np.concatenate([i2, i1, i0, i2, i1, i0])
    w = 0.5 * np.concatenate([cot0, cot0, cot1, cot1, cot2, cot2])
    off = sparse.csr_matrix((-w, (rows, cols)), shape=(k, k))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    lap = off + sparse.diags(diag)

    area = 0.5 * double_area
    mass = np.zeros(k)
    for c in range(3):
        np.add.at(mass, f[:, c], area / 3.0)
    mass = np.maximum(mass, 1e-12 * max(mass.sum(), 1e-300))
    return lap.tocsr(), mass


def _canonical_sign(u):
    """Flip each column so its largest-magnitude entry is positive."""
    pick = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pick, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def compute_spectral_basis(mesh, q, tol=1e-8, maxiter=10000):
    """Solve for the q smallest generalized eigenpairs L u = lam M u.

    Shift-invert Lanczos on the sparse pencil; small meshes (q close to K)
    fall back to a dense solve since ARPACK requires q < K - 1. Eigenvalues
    come back ascending with eigenvalue[0] ~ 0 and M-orthonormal columns.
    """
    k = mesh.num_vertices
    if q < 1:
        raise ValueError("q must be >= 1")
    if q > k:
        raise ValueError(f"q={q} exceeds vertex count K={k}")
    lap, mass = build_laplacian(mesh)

    if q >= k - 1:
        vals, vecs = eigh(lap.toarray(), np.diag(mass))
        vals, vecs = vals[:q], vecs[:, :q]
    else:
        m = sparse.diags(mass).tocsc()
        # small negative shift keeps the factorized pencil nonsingular
        # despite the constant-function kernel of L
        scale = float(np.mean(lap.diagonal() / mass))
        sigma = -1e-2 * max(scale, 1e-12)
        v0 = np.full(k, 1.0 / np.sqrt(k))
        try:
            vals, vecs = eigsh(
                lap.tocsc(), k=q, M=m, sigma=sigma, which="LM",
                v0=v0, tol=tol, maxiter=maxiter,
            )
        except ArpackNoConvergence as exc:
            raise EigensolverError(
                f"eigensolver did not converge within {maxiter} iterations"
            ) from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]

    # re-normalize against the mass inner product and fix signs
    norms = np.sqrt(np.einsum("kq,k,kq->q", vecs, mass, vecs))
    vecs = vecs / norms
    vecs = _canonical_sign(vecs)
    vals = np.maximum(vals, 0.0) if vals[0] > -1e-8 else vals
    return SpectralBasis(_readonly(vals), _readonly(vecs), _readonly(mass))


# --- binary cache format -------------------------------------------------
# "CSB1": u32 K, u32 Q, then f32 eigenvalues[Q], f32 basis[K*Q] row-major,
# f32 mass[K]; little-endian throughout.

CSB1_MAGIC = b"CSB1"


def save_spectral_basis(basis, path):
    with open(path, "wb") as fh:
        fh.write(CSB1_MAGIC)
        k, q = basis.basis.shape
        fh.write(struct.pack("<II", k, q))
        fh.write(basis.eigenvalues.astype("<f4").tobytes())
        fh.write(np.ascontiguousarray(basis.basis, dtype="<f4").tobytes())
        fh.write(basis.vertex_mass.astype("<f4").tobytes())


def load_spectral_basis(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CSB1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected CSB1")
        k, q = struct.unpack("<II", fh.read(8))
        vals = np.frombuffer(fh.read(4 * q), dtype="<f4").astype(np.float64)
        u = np.frombuffer(fh.read(4 * k * q), dtype="<f4").astype(np.float64).reshape(k, q)
        mass = np.frombuffer(fh.read(4 * k), dtype="<f4").astype(np.float64)
        if vals.size != q or u.size != k * q or mass.size != k:
            raise ValueError(f"{path}: truncated CSB1 payload")
    return SpectralBasis(_readonly(vals), _readonly(u), _readonly(mass))
