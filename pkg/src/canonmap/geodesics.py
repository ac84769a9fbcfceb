"""All-pairs geodesic distances via the heat method.

Short-time heat diffusion from each source vertex gives a field whose
normalized negative gradient points along geodesics; integrating that
field back with a Poisson solve recovers distances. Both linear systems
are factorized once and reused for every source, so the full K x K table
costs two factorizations plus 2K triangular solves.

The finished table is rescaled so its global maximum equals a fixed
normalization constant (228 by default, the conventional scale for
geodesic-error metrics), and the diagonal is exactly zero.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mesh import _readonly
from .spectral import build_laplacian

GEODESIC_MAX = 228.0


class GeodesicSolveError(RuntimeError):
    """Sparse factorization or solve failed."""


@dataclass(frozen=True)
class GeodesicTable:
    """Symmetric (K, K) vertex-to-vertex distances, max entry normalized."""

    dist: np.ndarray

    @property
    def num_vertices(self):
        return self.dist.shape[0]


def _face_geometry(mesh):
    """Per-face normals, double areas and hat-function gradients.

    grad[f, c] is the gradient of the hat function of corner c inside
    face f: rotate the opposite edge by 90 degrees in the face plane and
    divide by twice the area.
    """
    v = mesh.vertices
    f = mesh.faces
    e = [v[f[:, (c + 2) % 3]] - v[f[:, (c + 1) % 3]] for c in range(3)]  # opposite edges
    n = np.cross(e[1], e[2])
    double_area = np.linalg.norm(n, axis=1)
    double_area = np.maximum(double_area, 1e-300)
    unit_n = n / double_area[:, None]
    grad = np.stack([np.cross(unit_n, e[c]) / double_area[:, None] for c in range(3)], axis=1)
    return grad, double_area


def compute_geodesics(mesh, normalize_to=GEODESIC_MAX, source_chunk=256):
    """Heat-method distance table from every vertex to every vertex.

    Diffusion time is the squared mean edge length. Sources are processed
    in chunks; each chunk shares the prefactored heat and Poisson systems.
    The result is symmetrized (the heat method is only approximately
    symmetric) and rescaled so the maximum entry equals ``normalize_to``;
    pass ``normalize_to=None`` for distances in mesh units.
    """
    lap, mass = build_laplacian(mesh)
    k = mesh.num_vertices
    v, f = mesh.vertices, mesh.faces

    edge = mesh.edges()
    mean_edge = float(np.linalg.norm(v[edge[:, 0]] - v[edge[:, 1]], axis=1).mean())
    t = mean_edge ** 2

    heat_op = (sparse.diags(mass) + t * lap).tocsc()
    # tiny diagonal shift removes the constant-function kernel of L; the
    # resulting constant offset is cancelled by the per-source re-anchoring
    poisson_op = (lap + 1e-8 * float(np.mean(lap.diagonal())) * sparse.eye(k)).tocsc()
    try:
        heat_solve = splu(heat_op)
        poisson_solve = splu(poisson_op)
    except RuntimeError as exc:
        raise GeodesicSolveError(f"sparse factorization failed: {exc}") from exc

    grad, double_area = _face_geometry(mesh)
    area = 0.5 * double_area

    dist = np.empty((k, k))
    for start in range(0, k, source_chunk):
        stop = min(start + source_chunk, k)
        rhs = np.zeros((k, stop - start))
        rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
        u = heat_solve.solve(rhs)  # (K, S)

        # face-wise heat gradient for every source in the chunk
        gu = np.einsum("fcd,fcs->fds", grad, u[f])  # (F, 3, S)
        norm = np.linalg.norm(gu, axis=1, keepdims=True)
        x = -gu / np.maximum(norm, 1e-300)

        # integrated divergence of x against each hat function
        div = np.zeros((k, stop - start))
        for c in range(3):
            contrib = area[:, None] * np.einsum("fd,fds->fs", grad[:, c], x)
            np.add.at(div, f[:, c], contrib)

        phi = poisson_solve.solve(div)
        phi -= phi[np.arange(start, stop), np.arange(stop - start)]
        dist[:, start:stop] = phi

    np.maximum(dist, 0.0, out=dist)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    peak = dist.max()
    if peak <= 0:
        raise GeodesicSolveError("geodesic table collapsed to zero")
    if normalize_to is not None:
        dist = (dist / peak) * normalize_to
    return GeodesicTable(_readonly(dist))


# --- binary cache format -------------------------------------------------
# "CGT1": u32 K, f32 dist[K*K] row-major, little-endian.

CGT1_MAGIC = b"CGT1"


def save_geodesic_table(table, path):
    with open(path, "wb") as fh:
        fh.write(CGT1_MAGIC)
        fh.write(struct.pack("<I", table.num_vertices))
        fh.write(np.ascontiguousarray(table.dist, dtype="<f4").tobytes())


def load_geodesic_table(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CGT1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected CGT1")
        (k,) = struct.unpack("<I", fh.read(4))
        dist = np.frombuffer(fh.read(4 * k * k), dtype="<f4").astype(np.float64)
        if dist.size != k * k:
            raise ValueError(f"{path}: truncated CGT1 payload")
    return GeodesicTable(_readonly(dist.reshape(k, k)))
