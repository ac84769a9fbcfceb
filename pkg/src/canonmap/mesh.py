"""Triangle mesh loading, validation and bilateral symmetry detection.

The template mesh is the index set for all dense correspondences, so the
loader is strict: faces must be triangles, the surface must be edge-manifold
and connected, and every downstream structure (spectral basis, geodesic
table, symmetry map) is derived from the validated mesh.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Base class for mesh validation failures."""


class MeshFormatError(MeshError):
    """File could not be parsed as the supported Wavefront subset."""


class NonManifoldMeshError(MeshError):
    """Some edge is shared by more than two faces."""


class DisconnectedMeshError(MeshError):
    """The mesh has more than one connected component."""


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Mesh:
    """Immutable triangle mesh with derived per-vertex unit normals."""

    vertices: np.ndarray        # (K, 3) float64
    faces: np.ndarray           # (F, 3) int32
    vertex_normals: np.ndarray  # (K, 3) float64, unit length

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    def edges(self):
        """Unique undirected edges as a (E, 2) int array, sorted per row."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def centroid(self):
        return self.vertices.mean(axis=0)

    def bounding_radius(self):
        return float(np.linalg.norm(self.vertices - self.centroid(), axis=1).max())


def compute_vertex_normals(vertices, faces):
    """Area-weighted average of incident face normals, normalized to unit."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    # cross product length is twice the face area, so plain accumulation
    # of unnormalized face normals is the area weighting
    fn = np.cross(v1 - v0, v2 - v0)
    normals = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(normals, faces[:, c], fn)
    norms = np.linalg.norm(normals, axis=1)
    bad = norms < 1e-20
    if bad.any():
        normals[bad] = (0.0, 0.0, 1.0)
        norms[bad] = 1.0
    return normals / norms[:, None]


def make_mesh(vertices, faces):
    """Validate raw arrays and build a Mesh.

    Raises MeshFormatError for bad indices or degenerate faces,
    NonManifoldMeshError / DisconnectedMeshError for topology problems.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int32)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshFormatError("vertices must be (K, 3)")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshFormatError("faces must be (F, 3)")
    if faces.shape[0] == 0:
        raise MeshFormatError("mesh has no faces")
    k = vertices.shape[0]
    if faces.min() < 0 or faces.max() >= k:
        raise MeshFormatError("face index out of range")
    degen = (
        (faces[:, 0] == faces[:, 1])
        | (faces[:, 1] == faces[:, 2])
        | (faces[:, 2] == faces[:, 0])
    )
    if degen.any():
        raise MeshFormatError(f"degenerate face (repeated vertex index) at face {int(np.where(degen)[0][0])}")

    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if (counts > 2).any():
        raise NonManifoldMeshError("edge shared by more than two faces")

    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(k, k))
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise DisconnectedMeshError(f"mesh has {n_comp} connected components")

    normals = compute_vertex_normals(vertices, faces)
    return Mesh(_readonly(vertices), _readonly(faces), _readonly(normals))


def load_mesh(path):
    """Load an ASCII Wavefront mesh (``v x y z`` / ``f i j k``, 1-based).

    Face tokens of the form ``i/..`` keep only the vertex index; any other
    record type is ignored. Non-triangular faces are rejected.
    """
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    verts.append([float(tokens[1]), float(tokens[2]), float(tokens[3])])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif tag == "f":
                idx_tokens = tokens[1:]
                if len(idx_tokens) != 3:
                    raise MeshFormatError(f"{path}:{lineno}: non-triangular face ({len(idx_tokens)} vertices)")
                try:
                    idx = [int(t.split("/")[0]) for t in idx_tokens]
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad face index") from exc
                if any(i < 1 for i in idx):
                    raise MeshFormatError(f"{path}:{lineno}: face indices must be positive (1-based)")
                faces.append([i - 1 for i in idx])
            # vn / vt / usemtl / o / g / s records are ignored
    if not verts:
        raise MeshFormatError(f"{path}: no vertex records")
    if not faces:
        raise MeshFormatError(f"{path}: no face records")
    return make_mesh(np.array(verts), np.array(faces))


def save_mesh(mesh, path):
    """Write the Wavefront subset this package reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


@dataclass(frozen=True)
class SymmetryMap:
    """Best axis-aligned mirror plane and the vertex pairing under it.

    ``flip_index[k]`` is the vertex closest to the mirror image of vertex k.
    ``residual`` is the mean nearest-neighbor distance; 0 means the mesh is
    exactly symmetric about the plane. Callers decide whether the residual
    is small enough to trust flip-based losses.
    """

    plane: str                 # one of "x", "y", "z"
    flip_index: np.ndarray     # (K,) int
    residual: float
    candidate_sums: dict = field(default_factory=dict)  # plane -> distance sum


_AXIS = {"x": 0, "y": 1, "z": 2}


def detect_symmetry(mesh):
    """Pick the axis-aligned mirror plane with the smallest pairing error.

    The mesh is centered on its vertex centroid, each candidate plane
    mirrors all vertices, and the plane whose mirrored vertex set is
    closest (summed nearest-neighbor distance) wins. Ties break in x, y, z
    order, which also makes the choice invariant to uniform scaling.
    """
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    tree = cKDTree(centered)
    best = None
    sums = {}
    for plane, axis in _AXIS.items():
        mirrored = centered.copy()
        mirrored[:, axis] *= -1.0
        dists, idx = tree.query(mirrored)
        total = float(dists.sum())
        sums[plane] = total
        if best is None or total < best[0]:
            best = (total, plane, idx, float(dists.mean()))
    _, plane, idx, residual = best
    return SymmetryMap(plane, _readonly(idx.astype(np.int64)), residual, sums)
