"""Pseudo ground truth: pooling image-to-render similarities onto vertices.

For a query cell of a real image, its similarity to each template vertex is
the max (or mean) of the cosine similarities to that vertex's projection in
every rendered view where the vertex passed the depth test. The argmax
vertex of that pooled score is the pseudo-label used to supervise training.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import features as feat_mod
from .features import NEG_SENTINEL
from .mesh import _readonly
from .render import render, sample_viewpoints

POOLINGS = ("max", "mean")


@dataclass(frozen=True)
class BankView:
    """One rendered view with its feature map, at feature-cell resolution."""

    featmap: feat_mod.FeatureMap
    visible: np.ndarray    # (K,) bool
    cells: np.ndarray      # (K, 2) int, vertex projections as foreground cells
    feats64: np.ndarray = None   # cached float64 grid for repeated queries
    norms: np.ndarray = None     # cached per-cell feature norms


@dataclass(frozen=True)
class ViewBank:
    views: tuple
    mesh_id: str

    @property
    def num_views(self):
        return len(self.views)


@dataclass(frozen=True)
class PseudoGt:
    """Sampled foreground cells with their pooled argmax vertices."""

    cells: np.ndarray     # (N, 2) int
    vertices: np.ndarray  # (N,) int
    scores: np.ndarray    # (N,) float64

    def __len__(self):
        return self.cells.shape[0]


def view_to_bank(mesh, view, featmap, facing_min=0.25):
    """Convert a rendered view's pixel-level projections to feature cells.

    Projections land on the proportional cell and snap to the nearest
    foreground cell of the feature map. A vertex counts as poolable in this
    view when it passed the depth test AND faces the camera by a margin:
    grazing vertices project into cells whose content belongs to surface
    regions far away along the silhouette, which poisons max pooling.
    """
    cells = feat_mod.pixels_to_cells(view.projections, view.mask.shape, featmap.grid)
    cells = feat_mod.snap_to_foreground(cells, featmap.mask)
    to_cam = np.asarray(view.camera.position) - mesh.vertices
    to_cam /= np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-300)
    facing = np.einsum("ij,ij->i", to_cam, mesh.vertex_normals)
    visible = view.visible & (facing >= facing_min)
    feats64, norms = feat_mod.prepare_target(featmap)
    return BankView(featmap=featmap, visible=_readonly(visible),
                    cells=_readonly(cells), feats64=_readonly(feats64),
                    norms=_readonly(norms))


def build_view_bank(mesh, n, style="normals", extractor=None, mesh_id="",
                    image_size=(512, 512), radius_scale=2.5, fov_y=None,
                    facing_min=0.25):
    """Render ``n`` template views and attach a feature map to each.

    ``extractor`` is called as ``extractor(mesh, camera, view, index)`` and
    must return a FeatureMap; it typically loads a CFM1 file produced by an
    external extractor, or synthesizes oracle features.
    """
    if extractor is None:
        raise ValueError("an extractor callable is required")
    kwargs = {} if fov_y is None else {"fov_y": fov_y}
    cameras = sample_viewpoints(mesh, n, radius_scale=radius_scale,
                                image_size=image_size, **kwargs)
    views = []
    for i, cam in enumerate(cameras):
        view = render(mesh, cam, style=style, with_positions=True)
        featmap = extractor(mesh, cam, view, i)
        views.append(view_to_bank(mesh, view, featmap, facing_min=facing_min))
    return ViewBank(views=tuple(views), mesh_id=mesh_id)


class DirectoryExtractor:
    """Loads ``view_%03d.cfm`` files for bank views; missing file is an error."""

    def __init__(self, directory):
        self.directory = directory

    def __call__(self, mesh, camera, view, index):
        path = self.directory / f"view_{index:03d}.cfm"
        if not path.exists():
            raise FileNotFoundError(f"missing feature file for view {index}: {path}")
        return feat_mod.load_feature_map(path)


def _pooled_scores(fields_per_view, bank, pooling):
    """Pool per-view similarities gathered at vertex projections.

    ``fields_per_view``: list of (N, H_f, W_f) similarity stacks, one per
    view, for N query cells. Returns (N, K) pooled scores with NEG_SENTINEL
    for vertices visible in no view.
    """
    n = fields_per_view[0].shape[0]
    k = bank.views[0].visible.shape[0]
    if pooling == "max":
        scores = np.full((n, k), NEG_SENTINEL)
        for fields, bv in zip(fields_per_view, bank.views):
            vis = bv.visible
            if not vis.any():
                continue
            gathered = fields[:, bv.cells[vis, 0], bv.cells[vis, 1]]
            scores[:, vis] = np.maximum(scores[:, vis], gathered)
        return scores
    if pooling == "mean":
        total = np.zeros((n, k))
        count = np.zeros(k)
        for fields, bv in zip(fields_per_view, bank.views):
            vis = bv.visible
            if not vis.any():
                continue
            total[:, vis] += fields[:, bv.cells[vis, 0], bv.cells[vis, 1]]
            count[vis] += 1.0
        scores = np.full((n, k), NEG_SENTINEL)
        seen = count > 0
        scores[:, seen] = total[:, seen] / count[seen]
        return scores
    raise ValueError(f"unknown pooling {pooling!r}")


def vertex_similarity_batch(img, cells, bank, pooling="max"):
    """Pooled vertex scores for a batch of query cells; (N, K) array."""
    cells = np.asarray(cells, dtype=np.int64)
    if not img.mask[cells[:, 0], cells[:, 1]].all():
        raise ValueError("every query cell must be foreground")
    queries = img.features[cells[:, 0], cells[:, 1]].astype(np.float64)
    fields = []
    for bv in bank.views:
        fields.append(np.stack([
            feat_mod._cosine_field(bv.feats64, bv.norms, bv.featmap.mask, q)
            for q in queries
        ]))
    return _pooled_scores(fields, bank, pooling)


def vertex_similarity(img, u, bank, pooling="max"):
    """Pooled similarity of one query cell to every template vertex."""
    return vertex_similarity_batch(img, np.asarray(u)[None], bank, pooling)[0]


def build_pseudo_gt(img, bank, samples=100, pooling="max", seed=0):
    """Sample foreground cells and record their pooled argmax vertices.

    Sampling is uniform without replacement over the foreground, clamped to
    the number of available cells, and fully determined by ``seed``.
    """
    fg = img.foreground_cells()
    if fg.shape[0] == 0:
        raise ValueError("image has no foreground cells")
    rng = np.random.default_rng(seed)
    take = min(samples, fg.shape[0])
    picked = fg[rng.choice(fg.shape[0], size=take, replace=False)]
    scores = vertex_similarity_batch(img, picked, bank, pooling)
    best = np.argmax(scores, axis=1)
    best_scores = scores[np.arange(take), best]
    return PseudoGt(_readonly(picked), _readonly(best), _readonly(best_scores))


# --- CPG1 serialization ------------------------------------------------------
# magic "CPG1", u32 count, then records of u16 row, u16 col, u32 vertex,
# f32 score; little-endian.

CPG1_MAGIC = b"CPG1"
_CPG1_REC = np.dtype([("row", "<u2"), ("col", "<u2"), ("vertex", "<u4"), ("score", "<f4")])


def save_pseudo_gt(pgt, path):
    rec = np.zeros(len(pgt), dtype=_CPG1_REC)
    rec["row"] = pgt.cells[:, 0]
    rec["col"] = pgt.cells[:, 1]
    rec["vertex"] = pgt.vertices
    rec["score"] = pgt.scores
    with open(path, "wb") as fh:
        fh.write(CPG1_MAGIC)
        fh.write(struct.pack("<I", len(pgt)))
        fh.write(rec.tobytes())


def load_pseudo_gt(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CPG1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected CPG1")
        (count,) = struct.unpack("<I", fh.read(4))
        rec = np.frombuffer(fh.read(_CPG1_REC.itemsize * count), dtype=_CPG1_REC)
        if rec.size != count:
            raise ValueError(f"{path}: truncated CPG1 payload")
    cells = np.stack([rec["row"], rec["col"]], axis=1).astype(np.int64)
    return PseudoGt(_readonly(cells), _readonly(rec["vertex"].astype(np.int64)),
                    _readonly(rec["score"].astype(np.float64)))
