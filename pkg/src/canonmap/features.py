"""Dense per-cell feature maps and cosine-similarity matching.

A FeatureMap is the sole currency between the pipeline and any feature
extractor: a (H_f, W_f, D_f) float32 grid plus a foreground mask, stored
on disk in the CFM1 format. The module also provides a synthetic feature
generator that embeds the canonical 3D coordinates visible at each cell,
giving ground-truth correspondences for closed-loop testing.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .mesh import _readonly

# most-negative finite value: masked cells can never win an argmax
NEG_SENTINEL = float(np.finfo(np.float64).min)


class FeatureFormatError(ValueError):
    """CFM1 file is malformed."""


@dataclass(frozen=True)
class FeatureMap:
    features: np.ndarray    # (H_f, W_f, D_f) float32
    mask: np.ndarray        # (H_f, W_f) bool
    source_size: tuple      # (H, W) of the originating image

    @property
    def grid(self):
        return self.mask.shape

    @property
    def dim(self):
        return self.features.shape[2]

    def foreground_cells(self):
        """(N, 2) array of (row, col) foreground cells."""
        return np.argwhere(self.mask)


@dataclass(frozen=True)
class SimilarityField:
    """Cosine similarities from one query cell to every cell of a target.

    Foreground values lie in [-1, 1]; masked-out cells hold NEG_SENTINEL.
    """

    values: np.ndarray      # (H_f, W_f) float64

    def argmax(self):
        flat = int(np.argmax(self.values))
        return np.unravel_index(flat, self.values.shape)


def make_feature_map(features, mask, source_size):
    features = np.ascontiguousarray(features, dtype=np.float32)
    mask = np.ascontiguousarray(mask, dtype=bool)
    if features.shape[:2] != mask.shape:
        raise ValueError("feature grid and mask shapes differ")
    return FeatureMap(_readonly(features), _readonly(mask), (int(source_size[0]), int(source_size[1])))


# --- CFM1 serialization ----------------------------------------------------
# magic "CFM1", u32 H_f, W_f, D_f, H, W, then H_f*W_f u8 mask, then f32
# features row-major cell-major; little-endian.

CFM1_MAGIC = b"CFM1"


def save_feature_map(fm, path):
    hf, wf = fm.grid
    with open(path, "wb") as fh:
        fh.write(CFM1_MAGIC)
        fh.write(struct.pack("<IIIII", hf, wf, fm.dim, fm.source_size[0], fm.source_size[1]))
        fh.write(fm.mask.astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(fm.features, dtype="<f4").tobytes())


def load_feature_map(path):
    """Read and validate a CFM1 file.

    Rejects bad magic, truncated payloads and maps with no foreground.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CFM1_MAGIC:
            raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected CFM1")
        header = fh.read(20)
        if len(header) < 20:
            raise FeatureFormatError(f"{path}: truncated header")
        hf, wf, df, h, w = struct.unpack("<IIIII", header)
        mask_raw = fh.read(hf * wf)
        feat_raw = fh.read(4 * hf * wf * df)
        if len(mask_raw) != hf * wf or len(feat_raw) != 4 * hf * wf * df:
            raise FeatureFormatError(f"{path}: truncated payload")
        trailing = fh.read(1)
        if trailing:
            raise FeatureFormatError(f"{path}: trailing bytes after payload")
    mask = np.frombuffer(mask_raw, dtype=np.uint8).reshape(hf, wf).astype(bool)
    if not mask.any():
        raise FeatureFormatError(f"{path}: zero foreground cells")
    features = np.frombuffer(feat_raw, dtype="<f4").reshape(hf, wf, df)
    fm = make_feature_map(features, mask, (h, w))
    fg = fm.features[fm.mask]
    if (np.abs(fg).max(axis=1) == 0).any():
        raise FeatureFormatError(f"{path}: all-zero feature vector on a foreground cell")
    return fm


# --- similarity ------------------------------------------------------------

def _cosine_field(feats64, norms, mask, q, masked=True):
    """Shared cosine-field primitive over a prepared target grid.

    Every caller (single query, batched pooling) funnels through this exact
    arithmetic, so pooled scores are bitwise-reproducible however they are
    computed.
    """
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError("zero-norm query feature vector")
    denom = np.maximum(norms * qn, 1e-300)
    values = np.einsum("hwd,d->hw", feats64, q) / denom
    values[norms == 0.0] = 0.0
    if masked:
        values = np.where(mask, values, NEG_SENTINEL)
    return values


def prepare_target(fm):
    """Precompute the float64 grid and per-cell norms for repeated queries."""
    feats64 = fm.features.astype(np.float64)
    return feats64, np.linalg.norm(feats64, axis=2)


def cosine_similarity(src, u, tgt, masked=True):
    """Cosine similarity between src cell ``u`` and every cell of ``tgt``.

    With ``masked`` set, background cells of the target get NEG_SENTINEL so
    downstream argmaxes stay on the object. Zero-norm target cells (possible
    only on background) yield 0 when unmasked.
    """
    r, c = int(u[0]), int(u[1])
    if not src.mask[r, c]:
        raise ValueError(f"query cell {u} is not foreground")
    q = src.features[r, c].astype(np.float64)
    feats64, norms = prepare_target(tgt)
    return SimilarityField(_readonly(_cosine_field(feats64, norms, tgt.mask, q, masked)))


# --- pixel <-> cell mapping ------------------------------------------------

def pixels_to_cells(pixels, image_size, grid):
    """Proportional scaling with floor rounding, image pixels -> cells."""
    p = np.asarray(pixels, dtype=np.float64)
    h, w = image_size
    hf, wf = grid
    rows = np.clip(np.floor(p[..., 0] * hf / h), 0, hf - 1)
    cols = np.clip(np.floor(p[..., 1] * wf / w), 0, wf - 1)
    return np.stack([rows, cols], axis=-1).astype(np.int64)


def snap_to_foreground(cells, mask):
    """Move any background cell to its nearest foreground cell."""
    if not mask.any():
        raise ValueError("mask has no foreground")
    _, nearest = ndimage.distance_transform_edt(~mask, return_indices=True)
    cells = np.array(cells, dtype=np.int64, copy=True)
    off = ~mask[cells[..., 0], cells[..., 1]]
    if off.any():
        cells[off, 0] = nearest[0][cells[off, 0], cells[off, 1]]
        cells[off, 1] = nearest[1][cells[off, 0], cells[off, 1]]
    return cells


def downsample_mask(mask, grid):
    """Majority-vote block downsampling of a pixel mask to the cell grid."""
    h, w = mask.shape
    hf, wf = grid
    rows = np.minimum((np.arange(h) * hf) // h, hf - 1)
    cols = np.minimum((np.arange(w) * wf) // w, wf - 1)
    counts = np.zeros((hf, wf))
    totals = np.zeros((hf, wf))
    np.add.at(counts, (rows[:, None].repeat(w, 1), cols[None, :].repeat(h, 0)), mask.astype(float))
    np.add.at(totals, (rows[:, None].repeat(w, 1), cols[None, :].repeat(h, 0)), 1.0)
    return counts * 2 > totals


# --- synthetic oracle features ---------------------------------------------

def coordinate_embedding(dim, seed):
    """Fixed random linear map from 3D coordinates to feature space.

    Columns are orthonormalized so the embedding is an isometry up to
    rotation: cosine ranking in feature space then matches coordinate
    ranking exactly instead of through a randomly distorted metric. The
    same seed must be reused across views/images so identical surface
    points embed identically.
    """
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(dim, 3))
    q, r = np.linalg.qr(g)
    # fix signs so the map is a deterministic function of the seed
    return q * np.sign(np.diag(r))


def _cell_positions(view, grid):
    """Canonical coordinate of the surface point visible at each cell.

    A cell is foreground when the majority of its pixels are; its coordinate
    is taken from the foreground pixel closest to the cell center, which
    keeps boundary cells pointing at a single surface point instead of a
    smeared average. Also returns that representative pixel per cell.
    """
    if view.positions is None:
        raise ValueError("view was rendered without positions; pass with_positions=True")
    h, w = view.mask.shape
    hf, wf = grid
    rows = np.minimum((np.arange(h) * hf) // h, hf - 1)
    cols = np.minimum((np.arange(w) * wf) // w, wf - 1)
    rr = rows[:, None].repeat(w, 1)
    cc = cols[None, :].repeat(h, 0)

    fg = view.mask
    # squared distance of each pixel to its cell's center, in pixel units
    center_r = (rr + 0.5) * h / hf - 0.5
    center_c = (cc + 0.5) * w / wf - 0.5
    pr, pc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (pr - center_r) ** 2 + (pc - center_c) ** 2
    d2 = np.where(fg, d2, np.inf)

    best = np.full((hf, wf), np.inf)
    np.minimum.at(best, (rr, cc), d2)
    pick = fg & (d2 == best[rr, cc])
    positions = np.zeros((hf, wf, 3))
    rep_pixels = np.zeros((hf, wf, 2), dtype=np.int64)
    # later duplicates overwrite, deterministic given row-major order
    positions[rr[pick], cc[pick]] = view.positions[pick]
    rep_pixels[rr[pick], cc[pick], 0] = pr[pick]
    rep_pixels[rr[pick], cc[pick], 1] = pc[pick]

    cell_mask = downsample_mask(fg, grid) & np.isfinite(best)
    return positions, cell_mask, rep_pixels


def _cell_facing(view, rep_pixels, cell_mask):
    """Camera-facing factor per cell, decoded from a normals-style render."""
    if view.style != "normals":
        raise ValueError("obliquity corruption needs a normals-style view")
    z = view.image[rep_pixels[..., 0], rep_pixels[..., 1], 2].astype(np.float64)
    return np.where(cell_mask, np.clip(2.0 * z - 1.0, 0.0, 1.0), 0.0)


def _apply_corruption(feats, cell_mask, view, rep_pixels, noise, oblique,
                      seed, noise_seed):
    """Gaussian noise plus viewing-angle corruption on foreground cells.

    ``oblique`` scales an extra per-cell random offset by (1 - facing):
    surface regions seen head-on stay clean, grazing regions degrade, the
    same way foreshortening degrades real patch features.
    """
    if noise > 0.0 or oblique > 0.0:
        rng = np.random.default_rng([seed, noise_seed])
        if noise > 0.0:
            feats = feats + noise * rng.normal(size=feats.shape)
        if oblique > 0.0:
            facing = _cell_facing(view, rep_pixels, cell_mask)
            junk = rng.normal(size=feats.shape)
            feats = feats + oblique * (1.0 - facing)[..., None] * junk
    return feats


def synth_features(mesh, view, dim=16, noise=0.0, seed=0, noise_seed=0,
                   grid=(32, 32), embedding=None, oblique=0.0):
    """Oracle features: a fixed linear embedding of the canonical coordinates
    visible at each cell, plus isotropic Gaussian noise.

    Identical surface points across views get near-identical features, so
    the generator stands in for an ideal semantic extractor with known
    ground truth. ``embedding`` overrides the default map drawn from
    ``seed`` (used to model appearance domains); ``oblique`` adds
    viewing-angle-dependent corruption.
    """
    if dim < 3:
        raise ValueError("feature dimension must be >= 3")
    if embedding is None:
        embedding = coordinate_embedding(dim, seed)
    positions, cell_mask, rep = _cell_positions(view, grid)
    feats = positions @ embedding.T
    feats = _apply_corruption(feats, cell_mask, view, rep, noise, oblique,
                              seed, noise_seed)
    feats[~cell_mask] = 0.0
    # a cell whose coordinate embeds to ~0 cannot be matched by cosine
    degenerate = cell_mask & (np.linalg.norm(feats, axis=2) < 1e-9)
    cell_mask = cell_mask & ~degenerate
    feats[degenerate] = 0.0
    return make_feature_map(feats, cell_mask, view.mask.shape)


def synth_flipped_features(view, plane_axis, dim=16, noise=0.0, seed=0,
                           noise_seed=0, grid=(32, 32), embedding=None):
    """Oracle features of the horizontally flipped image.

    Flipping the image mirrors the object, so the surface point seen at the
    mirrored cell carries the coordinate reflected across the template's
    symmetry plane. Grid and mask are mirrored left-right; coordinates are
    reflected before embedding.
    """
    if embedding is None:
        embedding = coordinate_embedding(dim, seed)
    axis = {"x": 0, "y": 1, "z": 2}[plane_axis] if isinstance(plane_axis, str) else int(plane_axis)
    positions, cell_mask, _ = _cell_positions(view, grid)
    reflected = positions.copy()
    reflected[..., axis] *= -1.0
    feats = reflected @ embedding.T
    if noise > 0.0:
        rng = np.random.default_rng([seed, noise_seed])
        feats = feats + noise * rng.normal(size=feats.shape)
    feats[~cell_mask] = 0.0
    feats = feats[:, ::-1]
    cell_mask = cell_mask[:, ::-1]
    degenerate = cell_mask & (np.linalg.norm(feats, axis=2) < 1e-9)
    cell_mask = cell_mask & ~degenerate
    feats = feats.copy()
    feats[degenerate] = 0.0
    return make_feature_map(feats, cell_mask, view.mask.shape)


def cell_ground_truth(mesh, view, grid):
    """Nearest template vertex per foreground cell, -1 elsewhere.

    Derived from the rendered canonical coordinates, this is the reference
    answer the closed-loop tests score against.
    """
    positions, cell_mask, _ = _cell_positions(view, grid)
    hf, wf = cell_mask.shape
    gt = np.full((hf, wf), -1, dtype=np.int64)
    cells = np.argwhere(cell_mask)
    if cells.size == 0:
        return gt
    pts = positions[cell_mask]
    d2 = ((pts[:, None, :] - mesh.vertices[None]) ** 2).sum(axis=2)
    gt[cell_mask] = np.argmin(d2, axis=1)
    return gt
