"""Surface embedding model, loss suite and Adam trainer.

Vertices and pixels are embedded in a shared D-dimensional space: vertex
embeddings are a learnable coefficient matrix applied to the spectral
basis (so they stay smooth over the surface), pixel embeddings come from a
small two-layer head over extracted features. Matching a pixel to the
template is a softmax over vertex/pixel inner products.

All gradients are analytic; the finite-difference check in the test suite
is the reference for every term.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .mesh import _readonly

ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre: (1.0 / np.cosh(pre)) ** 2),
    "linear": (lambda x: x, lambda pre: np.ones_like(pre)),
}


class TrainingDivergence(RuntimeError):
    """A loss term became non-finite during training."""


@dataclass
class PixelHead:
    """Two-layer map from extractor features to the embedding space."""

    w1: np.ndarray  # (hidden, D_f)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (D, hidden)
    b2: np.ndarray  # (D,)
    activation: str = "tanh"

    def copy(self):
        return PixelHead(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                         self.b2.copy(), self.activation)


@dataclass
class CseModel:
    """Learnable parameters plus the fixed spectral basis they live in."""

    coeffs: np.ndarray      # (Q, D)
    head: PixelHead
    basis: object           # SpectralBasis
    mesh_id: str = ""

    @property
    def embed_dim(self):
        return self.coeffs.shape[1]

    @property
    def feat_dim(self):
        return self.head.w1.shape[1]

    def copy(self):
        return CseModel(self.coeffs.copy(), self.head.copy(), self.basis, self.mesh_id)


def init_model(basis, feat_dim, embed_dim=16, hidden=64, activation="tanh",
               seed=0, init_std=0.02, mesh_id=""):
    """Gaussian-initialized model; biases start at zero."""
    rng = np.random.default_rng(seed)
    q = basis.num_modes
    coeffs = init_std * rng.normal(size=(q, embed_dim))
    head = PixelHead(
        w1=init_std * rng.normal(size=(hidden, feat_dim)),
        b1=np.zeros(hidden),
        w2=init_std * rng.normal(size=(embed_dim, hidden)),
        b2=np.zeros(embed_dim),
        activation=activation,
    )
    return CseModel(coeffs, head, basis, mesh_id)


def vertex_embeddings(model):
    """(K, D) embedding of every template vertex."""
    return model.basis.basis @ model.coeffs


def _head_forward(head, feats):
    f64 = np.asarray(feats, dtype=np.float64)
    pre = f64 @ head.w1.T + head.b1
    act = ACTIVATIONS[head.activation][0]
    h = act(pre)
    return h @ head.w2.T + head.b2, (f64, pre, h)


def _head_backward(head, cache, dout, grads):
    f64, pre, h = cache
    grads["w2"] += dout.T @ h
    grads["b2"] += dout.sum(axis=0)
    dh = dout @ head.w2
    dpre = dh * ACTIVATIONS[head.activation][1](pre)
    grads["w1"] += dpre.T @ f64
    grads["b1"] += dpre.sum(axis=0)


def pixel_embed(model, feats):
    """Embed one feature vector or a batch of them."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[-1] != model.feat_dim:
        raise ValueError(f"feature dim {feats.shape[-1]} != head input {model.feat_dim}")
    single = feats.ndim == 1
    out, _ = _head_forward(model.head, feats[None] if single else feats)
    return out[0] if single else out


def _softmax_rows(z):
    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(z):
    zs = z - z.max(axis=-1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def match_distribution(model, pix_embedding):
    """Softmax over vertex inner products for one pixel embedding; (K,)."""
    e = vertex_embeddings(model)
    return _softmax_rows((e @ np.asarray(pix_embedding, dtype=np.float64))[None])[0]


# --- individual losses (forward only; training uses the fused path) --------

def loss_pseudo(model, feats, targets):
    """Mean cross-entropy of pseudo-label vertices; 0 for a perfect model."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if feats.shape[0] == 0:
        raise ValueError("empty batch")
    e = vertex_embeddings(model)
    epix, _ = _head_forward(model.head, feats)
    logp = _log_softmax_rows(epix @ e.T)
    return float(-logp[np.arange(len(targets)), targets].mean())


def loss_dist(model, feats, targets, geo):
    """Expected geodesic distance to the pseudo-label under the match
    distribution; non-negative, zero when all mass sits on the label."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    e = vertex_embeddings(model)
    epix, _ = _head_forward(model.head, feats)
    probs = _softmax_rows(epix @ e.T)
    d = geo.dist[targets]  # (P, K)
    return float((probs * d).sum(axis=1).mean())


def _cyc_distance_matrix(cells, grid):
    c = np.asarray(cells, dtype=np.float64) / max(grid)
    return np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)


def loss_cyc(model, cells, feats, grid):
    """Image-template-image cycle: expected return distance in normalized
    image units, averaged over the sampled start cells."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    n = feats.shape[0]
    if n < 1:
        raise ValueError("need at least one cell")
    e = vertex_embeddings(model)
    epix, _ = _head_forward(model.head, feats)
    z = epix @ e.T
    p_cell_to_vert = _softmax_rows(z)
    p_vert_to_cell = _softmax_cols(z)
    p_return = p_cell_to_vert @ p_vert_to_cell.T
    dmat = _cyc_distance_matrix(cells, grid)
    return float((dmat * p_return).sum() / n)


def _softmax_cols(z):
    zs = z - z.max(axis=0, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=0, keepdims=True)


def loss_eq(model, featmap, flipped_featmap, symmetry, cells,
            residual_gate=None):
    """Total-variation mismatch between a cell's distribution and the
    mirrored distribution of its mirrored cell in the flipped image."""
    if residual_gate is not None and symmetry.residual > residual_gate:
        raise ValueError(
            f"symmetry residual {symmetry.residual:.4g} above gate {residual_gate:.4g}")
    cells = np.asarray(cells, dtype=np.int64)
    wf = featmap.grid[1]
    mirrored = cells.copy()
    mirrored[:, 1] = wf - 1 - mirrored[:, 1]
    keep = flipped_featmap.mask[mirrored[:, 0], mirrored[:, 1]]
    cells, mirrored = cells[keep], mirrored[keep]
    if cells.shape[0] == 0:
        return 0.0
    e = vertex_embeddings(model)
    fa = featmap.features[cells[:, 0], cells[:, 1]]
    fb = flipped_featmap.features[mirrored[:, 0], mirrored[:, 1]]
    pa = _softmax_rows(_head_forward(model.head, fa)[0] @ e.T)
    pb = _softmax_rows(_head_forward(model.head, fb)[0] @ e.T)
    return float(np.abs(pa - pb[:, symmetry.flip_index]).sum(axis=1).mean())


def loss_syn(model, bank):
    """Direct render supervision: cross-entropy of each visible vertex at
    its own projection, summed over views and scaled by 1/K."""
    e = vertex_embeddings(model)
    k = e.shape[0]
    total = 0.0
    for bv in bank.views:
        vis = bv.visible
        if not vis.any():
            continue
        feats = bv.featmap.features[bv.cells[vis, 0], bv.cells[vis, 1]]
        epix, _ = _head_forward(model.head, feats)
        logp = _log_softmax_rows(epix @ e.T)
        total -= logp[np.arange(vis.sum()), np.where(vis)[0]].sum()
    return float(total / k)


@dataclass
class LossWeights:
    alpha: float = 0.1    # pseudo-label cross-entropy
    beta: float = 0.002   # cycle consistency
    gamma: float = 0.002  # distance-aware penalty
    delta: float = 0.001  # flip equivariance
    zeta: float = 0.1     # render supervision


@dataclass
class LossReport:
    pseudo: float = 0.0
    dist: float = 0.0
    cyc: float = 0.0
    eq: float = 0.0
    syn: float = 0.0
    total: float = 0.0

    def check_finite(self, context=""):
        for name in ("pseudo", "dist", "cyc", "eq", "syn", "total"):
            if not np.isfinite(getattr(self, name)):
                raise TrainingDivergence(f"loss term '{name}' is non-finite {context}")


@dataclass
class ImageSample:
    """One training image: features, optional flipped features, pseudo labels."""

    image_id: str
    featmap: object
    pseudo: object                 # PseudoGt
    flip_featmap: object = None


@dataclass
class PreparedImage:
    """Per-step tensors for one image (pseudo cells plus sampled cells)."""

    feats_pseudo: np.ndarray
    targets: np.ndarray
    cyc_cells: np.ndarray
    cyc_feats: np.ndarray
    eq_feats_a: np.ndarray
    eq_feats_b: np.ndarray
    grid: tuple


def prepare_image(sample, rng=None, max_cells=64, flip_index=None):
    """Gather head inputs for one image, sampling the cyc/eq cell subset."""
    fm = sample.featmap
    pg = sample.pseudo
    feats_pseudo = fm.features[pg.cells[:, 0], pg.cells[:, 1]].astype(np.float64)
    fg = fm.foreground_cells()
    take = min(max_cells, fg.shape[0])
    if rng is None:
        chosen = fg[:take]
    else:
        chosen = fg[rng.choice(fg.shape[0], size=take, replace=False)]
    cyc_feats = fm.features[chosen[:, 0], chosen[:, 1]].astype(np.float64)

    eq_a = np.zeros((0, fm.dim))
    eq_b = np.zeros((0, fm.dim))
    if sample.flip_featmap is not None:
        wf = fm.grid[1]
        mirrored = chosen.copy()
        mirrored[:, 1] = wf - 1 - mirrored[:, 1]
        keep = sample.flip_featmap.mask[mirrored[:, 0], mirrored[:, 1]]
        if keep.any():
            eq_a = fm.features[chosen[keep, 0], chosen[keep, 1]].astype(np.float64)
            eq_b = sample.flip_featmap.features[
                mirrored[keep, 0], mirrored[keep, 1]].astype(np.float64)
    return PreparedImage(
        feats_pseudo=feats_pseudo,
        targets=pg.vertices.astype(np.int64),
        cyc_cells=chosen, cyc_feats=cyc_feats,
        eq_feats_a=eq_a, eq_feats_b=eq_b, grid=fm.grid,
    )


def _zero_grads(model):
    return {
        "coeffs": np.zeros_like(model.coeffs),
        "w1": np.zeros_like(model.head.w1),
        "b1": np.zeros_like(model.head.b1),
        "w2": np.zeros_like(model.head.w2),
        "b2": np.zeros_like(model.head.b2),
        "_dE": np.zeros((model.basis.num_vertices, model.embed_dim)),
    }


def total_loss(model, prepared, weights, geo=None, flip_index=None, bank=None,
               with_grads=False):
    """Weighted loss over a batch of prepared images plus the render term.

    Image losses are averaged over images; the render-supervision term is a
    sum over bank views scaled by 1/K. Returns a LossReport, and a gradient
    dict when ``with_grads`` is set.
    """
    e = vertex_embeddings(model)
    k = e.shape[0]
    n_img = len(prepared)
    grads = _zero_grads(model) if with_grads else None
    w = weights
    report = LossReport()

    def backprop_block(feats, cache, epix, d_z):
        d_epix = d_z @ e
        grads["_dE"] += d_z.T @ epix
        _head_backward(model.head, cache, d_epix, grads)

    for img in prepared:
        img_scale = 1.0 / n_img

        # pseudo-label cross-entropy + distance-aware penalty share a block
        if img.feats_pseudo.shape[0] > 0:
            feats, targets = img.feats_pseudo, img.targets
            p_count = feats.shape[0]
            epix, cache = _head_forward(model.head, feats)
            z = epix @ e.T
            logp = _log_softmax_rows(z)
            probs = np.exp(logp)
            l_pseudo = float(-logp[np.arange(p_count), targets].mean())
            report.pseudo += l_pseudo * img_scale
            l_dist = 0.0
            if geo is not None:
                dmat = geo.dist[targets]
                exp_d = (probs * dmat).sum(axis=1)
                l_dist = float(exp_d.mean())
                report.dist += l_dist * img_scale
            if with_grads and (w.alpha != 0.0 or w.gamma != 0.0):
                d_z = np.zeros_like(z)
                if w.alpha != 0.0:
                    d_z += w.alpha * img_scale / p_count * probs
                    d_z[np.arange(p_count), targets] -= w.alpha * img_scale / p_count
                if w.gamma != 0.0 and geo is not None:
                    d_z += w.gamma * img_scale / p_count * probs * (dmat - exp_d[:, None])
                backprop_block(feats, cache, epix, d_z)

        # cycle consistency
        if img.cyc_feats.shape[0] >= 2:
            feats = img.cyc_feats
            c_count = feats.shape[0]
            epix, cache = _head_forward(model.head, feats)
            z = epix @ e.T
            p1 = _softmax_rows(z)
            p2 = _softmax_cols(z)
            dmat = _cyc_distance_matrix(img.cyc_cells, img.grid)
            p_ret = p1 @ p2.T
            l_cyc = float((dmat * p_ret).sum() / c_count)
            report.cyc += l_cyc * img_scale
            if with_grads and w.beta != 0.0:
                scale = w.beta * img_scale / c_count
                g1 = scale * (dmat @ p2)
                g2 = scale * (dmat @ p1)   # dmat is symmetric
                d_z = p1 * (g1 - (g1 * p1).sum(axis=1, keepdims=True))
                d_z += p2 * (g2 - (g2 * p2).sum(axis=0, keepdims=True))
                backprop_block(feats, cache, epix, d_z)

        # flip equivariance
        if img.eq_feats_a.shape[0] > 0 and flip_index is not None:
            fa, fb = img.eq_feats_a, img.eq_feats_b
            c_count = fa.shape[0]
            epix_a, cache_a = _head_forward(model.head, fa)
            epix_b, cache_b = _head_forward(model.head, fb)
            pa = _softmax_rows(epix_a @ e.T)
            pb = _softmax_rows(epix_b @ e.T)
            pb_perm = pb[:, flip_index]
            diff = pa - pb_perm
            l_eq = float(np.abs(diff).sum(axis=1).mean())
            report.eq += l_eq * img_scale
            if with_grads and w.delta != 0.0:
                scale = w.delta * img_scale / c_count
                sgn = np.sign(diff)
                g_a = scale * sgn
                g_b = np.zeros_like(pb)
                np.add.at(g_b.T, flip_index, -(scale * sgn).T)
                d_za = pa * (g_a - (g_a * pa).sum(axis=1, keepdims=True))
                d_zb = pb * (g_b - (g_b * pb).sum(axis=1, keepdims=True))
                backprop_block(fa, cache_a, epix_a, d_za)
                backprop_block(fb, cache_b, epix_b, d_zb)

    # render supervision over the view bank
    if bank is not None:
        l_syn = 0.0
        for bv in bank.views:
            vis = bv.visible
            if not vis.any():
                continue
            feats = bv.featmap.features[bv.cells[vis, 0], bv.cells[vis, 1]].astype(np.float64)
            targets = np.where(vis)[0]
            epix, cache = _head_forward(model.head, feats)
            z = epix @ e.T
            logp = _log_softmax_rows(z)
            l_syn -= logp[np.arange(len(targets)), targets].sum() / k
            if with_grads and w.zeta != 0.0:
                probs = np.exp(logp)
                d_z = w.zeta / k * probs
                d_z[np.arange(len(targets)), targets] -= w.zeta / k
                backprop_block(feats, cache, epix, d_z)
        report.syn = float(l_syn)

    report.total = (w.alpha * report.pseudo + w.beta * report.cyc
                    + w.gamma * report.dist + w.delta * report.eq
                    + w.zeta * report.syn)
    if with_grads:
        grads["coeffs"] = model.basis.basis.T @ grads.pop("_dE")
        return report, grads
    return report


# --- Adam trainer -----------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    lr_drop_epoch: int = 20       # epochs after which lr is multiplied down
    lr_drop_factor: float = 0.1
    batch_size: int = 1
    seed: int = 0
    cyc_cells: int = 64
    # render-supervision views are minibatched like images; None sums the
    # whole bank every step (exact but slow, and it drowns the image losses)
    syn_views_per_step: int = 6
    weights: LossWeights = field(default_factory=LossWeights)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr, beta1, beta2, eps):
        self.t += 1
        for key, p in params.items():
            g = grads[key]
            self.m[key] = beta1 * self.m[key] + (1 - beta1) * g
            self.v[key] = beta2 * self.v[key] + (1 - beta2) * g * g
            m_hat = self.m[key] / (1 - beta1 ** self.t)
            v_hat = self.v[key] / (1 - beta2 ** self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _params(model):
    return {
        "coeffs": model.coeffs,
        "w1": model.head.w1, "b1": model.head.b1,
        "w2": model.head.w2, "b2": model.head.b2,
    }


def train(model, samples, config, geo=None, symmetry=None, bank=None):
    """Adam on all parameters; returns (trained model, per-epoch history).

    The learning rate drops by ``lr_drop_factor`` once ``lr_drop_epoch``
    epochs have finished. Deterministic for a fixed seed: the only
    randomness is the epoch shuffle and the cyc/eq cell subsets, both drawn
    from one seeded generator.
    """
    model = model.copy()
    params = _params(model)
    adam = AdamState(params)
    rng = np.random.default_rng(config.seed)
    flip_index = symmetry.flip_index if symmetry is not None else None
    history = []
    n = len(samples)
    for epoch in range(1, config.epochs + 1):
        lr = config.lr
        if epoch > config.lr_drop_epoch:
            lr = config.lr * config.lr_drop_factor
        order = rng.permutation(n)
        epoch_report = LossReport()
        n_batches = 0
        for start in range(0, n, config.batch_size):
            chosen = order[start:start + config.batch_size]
            prepared = [prepare_image(samples[i], rng=rng, max_cells=config.cyc_cells,
                                      flip_index=flip_index) for i in chosen]
            step_bank = bank
            if bank is not None and config.syn_views_per_step is not None \
                    and config.syn_views_per_step < bank.num_views:
                picks = rng.choice(bank.num_views, size=config.syn_views_per_step,
                                   replace=False)
                step_bank = type(bank)(views=tuple(bank.views[j] for j in picks),
                                       mesh_id=bank.mesh_id)
            report, grads = total_loss(
                model, prepared, config.weights, geo=geo,
                flip_index=flip_index, bank=step_bank, with_grads=True)
            report.check_finite(f"(epoch {epoch})")
            adam.step(params, grads, lr, config.adam_beta1,
                      config.adam_beta2, config.adam_eps)
            for name in ("pseudo", "dist", "cyc", "eq", "syn", "total"):
                setattr(epoch_report, name, getattr(epoch_report, name) + getattr(report, name))
            n_batches += 1
        for name in ("pseudo", "dist", "cyc", "eq", "syn", "total"):
            setattr(epoch_report, name, getattr(epoch_report, name) / max(n_batches, 1))
        history.append({"epoch": epoch, "lr": lr, "pseudo": epoch_report.pseudo,
                        "dist": epoch_report.dist, "cyc": epoch_report.cyc,
                        "eq": epoch_report.eq, "syn": epoch_report.syn,
                        "total": epoch_report.total})
    return model, history


# --- CCK1 checkpoint ---------------------------------------------------------
# magic "CCK1", u32 Q, D, D_f, hidden, then f32 coeffs (Q*D), w1, b1, w2, b2,
# then u32 mesh-id length + utf-8 bytes; little-endian.

CCK1_MAGIC = b"CCK1"


def save_model(model, path):
    q, d = model.coeffs.shape
    hidden, d_f = model.head.w1.shape
    with open(path, "wb") as fh:
        fh.write(CCK1_MAGIC)
        fh.write(struct.pack("<IIII", q, d, d_f, hidden))
        for arr in (model.coeffs, model.head.w1, model.head.b1,
                    model.head.w2, model.head.b2):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        mesh_id = model.mesh_id.encode("utf-8")
        fh.write(struct.pack("<I", len(mesh_id)))
        fh.write(mesh_id)


def load_model(path, basis):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CCK1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected CCK1")
        q, d, d_f, hidden = struct.unpack("<IIII", fh.read(16))
        if q != basis.num_modes:
            raise ValueError(f"{path}: checkpoint has Q={q}, basis has Q={basis.num_modes}")

        def read(shape):
            n = int(np.prod(shape))
            arr = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
            if arr.size != n:
                raise ValueError(f"{path}: truncated CCK1 payload")
            return arr.reshape(shape)

        coeffs = read((q, d))
        head = PixelHead(read((hidden, d_f)), read((hidden,)),
                         read((d, hidden)), read((d,)), activation="tanh")
        (id_len,) = struct.unpack("<I", fh.read(4))
        mesh_id = fh.read(id_len).decode("utf-8")
    return CseModel(coeffs, head, basis, mesh_id)
