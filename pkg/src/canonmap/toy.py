"""Bundled toy geometry and a synthetic closed-loop corpus generator.

Everything here exists so the full pipeline can be exercised end to end
without any external data: an icosphere template, posed instances of it,
oracle feature maps with known pixel-to-vertex ground truth, and the
annotation files the evaluation stage consumes.
"""

import json

import numpy as np
from scipy.spatial.transform import Rotation

from . import features as feat_mod
from .mesh import Mesh, make_mesh
from .render import Camera, render, project_vertices, sample_viewpoints


def make_icosphere(subdivisions=2, radius=1.0):
    """Icosahedron subdivided ``subdivisions`` times, vertices on the sphere.

    Vertex counts: 12, 42, 162, 642 for 0..3 subdivisions.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]

    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = np.array(verts[a]) + np.array(verts[b])
                m /= np.linalg.norm(m)
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for (a, b, c) in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    return make_mesh(np.array(verts) * radius, np.array(faces))


def make_tetrahedron():
    """Regular tetrahedron inscribed in the unit sphere."""
    s = 1.0 / np.sqrt(3.0)
    verts = np.array([(s, s, s), (s, -s, -s), (-s, s, -s), (-s, -s, s)])
    faces = np.array([(0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3)])
    return make_mesh(verts, faces)


def make_cube():
    """Axis-aligned unit cube, 8 vertices, 12 triangles."""
    verts = np.array([
        (x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)
    ], dtype=np.float64) * 0.5
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
        (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3),
    ]
    faces = []
    for (a, b, c, d) in quads:
        faces += [(a, b, c), (a, c, d)]
    return make_mesh(verts, np.array(faces))


def random_pose(rng, max_offset=0.0):
    """Random rigid transform (4x4) drawn from the given generator."""
    rot = Rotation.random(random_state=rng).as_matrix()
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = rng.uniform(-max_offset, max_offset, size=3)
    return pose


_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def conflation_matrix(mirror_ambiguity, mirror_axis):
    """3x3 map that partially folds points onto their mirror images.

    The shared feature extractor cannot fully tell left from right, so both
    photo and render features embed ``(1 - a) p + a reflect(p)``; the
    mirror-axis signal survives attenuated by (1 - 2a).
    """
    reflect = np.eye(3)
    axis = _AXIS_INDEX[mirror_axis] if isinstance(mirror_axis, str) else int(mirror_axis)
    reflect[axis, axis] = -1.0
    return (1.0 - mirror_ambiguity) * np.eye(3) + mirror_ambiguity * reflect


def photo_embedding(dim, seed, mirror_ambiguity=0.0, mirror_axis="z"):
    """Embedding used for posed-instance ("photo") features."""
    emb = feat_mod.coordinate_embedding(dim, seed)
    if mirror_ambiguity > 0.0:
        emb = emb @ conflation_matrix(mirror_ambiguity, mirror_axis)
    return emb


class OracleFeatureExtractor:
    """Synthetic feature source for rendered template views.

    The embedding matches the photo embedding (including its left-right
    conflation; one extractor serves both domains), with two render-side
    degradations on top:

    * ``render_shift``: blends in one fixed render-domain embedding,
      ``W = (1 - s) W_photo + s W_render``, the systematic appearance gap
      between template renders and photos. Supervision on renders alone
      then transfers poorly.
    * ``oblique``: viewing-angle corruption (foreshortening), so a view
      showing a region head-on matches it more reliably than a grazing
      view. This is what makes max pooling across views beat mean pooling.
    """

    def __init__(self, mesh, dim=16, noise=0.0, seed=0, render_shift=0.0,
                 oblique=0.0, mirror_ambiguity=0.0, mirror_axis="z",
                 grid=(32, 32)):
        self.mesh = mesh
        self.dim = dim
        self.noise = noise
        self.seed = seed
        self.oblique = oblique
        self.grid = grid
        emb = feat_mod.coordinate_embedding(dim, seed)
        if render_shift > 0.0:
            render_dom = feat_mod.coordinate_embedding(dim, (seed, 777))
            emb = (1.0 - render_shift) * emb + render_shift * render_dom
        if mirror_ambiguity > 0.0:
            emb = emb @ conflation_matrix(mirror_ambiguity, mirror_axis)
        self.embedding = emb

    def __call__(self, mesh, camera, view, index):
        return feat_mod.synth_features(
            mesh, view, dim=self.dim, noise=self.noise,
            seed=self.seed, noise_seed=index, grid=self.grid,
            embedding=self.embedding, oblique=self.oblique,
        )


def generate_instances(mesh, count, seed, image_size=(128, 128), grid=(32, 32),
                       dim=16, noise=0.05, embed_seed=0, radius_scale=2.5,
                       fov_y=np.deg2rad(55.0), flip_plane=None, embedding=None):
    """Render ``count`` posed instances of the template with oracle features.

    Returns a list of dicts with the feature map, an optional flipped
    feature map (mirrored coordinates, for the equivariance loss), and the
    ground-truth visible vertex per foreground cell.
    """
    rng = np.random.default_rng(seed)
    centroid = mesh.centroid()
    radius = radius_scale * mesh.bounding_radius()
    if embedding is None:
        embedding = feat_mod.coordinate_embedding(dim, embed_seed)
    out = []
    for idx in range(count):
        pose = random_pose(rng)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        cam = Camera(
            position=tuple(centroid + radius * direction),
            look_at=tuple(centroid), up=(0.0, 1.0, 0.0),
            fov_y=fov_y, image_size=image_size,
        )
        view = render(mesh, cam, style="normals", transform=pose, with_positions=True)
        fm = feat_mod.synth_features(
            mesh, view, dim=dim, noise=noise, seed=embed_seed,
            noise_seed=10_000 + idx, grid=grid, embedding=embedding,
        )
        flipped = None
        if flip_plane is not None:
            flipped = feat_mod.synth_flipped_features(
                view, flip_plane, dim=dim, noise=noise, seed=embed_seed,
                noise_seed=20_000 + idx, grid=grid, embedding=embedding,
            )
        gt_vertices = feat_mod.cell_ground_truth(mesh, view, grid)
        out.append({
            "id": f"inst_{idx:03d}",
            "features": fm,
            "flipped": flipped,
            "gt_vertices": gt_vertices,
            "camera": cam,
            "pose": pose,
        })
    return out


def closed_loop_setup(subdivisions=3, n_views=72, grid=(64, 64),
                      image_size=(256, 256), dim=16, noise=0.05,
                      render_shift=0.3, oblique=0.6, mirror_ambiguity=0.25,
                      n_train=20, n_test=10, basis_modes=64, seed=11,
                      test_seed=99):
    """Everything the closed-loop experiments need, built in memory.

    Returns a dict with the mesh, spectral basis, geodesic table, symmetry
    map, the rendered view bank (oracle features with the render-domain
    shift and foreshortening corruption), posed training instances (with
    flipped variants) and held-out test instances with ground-truth
    vertices. Photo and render features share one left-right-conflated
    extractor embedding.
    """
    from .geodesics import compute_geodesics
    from .mesh import detect_symmetry
    from .pseudo import build_view_bank
    from .spectral import compute_spectral_basis

    mesh = make_icosphere(subdivisions)
    geo = compute_geodesics(mesh)
    basis = compute_spectral_basis(mesh, basis_modes)
    sym = detect_symmetry(mesh)
    extractor = OracleFeatureExtractor(mesh, dim=dim, noise=noise, seed=0,
                                       render_shift=render_shift,
                                       oblique=oblique,
                                       mirror_ambiguity=mirror_ambiguity,
                                       mirror_axis=sym.plane, grid=grid)
    bank = build_view_bank(mesh, n_views, style="normals", extractor=extractor,
                           image_size=image_size, mesh_id="icosphere")
    photo_emb = photo_embedding(dim, 0, mirror_ambiguity, sym.plane)
    train_instances = generate_instances(
        mesh, n_train, seed=seed, image_size=image_size, grid=grid, dim=dim,
        noise=noise, flip_plane=sym.plane, embedding=photo_emb)
    test_instances = generate_instances(
        mesh, n_test, seed=test_seed, image_size=image_size, grid=grid,
        dim=dim, noise=noise, embedding=photo_emb)
    return {
        "mesh": mesh, "geo": geo, "basis": basis, "symmetry": sym,
        "bank": bank, "train": train_instances, "test": test_instances,
        "dim": dim, "grid": grid,
    }


def heldout_annotations(instances, per_image=3, seed=123):
    """(image index, cell, gt vertex) triples drawn from test instances."""
    rng = np.random.default_rng(seed)
    out = []
    for idx, inst in enumerate(instances):
        gt = inst["gt_vertices"]
        cands = np.argwhere(gt >= 0)
        pick = cands[rng.choice(len(cands), size=min(per_image, len(cands)),
                                replace=False)]
        for (r, c) in pick:
            out.append((idx, (int(r), int(c)), int(gt[r, c])))
    return out


def write_corpus(out_dir, instances, annotations_per_image=3, ann_seed=123):
    """Persist instance features as CFM1 files plus a JSONL annotation set.

    Annotation cells are sampled from foreground cells whose ground-truth
    vertex is known; the files feed the pseudo-gt, train and eval stages.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(ann_seed)
    ann_path = out_dir / "annotations.jsonl"
    with open(ann_path, "w", encoding="utf-8") as fh:
        for inst in instances:
            feat_mod.save_feature_map(inst["features"], out_dir / f"{inst['id']}.cfm")
            if inst["flipped"] is not None:
                feat_mod.save_feature_map(inst["flipped"], out_dir / f"{inst['id']}.flip.cfm")
            gt = inst["gt_vertices"]
            cells = np.argwhere(gt >= 0)
            if cells.size == 0:
                continue
            pick = rng.choice(len(cells), size=min(annotations_per_image, len(cells)), replace=False)
            for ci in pick:
                r, c = (int(x) for x in cells[ci])
                fh.write(json.dumps({
                    "image": inst["id"], "u": [r, c], "vertex": int(gt[r, c]),
                }) + "\n")
    return ann_path
