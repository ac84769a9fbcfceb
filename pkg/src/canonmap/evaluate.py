"""Scoring trained models: geodesic error and keypoint-transfer PCK.

Annotations and keypoint pairs arrive as line-delimited JSON; scores are
grouped per class (records may carry a "class" key) with a pooled mean per
class and an average of class means, and the keypoint route goes through
the template by default (image -> vertex -> image).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .model import pixel_embed, vertex_embeddings


@dataclass(frozen=True)
class Annotation:
    image: str
    cell: tuple          # (row, col) feature cell
    vertex: int
    label: str = "all"   # class grouping for the report


@dataclass(frozen=True)
class KeypointPair:
    image_a: str
    image_b: str
    keypoints: tuple     # of ((ra, ca), (rb, cb)) cell pairs
    bbox: tuple          # (h, w) of the object in B, in cell units
    label: str = "all"


def load_annotations(path):
    """JSONL records: {"image": id, "u": [r, c], "vertex": k, "class"?: name}."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Annotation(
                image=rec["image"], cell=(int(rec["u"][0]), int(rec["u"][1])),
                vertex=int(rec["vertex"]), label=rec.get("class", "all"),
            ))
    return out


def load_keypoint_pairs(path):
    """JSONL records: {"a": id, "b": id, "kps": [[[r,c],[r,c]],...], "bbox": [h,w]}."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kps = tuple(((int(p[0][0]), int(p[0][1])), (int(p[1][0]), int(p[1][1])))
                        for p in rec["kps"])
            if not kps:
                raise ValueError(f"keypoint pair {rec['a']}/{rec['b']} has no keypoints")
            out.append(KeypointPair(
                image_a=rec["a"], image_b=rec["b"], keypoints=kps,
                bbox=(float(rec["bbox"][0]), float(rec["bbox"][1])),
                label=rec.get("class", "all"),
            ))
    return out


def predict_vertex(model, featmap, cell):
    """Argmax template vertex for one query cell."""
    e = vertex_embeddings(model)
    emb = pixel_embed(model, featmap.features[int(cell[0]), int(cell[1])])
    return int(np.argmax(e @ emb))


def geodesic_error(model, features, annotations, geo):
    """Mean geodesic distance between predicted and annotated vertices.

    ``features`` maps image id -> FeatureMap. Returns (overall mean over
    class means, per-class dict, per-record errors).
    """
    per_class = {}
    per_record = []
    for ann in annotations:
        if ann.image not in features:
            raise KeyError(f"missing feature map for annotated image {ann.image!r}")
        pred = predict_vertex(model, features[ann.image], ann.cell)
        err = float(geo.dist[pred, ann.vertex])
        per_record.append(err)
        per_class.setdefault(ann.label, []).append(err)
    class_means = {c: float(np.mean(v)) for c, v in per_class.items()}
    mean = float(np.mean(list(class_means.values()))) if class_means else float("nan")
    return mean, class_means, per_record


def transfer_keypoints(model, feat_a, feat_b, u_a, route="im2m2im"):
    """Map a cell of image A to a cell of image B.

    The default route goes through the template: predict the vertex for
    ``u_a``, then pick the foreground cell of B whose embedding has the
    largest inner product with that vertex's embedding. The "im2im" route
    matches pixel embeddings directly.
    """
    fg = feat_b.foreground_cells()
    if fg.shape[0] == 0:
        raise ValueError("image B has no foreground cells")
    emb_b = pixel_embed(model, feat_b.features[fg[:, 0], fg[:, 1]])
    if route == "im2m2im":
        e = vertex_embeddings(model)
        k_hat = predict_vertex(model, feat_a, u_a)
        scores = emb_b @ e[k_hat]
    elif route == "im2im":
        emb_a = pixel_embed(model, feat_a.features[int(u_a[0]), int(u_a[1])])
        scores = emb_b @ emb_a
    else:
        raise ValueError(f"unknown transfer route {route!r}")
    best = fg[int(np.argmax(scores))]
    return int(best[0]), int(best[1])


def pck(model, pairs, features, threshold=0.1, route="im2m2im"):
    """Fraction of keypoints transferred within threshold x max bbox side."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must be in (0, 1)")
    hits = 0
    total = 0
    for pair in pairs:
        fa, fb = features[pair.image_a], features[pair.image_b]
        radius = threshold * max(pair.bbox)
        for (u_a, u_b) in pair.keypoints:
            pred = transfer_keypoints(model, fa, fb, u_a, route=route)
            dist = float(np.hypot(pred[0] - u_b[0], pred[1] - u_b[1]))
            hits += dist <= radius
            total += 1
    return hits / total if total else float("nan")
