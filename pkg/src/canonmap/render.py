"""Deterministic software rasterizer for template views.

Renders normal-map, shaded or depth styles with a z-buffer under
perspective projection, and derives the per-vertex visibility set and
mask-snapped vertex projections that the pseudo-label pooling relies on.
No GPU, no anti-aliasing: identical inputs give bitwise-identical views.
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .mesh import _readonly

STYLES = ("normals", "shaded", "depth")

# elevations cycled across azimuths when sampling viewpoints (degrees);
# starting at 0 keeps the single-view case on the +z axis, and the high
# entries make sure polar regions are seen face-on somewhere in the ring
ELEVATIONS_DEG = (0.0, 20.0, 40.0, -15.0, 65.0, -40.0)


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple
    up: tuple = (0.0, 1.0, 0.0)
    fov_y: float = np.deg2rad(55.0)
    image_size: tuple = (512, 512)

    def __post_init__(self):
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position coincides with look_at")
        if not (0.0 < self.fov_y < np.pi):
            raise ValueError("fov_y must be in (0, pi)")


@dataclass(frozen=True)
class RenderedView:
    """One template render plus its vertex-level byproducts.

    ``image`` holds the style payload in [0, 1]: encoded camera-space
    normals for "normals" ((n+1)/2), headlight intensity for "shaded",
    normalized inverse depth for "depth". Background pixels are exactly 0.
    ``projections[k]`` is the mask-snapped pixel (row, col) of vertex k,
    valid whenever the mask is nonempty; ``visible[k]`` is the z-buffer
    visibility test at the vertex's raw projection.
    """

    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray        # (H, W) float64, 0 on background
    mask: np.ndarray         # (H, W) bool
    visible: np.ndarray      # (K,) bool
    projections: np.ndarray  # (K, 2) float32 (row, col)
    style: str
    camera: Camera
    positions: Optional[np.ndarray] = None  # (H, W, 3) canonical coords, on request

    @property
    def image_size(self):
        return self.depth.shape


def camera_frame(camera):
    """Rotation (world->camera rows) and translation of the view transform.

    Camera space: x right, y up, z toward the viewer (looking down -z);
    depth of a point is ``-z_cam``.
    """
    pos = np.asarray(camera.position, dtype=np.float64)
    target = np.asarray(camera.look_at, dtype=np.float64)
    up = np.asarray(camera.up, dtype=np.float64)
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("camera up vector is parallel to the view direction")
    right /= nr
    true_up = np.cross(right, fwd)
    rot = np.stack([right, true_up, -fwd])
    return rot, -rot @ pos


def camera_intrinsics(camera):
    h, w = camera.image_size
    focal = (h / 2.0) / np.tan(camera.fov_y / 2.0)
    return focal, focal, (w - 1) / 2.0, (h - 1) / 2.0


def project_points(points, camera):
    """World points -> (rows, cols, depths) under the camera."""
    rot, trans = camera_frame(camera)
    fx, fy, cx, cy = camera_intrinsics(camera)
    cam = points @ rot.T + trans
    depth = -cam[:, 2]
    safe = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
    cols = cx + fx * cam[:, 0] / safe
    rows = cy - fy * cam[:, 1] / safe
    return rows, cols, depth


def sample_viewpoints(mesh, n, radius_scale=2.5, fov_y=np.deg2rad(55.0),
                      image_size=(512, 512)):
    """Deterministic ring of cameras around the mesh.

    Azimuths are uniform on the circle; elevations cycle through a fixed
    small set. All cameras sit at ``radius_scale`` times the bounding-sphere
    radius from the centroid and look at it.
    """
    if n < 1:
        raise ValueError("need at least one viewpoint")
    centroid = mesh.centroid()
    radius = radius_scale * mesh.bounding_radius()
    cams = []
    for i in range(n):
        az = 2.0 * np.pi * i / n
        el = np.deg2rad(ELEVATIONS_DEG[i % len(ELEVATIONS_DEG)])
        offset = radius * np.array([
            np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az),
        ])
        cams.append(Camera(
            position=tuple(centroid + offset), look_at=tuple(centroid),
            up=(0.0, 1.0, 0.0), fov_y=fov_y, image_size=image_size,
        ))
    return cams


def _apply_transform(mesh, transform):
    if transform is None:
        return mesh.vertices, mesh.vertex_normals
    t = np.asarray(transform, dtype=np.float64)
    verts = mesh.vertices @ t[:3, :3].T + t[:3, 3]
    normals = mesh.vertex_normals @ t[:3, :3].T
    normals = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    return verts, normals


def render(mesh, camera, style="normals", transform=None, with_positions=False):
    """Rasterize the mesh with a z-buffer; returns an immutable RenderedView.

    ``transform`` optionally poses the template rigidly (4x4 homogeneous);
    visibility and projections then refer to the posed geometry while
    ``positions`` (if requested) records the untransformed canonical
    coordinates visible at each pixel.
    """
    if style not in STYLES:
        raise ValueError(f"unknown render style {style!r}")
    h, w = camera.image_size
    rot, trans = camera_frame(camera)
    fx, fy, cx, cy = camera_intrinsics(camera)

    verts, normals = _apply_transform(mesh, transform)
    cam = verts @ rot.T + trans
    depth_v = -cam[:, 2]
    n_cam = normals @ rot.T

    zbuf = np.full((h, w), np.inf)
    attr = np.zeros((h, w, 3))
    posbuf = np.zeros((h, w, 3)) if with_positions else None

    in_front = depth_v > 1e-9
    safe_depth = np.where(in_front, depth_v, 1.0)
    cols_v = cx + fx * cam[:, 0] / safe_depth
    rows_v = cy - fy * cam[:, 1] / safe_depth

    if style == "normals":
        face_attr_src = n_cam
    elif style == "shaded":
        # headlight at the camera: lambertian term is the z component
        shade = np.maximum(n_cam[:, 2], 0.0)
        face_attr_src = np.repeat(shade[:, None], 3, axis=1)
    else:
        face_attr_src = None  # depth style fills the image afterwards

    for face in mesh.faces:
        if not in_front[face].all():
            continue
        pr = rows_v[face]
        pc = cols_v[face]
        r0 = max(int(np.floor(pr.min())), 0)
        r1 = min(int(np.ceil(pr.max())), h - 1)
        c0 = max(int(np.floor(pc.min())), 0)
        c1 = min(int(np.ceil(pc.max())), w - 1)
        if r0 > r1 or c0 > c1:
            continue
        area = (pc[1] - pc[0]) * (pr[2] - pr[0]) - (pr[1] - pr[0]) * (pc[2] - pc[0])
        if area == 0.0:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        w0 = (pc[2] - pc[1]) * (rr - pr[1]) - (pr[2] - pr[1]) * (cc - pc[1])
        w1 = (pc[0] - pc[2]) * (rr - pr[2]) - (pr[0] - pr[2]) * (cc - pc[2])
        w2 = (pc[1] - pc[0]) * (rr - pr[0]) - (pr[1] - pr[0]) * (cc - pc[0])
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not inside.any():
            continue
        b = np.stack([w0[inside], w1[inside], w2[inside]]) / area
        zf = depth_v[face]
        pw = b / zf[:, None]           # perspective weights
        inv_z = pw.sum(axis=0)
        z = 1.0 / inv_z
        ri, ci = rr[inside], cc[inside]
        closer = z < zbuf[ri, ci]
        if not closer.any():
            continue
        ri, ci, z = ri[closer], ci[closer], z[closer]
        pw = pw[:, closer] * z
        zbuf[ri, ci] = z
        if face_attr_src is not None:
            attr[ri, ci] = pw.T @ face_attr_src[face]
        if posbuf is not None:
            posbuf[ri, ci] = pw.T @ mesh.vertices[face]

    mask = np.isfinite(zbuf)
    depth = np.where(mask, zbuf, 0.0)

    image = np.zeros((h, w, 3), dtype=np.float32)
    if mask.any():
        if style == "normals":
            nmap = attr[mask]
            norms = np.linalg.norm(nmap, axis=1, keepdims=True)
            nmap = nmap / np.maximum(norms, 1e-300)
            image[mask] = ((nmap + 1.0) / 2.0).astype(np.float32)
        elif style == "shaded":
            image[mask] = np.clip(attr[mask], 0.0, 1.0).astype(np.float32)
        else:
            d = depth[mask]
            dmin, dmax = d.min(), d.max()
            span = max(dmax - dmin, 1e-12)
            image[mask] = (0.1 + 0.9 * ((dmax - d) / span))[:, None].astype(np.float32)

    visible, projections = _visibility(mesh, camera, depth, mask, transform)
    return RenderedView(
        image=_readonly(image), depth=_readonly(depth), mask=_readonly(mask),
        visible=_readonly(visible), projections=_readonly(projections),
        style=style, camera=camera,
        positions=_readonly(posbuf) if posbuf is not None else None,
    )


def _visibility(mesh, camera, depth_map, mask, transform=None, eps_scale=1e-3):
    h, w = depth_map.shape
    verts, _ = _apply_transform(mesh, transform)
    rows, cols, depth_v = project_points(verts, camera)

    ri = np.clip(np.rint(rows), 0, h - 1).astype(np.int64)
    ci = np.clip(np.rint(cols), 0, w - 1).astype(np.int64)
    in_image = (np.rint(rows) >= 0) & (np.rint(rows) <= h - 1) \
        & (np.rint(cols) >= 0) & (np.rint(cols) <= w - 1)

    projections = np.stack([ri, ci], axis=1).astype(np.float32)
    if not mask.any():
        return np.zeros(mesh.num_vertices, dtype=bool), projections

    fg_depth = depth_map[mask]
    eps_z = eps_scale * max(float(fg_depth.max() - fg_depth.min()), 1e-12)

    # The buffered depth is sampled at pixel centers, so a surface vertex sits
    # deeper than its own face's sample by the depth slope across a pixel
    # (divergent at silhouettes). The test therefore samples a 3x3 max-dilated
    # buffer at the nearest mask pixel and allows the local one-window depth
    # range on top of eps_z. visibility_allowance() exposes the same slack so
    # oracles can share the boundary convention.
    dmax = ndimage.maximum_filter(depth_map, size=3)
    fg_only = np.where(mask, depth_map, np.inf)
    dmin = ndimage.minimum_filter(fg_only, size=3)
    slope = np.where(np.isfinite(dmin), dmax - dmin, 0.0)

    _, nearest = ndimage.distance_transform_edt(~mask, return_indices=True)
    sr, sc = nearest[0][ri, ci], nearest[1][ri, ci]
    near_mask = np.hypot(sr - ri, sc - ci) <= 2.0
    tr = np.where(near_mask, sr, ri)
    tc = np.where(near_mask, sc, ci)

    allowance = eps_z + slope[tr, tc]
    buffered = dmax[tr, tc]
    visible = in_image & (depth_v > 0) & (buffered > 0) & (depth_v <= buffered + allowance)

    off_mask = ~mask[ri, ci]
    if off_mask.any():
        projections[off_mask, 0] = nearest[0][ri[off_mask], ci[off_mask]]
        projections[off_mask, 1] = nearest[1][ri[off_mask], ci[off_mask]]
    return visible, projections


def project_vertices(mesh, camera, view, transform=None, eps_scale=1e-3):
    """Visibility by z-buffer test plus mask-snapped projections.

    A vertex is visible when its camera depth is within the local depth
    allowance of the dilated buffer at its (mask-snapped) projection.
    Projections snap to the rounded pixel when it lies in the mask and to
    the nearest mask pixel otherwise; with an empty mask everything is
    invisible and projections stay at the clamped raw pixel.
    """
    return _visibility(mesh, camera, view.depth, view.mask, transform, eps_scale)


def visibility_allowance(mesh, camera, view, transform=None, eps_scale=1e-3):
    """Per-vertex depth slack used by the visibility test.

    Exposed so independent occlusion checks (ray casting) can share the one
    boundary convention: a vertex counts as occluded only when something
    sits more than this allowance in front of it.
    """
    h, w = view.depth.shape
    verts, _ = _apply_transform(mesh, transform)
    rows, cols, depth_v = project_points(verts, camera)
    ri = np.clip(np.rint(rows), 0, h - 1).astype(np.int64)
    ci = np.clip(np.rint(cols), 0, w - 1).astype(np.int64)
    if not view.mask.any():
        return np.zeros(mesh.num_vertices), depth_v
    fg_depth = view.depth[view.mask]
    eps_z = eps_scale * max(float(fg_depth.max() - fg_depth.min()), 1e-12)
    dmax = ndimage.maximum_filter(view.depth, size=3)
    fg_only = np.where(view.mask, view.depth, np.inf)
    dmin = ndimage.minimum_filter(fg_only, size=3)
    slope = np.where(np.isfinite(dmin), dmax - dmin, 0.0)
    _, nearest = ndimage.distance_transform_edt(~view.mask, return_indices=True)
    sr, sc = nearest[0][ri, ci], nearest[1][ri, ci]
    near_mask = np.hypot(sr - ri, sc - ci) <= 2.0
    tr = np.where(near_mask, sr, ri)
    tc = np.where(near_mask, sc, ci)
    return eps_z + slope[tr, tc], depth_v


# --- image and projection export -----------------------------------------

def save_ppm(image, path):
    """Binary P6 with 8-bit channels from a float image in [0, 1]."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_pgm(values, path, maxval=255):
    """Binary P5; 16-bit samples are written big-endian per the PNM spec."""
    arr = np.asarray(values)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        if maxval > 255:
            fh.write(arr.astype(">u2").tobytes())
        else:
            fh.write(arr.astype(np.uint8).tobytes())


def save_depth_pgm(view, path):
    """Depth quantized to 16 bits; background stays 0."""
    depth = view.depth
    out = np.zeros(depth.shape, dtype=np.uint32)
    if view.mask.any():
        d = depth[view.mask]
        dmin, dmax = d.min(), d.max()
        span = max(dmax - dmin, 1e-12)
        out[view.mask] = 1 + np.round((d - dmin) / span * 65534.0).astype(np.uint32)
    save_pgm(out, path, maxval=65535)


def save_mask_pgm(view, path):
    save_pgm(view.mask.astype(np.uint8) * 255, path, maxval=255)


CVP1_MAGIC = b"CVP1"


def save_projections(view, path):
    """"CVP1": u32 K, then per vertex u8 visible, f32 row, f32 col."""
    k = view.visible.shape[0]
    rec = np.zeros(k, dtype=np.dtype([("vis", "u1"), ("row", "<f4"), ("col", "<f4")]))
    rec["vis"] = view.visible.astype(np.uint8)
    rec["row"] = view.projections[:, 0]
    rec["col"] = view.projections[:, 1]
    with open(path, "wb") as fh:
        fh.write(CVP1_MAGIC)
        fh.write(struct.pack("<I", k))
        fh.write(rec.tobytes())


def load_projections(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CVP1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected CVP1")
        (k,) = struct.unpack("<I", fh.read(4))
        rec = np.frombuffer(fh.read(9 * k), dtype=np.dtype([("vis", "u1"), ("row", "<f4"), ("col", "<f4")]))
        if rec.size != k:
            raise ValueError(f"{path}: truncated CVP1 payload")
    visible = rec["vis"].astype(bool)
    projections = np.stack([rec["row"], rec["col"]], axis=1).astype(np.float32)
    return visible, projections
