"""Depth-buffered software rasterizer and crop geometry.

Every triangle is expanded into the pixel centers of its screen bounding
box (back faces of closed meshes are culled first); coverage uses edge functions with a top-left tie rule, and the
z-test keeps the nearest candidate per pixel (lowest face index on exact
ties). Attributes are interpolated perspective-correctly, so the
object-coordinate map holds the exact surface point seen through each
pixel center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, RigidPose, project
from .mesh import TriangleMesh, procedural_colors

NEAR_PLANE = 1e-6


@dataclass(eq=False)
class RenderBuffers:
    depth: np.ndarray   # (H, W) camera-frame Z, +inf where empty
    mask: np.ndarray    # (H, W) bool
    coords: np.ndarray  # (H, W, 3) model-frame surface point, NaN where empty
    color: np.ndarray   # (H, W, 3) RGB in [0, 1], black background
    face: np.ndarray    # (H, W) winning face index, -1 where empty

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "RenderBuffers":
        return cls(np.full((height, width), np.inf), np.zeros((height, width), bool),
                   np.full((height, width, 3), np.nan), np.zeros((height, width, 3)),
                   np.full((height, width), -1, dtype=np.int64))


def _bbox_pairs(xmin, xmax, ymin, ymax, width):
    """Expand per-triangle pixel boxes into flat (triangle, x, y) arrays."""
    nx = np.maximum(xmax - xmin + 1, 0)
    ny = np.maximum(ymax - ymin + 1, 0)
    counts = nx * ny
    tri = np.repeat(np.arange(len(counts)), counts)
    if tri.size == 0:
        return tri, tri, tri
    starts = np.cumsum(counts) - counts
    local = np.arange(tri.size) - starts[tri]
    nxt = nx[tri]
    px = xmin[tri] + local % nxt
    py = ymin[tri] + local // nxt
    return tri, px, py


def _edge(ax, ay, bx, by, px, py):
    """Edge function evaluated with a canonical vertex order so a shared edge
    yields bit-identical magnitudes for both of its triangles."""
    swap = (ax > bx) | ((ax == bx) & (ay > by))
    sx = np.where(swap, bx, ax)
    sy = np.where(swap, by, ay)
    ex = np.where(swap, ax, bx) - sx
    ey = np.where(swap, ay, by) - sy
    e = ex * (py - sy) - ey * (px - sx)
    return np.where(swap, -e, e)


def _owns_edge(ax, ay, bx, by):
    # one of (d, -d) passes for every non-degenerate edge
    dx, dy = bx - ax, by - ay
    return (dy > 0) | ((dy == 0) & (dx < 0))


def rasterize(mesh: TriangleMesh, pose: RigidPose, K: CameraIntrinsics,
              width: int | None = None, height: int | None = None) -> RenderBuffers:
    width = K.width if width is None else int(width)
    height = K.height if height is None else int(height)
    out = RenderBuffers.empty(height, width)
    if len(mesh.faces) == 0:
        return out

    uv, Z, _ = project(mesh.vertices, pose, K)
    F = mesh.faces
    keep = np.all(Z[F] > NEAR_PLANE, axis=1)
    orient = mesh.orientation
    if orient:
        # closed surface: faces turned away from the camera are always hidden
        Xc = pose.transform(mesh.vertices)
        tri = Xc[F]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        keep &= orient * np.einsum("ij,ij->i", n, tri[:, 0]) < 0
    fidx = np.nonzero(keep)[0]
    if fidx.size == 0:
        return out
    F = F[fidx]
    tu, tv, tz = uv[F, 0], uv[F, 1], Z[F]

    area = (tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0]) - (tv[:, 1] - tv[:, 0]) * (tu[:, 2] - tu[:, 0])
    xmin = np.maximum(np.ceil(tu.min(axis=1) - 0.5), 0).astype(np.int64)
    xmax = np.minimum(np.floor(tu.max(axis=1) - 0.5), width - 1).astype(np.int64)
    ymin = np.maximum(np.ceil(tv.min(axis=1) - 0.5), 0).astype(np.int64)
    ymax = np.minimum(np.floor(tv.max(axis=1) - 0.5), height - 1).astype(np.int64)
    degenerate = np.abs(area) < 1e-12
    xmax[degenerate] = xmin[degenerate] - 1

    t, px, py = _bbox_pairs(xmin, xmax, ymin, ymax, width)
    if t.size == 0:
        return out
    cx = px + 0.5
    cy = py + 0.5
    u0, u1, u2 = tu[t, 0], tu[t, 1], tu[t, 2]
    v0, v1, v2 = tv[t, 0], tv[t, 1], tv[t, 2]
    s = np.sign(area[t])
    # w_i is the edge opposite vertex i
    w0 = s * _edge(u1, v1, u2, v2, cx, cy)
    w1 = s * _edge(u2, v2, u0, v0, cx, cy)
    w2 = s * _edge(u0, v0, u1, v1, cx, cy)

    def ok(w, ax, ay, bx, by):
        fwd = s > 0
        own = np.where(fwd, _owns_edge(ax, ay, bx, by), _owns_edge(bx, by, ax, ay))
        return (w > 0) | ((w == 0) & own)

    inside = ok(w0, u1, v1, u2, v2) & ok(w1, u2, v2, u0, v0) & ok(w2, u0, v0, u1, v1)
    t, px, py = t[inside], px[inside], py[inside]
    a = np.abs(area[t])
    b = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / a[:, None]
    q = b / tz[t]
    inv_z = q.sum(axis=1)
    depth = 1.0 / inv_z

    pix = py * width + px
    order = np.lexsort((t, depth, pix))
    pix_sorted = pix[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    w = q[win] / inv_z[win, None]
    tri = F[t[win]]
    coords = np.einsum("nk,nkc->nc", w, mesh.vertices[tri])
    color = np.einsum("nk,nkc->nc", w, mesh.colors[tri])
    cell = mesh.face_texture[fidx[t[win]]]
    solid = cell > 0
    if solid.any():
        color[solid] = procedural_colors(coords[solid], cell[solid])

    p = pix[win]
    out.depth.ravel()[p] = depth[win]
    out.mask.ravel()[p] = True
    out.coords.reshape(-1, 3)[p] = coords
    out.color.reshape(-1, 3)[p] = color
    out.face.ravel()[p] = fidx[t[win]]
    return out


def visible_points(buffers: RenderBuffers, stride: int = 1):
    """Pixel centers ``(N, 2)`` and model points ``(N, 3)`` on a stride grid of the mask."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    H, W = buffers.shape
    sub = np.zeros((H, W), dtype=bool)
    sub[::stride, ::stride] = True
    ys, xs = np.nonzero(buffers.mask & sub)
    uv = np.stack([xs + 0.5, ys + 0.5], axis=1).astype(np.float64)
    return uv, buffers.coords[ys, xs]


# ---------------------------------------------------------------------------
# region of interest


@dataclass(frozen=True)
class CropBox:
    x0: float
    y0: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.out_size / self.side

    def to_crop(self, uv: np.ndarray) -> np.ndarray:
        return (np.asarray(uv, dtype=np.float64) - [self.x0, self.y0]) * self.scale


def crop_intrinsics(K: CameraIntrinsics, box: CropBox) -> CameraIntrinsics:
    s = box.scale
    return CameraIntrinsics.crop(K.fx * s, K.fy * s, (K.cx - box.x0) * s, (K.cy - box.y0) * s,
                                 box.out_size, box.out_size)


def roi_from_pose(pose: RigidPose, mesh: TriangleMesh, K: CameraIntrinsics,
                  pad: float = 0.2, out_size: int = 256):
    """Square crop around the projected mesh and intrinsics for rendering into it.

    Returns ``(CropBox, CameraIntrinsics)``. The box side is the larger
    projected extent times ``1 + 2 * pad``, shifted (and if needed shrunk)
    to stay within the image.
    """
    uv, _, valid = project(mesh.vertices, pose, K)
    if not valid.any():
        raise ValueError("object out of view")
    uv = uv[valid]
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    if hi[0] <= 0 or hi[1] <= 0 or lo[0] >= K.width or lo[1] >= K.height:
        raise ValueError("object out of view")
    center = (lo + hi) / 2
    side = float(max(hi - lo)) * (1 + 2 * pad)
    side = min(max(side, 1.0), float(min(K.width, K.height)))
    x0 = float(np.clip(center[0] - side / 2, 0, K.width - side))
    y0 = float(np.clip(center[1] - side / 2, 0, K.height - side))
    box = CropBox(x0, y0, side, out_size)
    return box, crop_intrinsics(K, box)


def crop_image(image: np.ndarray, box: CropBox) -> np.ndarray:
    """Resample the crop window of a full image to ``out_size``² (bilinear)."""
    s = box.scale
    # cv2 places pixel centers at integers
    M = np.array([[1 / s, 0, box.x0 + 0.5 / s - 0.5], [0, 1 / s, box.y0 + 0.5 / s - 0.5]])
    img = np.asarray(image, dtype=np.float32)
    return cv2.warpAffine(img, M, (box.out_size, box.out_size),
                          flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0).astype(np.float64)


# ---------------------------------------------------------------------------
# export


def save_png(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    elif img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def load_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_raw(path, array: np.ndarray) -> None:
    """Little-endian float32 dump plus a ``.json`` sidecar with the shape."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    arr.tofile(path)
    meta = {"dtype": "float32", "byteorder": "little", "shape": list(arr.shape)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


def load_raw(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.fromfile(path, dtype="<f4").reshape(meta["shape"])


def save_buffers(out_dir, buffers: RenderBuffers) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "color.png", buffers.color)
    save_png(out / "mask.png", buffers.mask)
    save_raw(out / "depth.raw", buffers.depth)
    save_raw(out / "coords.raw", np.nan_to_num(buffers.coords, nan=0.0))
