"""Dense flow fields: pose-induced and ground-truth flow, warping, errors, I/O."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, RigidPose, project
from .render import RenderBuffers

FLO_MAGIC = 202021.25  # b"PIEH" read as little-endian float32
OCCLUSION_MARGIN = 0.005  # meters


@dataclass(eq=False)
class FlowField:
    flow: np.ndarray   # (H, W, 2) displacement (du, dv) in pixels
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.shape != self.valid.shape + (2,):
            raise ValueError(f"flow {self.flow.shape} does not match mask {self.valid.shape}")
        self.flow = np.where(self.valid[..., None], self.flow, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def zeros(cls, height: int, width: int, valid=None) -> "FlowField":
        v = np.ones((height, width), bool) if valid is None else valid
        return cls(np.zeros((height, width, 2)), v)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.flow, axis=-1)

    def copy(self) -> "FlowField":
        return FlowField(self.flow.copy(), self.valid.copy())


def pixel_centers(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)


def pose_induced_flow(buffers0: RenderBuffers, P0: RigidPose, Pk: RigidPose,
                      K: CameraIntrinsics) -> FlowField:
    """Displacement of each visible surface point between its projection at
    ``P0`` (the pixel center it was rendered at) and its projection at ``Pk``.

    ``P0`` only fixes which points are visible; ``buffers0`` must come from
    rendering at ``P0`` with ``K``.
    """
    H, W = buffers0.shape
    ys, xs = np.nonzero(buffers0.mask)
    uv_k, _, front = project(buffers0.coords[ys, xs], Pk, K)
    flow = np.zeros((H, W, 2))
    valid = np.zeros((H, W), bool)
    ys, xs, uv_k = ys[front], xs[front], uv_k[front]
    flow[ys, xs, 0] = uv_k[:, 0] - (xs + 0.5)
    flow[ys, xs, 1] = uv_k[:, 1] - (ys + 0.5)
    valid[ys, xs] = True
    return FlowField(flow, valid)


def gt_flow(buffers0: RenderBuffers, P0: RigidPose, Pgt: RigidPose, K: CameraIntrinsics,
            occluder_depth: np.ndarray | None = None,
            margin: float = OCCLUSION_MARGIN) -> FlowField:
    """Pose-induced flow towards the true pose, minus occluded pixels.

    ``occluder_depth`` is the depth map of the observed scene at ``Pgt``. A
    pixel is dropped when the observed depth at its flowed-to location is
    more than ``margin`` nearer than the point itself, or when that location
    falls outside the image.
    """
    f = pose_induced_flow(buffers0, P0, Pgt, K)
    if occluder_depth is None:
        return f
    H, W = f.shape
    ys, xs = np.nonzero(f.valid)
    tx = np.floor(xs + 0.5 + f.flow[ys, xs, 0]).astype(np.int64)
    ty = np.floor(ys + 0.5 + f.flow[ys, xs, 1]).astype(np.int64)
    inb = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
    z = Pgt.transform(buffers0.coords[ys, xs])[:, 2]
    seen = np.full(len(ys), np.inf)
    seen[inb] = occluder_depth[ty[inb], tx[inb]]
    drop = ~inb | (seen < z - margin)
    valid = f.valid.copy()
    valid[ys[drop], xs[drop]] = False
    return FlowField(f.flow, valid)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``image`` at array-index coordinates; returns ``(values, inside)``.

    Positions outside ``[0, W-1] x [0, H-1]`` are reported as not inside.
    """
    H, W = image.shape[:2]
    inside = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), W - 1)
    y0 = np.minimum(np.floor(yc).astype(np.int64), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = xc - x0
    ay = yc - y0
    if image.ndim == 3:
        ax = ax[..., None]
        ay = ay[..., None]
    top = image[y0, x0] * (1 - ax) + image[y0, x1] * ax
    bot = image[y1, x0] * (1 - ax) + image[y1, x1] * ax
    return top * (1 - ay) + bot * ay, inside


def warp(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """``out(x) = image(x + flow(x))``; black where invalid or out of bounds."""
    image = np.asarray(image, dtype=np.float64)
    H, W = flow.shape
    ys, xs = np.mgrid[0:H, 0:W]
    vals, inside = bilinear_sample(image, xs + flow.flow[..., 0], ys + flow.flow[..., 1])
    keep = inside & flow.valid
    if image.ndim == 3:
        keep = keep[..., None]
    return np.where(keep, vals, 0.0)


class FlowError(NamedTuple):
    l1: float
    l2: float
    empty: bool


def flow_error(pred: FlowField, gt: FlowField) -> FlowError:
    """Mean L1 and L2 endpoint errors over pixels valid in both fields."""
    if pred.shape != gt.shape:
        raise ValueError("flow fields differ in size")
    both = pred.valid & gt.valid
    if not both.any():
        return FlowError(0.0, 0.0, True)
    d = pred.flow[both] - gt.flow[both]
    return FlowError(float(np.abs(d).sum(axis=1).mean()), float(np.linalg.norm(d, axis=1).mean()), False)


def downsample_flow(flow: FlowField, factor: int, min_valid: float = 0.5) -> FlowField:
    """Block-average valid displacements and rescale them to grid units.

    A cell is valid when at least ``min_valid`` of its pixels are.
    """
    H, W = flow.shape
    if H % factor or W % factor:
        raise ValueError("flow size must be divisible by the factor")
    h, w = H // factor, W // factor
    v = flow.valid.reshape(h, factor, w, factor).astype(np.float64)
    s = (flow.flow * flow.valid[..., None]).reshape(h, factor, w, factor, 2).sum(axis=(1, 3))
    n = v.sum(axis=(1, 3))
    valid = n >= min_valid * factor * factor
    out = np.zeros((h, w, 2))
    out[valid] = s[valid] / n[valid, None] / factor
    return FlowField(out, valid)


@lru_cache(maxsize=16)
def _interp_matrix(n_out: int, n_in: int, factor: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation weights, cell centers at (i + 0.5) * factor, edges clamped."""
    g = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(g).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    a = np.clip(g - i0, 0, 1)
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(M, (rows, i0), 1 - a)
    np.add.at(M, (rows, i1), a)
    M.flags.writeable = False
    return M


def upsample_flow(grid_flow: FlowField, factor: int) -> FlowField:
    """Bilinear upsampling (cell centers at ``(i + 0.5) * factor``), values
    scaled by ``factor``; validity is nearest-neighbor. Invalid cells do not
    contribute to the interpolation of their valid neighbours."""
    h, w = grid_flow.shape
    Ay = _interp_matrix(h * factor, h, factor)
    Ax = _interp_matrix(w * factor, w, factor)
    m = grid_flow.valid.astype(np.float64)
    # grid flow is already zero where invalid
    fx = np.ascontiguousarray(grid_flow.flow[..., 0])
    fy = np.ascontiguousarray(grid_flow.flow[..., 1])
    num = np.stack([Ay @ fx @ Ax.T, Ay @ fy @ Ax.T], axis=-1)
    den = Ay @ m @ Ax.T
    valid = np.repeat(np.repeat(grid_flow.valid, factor, axis=0), factor, axis=1)
    pos = den > 1e-12
    out = np.divide(num, den[..., None], out=np.zeros_like(num), where=pos[..., None])
    return FlowField(out * factor, valid & pos)


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path, flow: FlowField, mask_png: bool = True) -> None:
    """Write ``.flo`` (invalid pixels as 0) and, optionally, ``<path>.mask.png``."""
    path = Path(path)
    H, W = flow.shape
    with open(path, "wb") as fh:
        np.array([FLO_MAGIC], dtype="<f4").tofile(fh)
        np.array([W, H], dtype="<i4").tofile(fh)
        flow.flow.astype("<f4").tofile(fh)
    if mask_png:
        Image.fromarray(flow.valid.astype(np.uint8) * 255).save(_mask_path(path))


def read_flo(path) -> FlowField:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = np.fromfile(fh, "<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise ValueError(f"{path}: bad .flo magic")
        W, H = (int(v) for v in np.fromfile(fh, "<i4", count=2))
        data = np.fromfile(fh, "<f4", count=2 * W * H)
    if data.size != 2 * W * H:
        raise ValueError(f"{path}: truncated .flo payload")
    flow = data.reshape(H, W, 2).astype(np.float64)
    mpath = _mask_path(path)
    if mpath.exists():
        valid = np.asarray(Image.open(mpath)) > 127
    else:
        # Middlebury marks unknown flow with huge values
        valid = np.all(np.abs(flow) < 1e9, axis=-1)
    return FlowField(flow, valid)


def _mask_path(path: Path) -> Path:
    return path.with_name(path.name + ".mask.png")
