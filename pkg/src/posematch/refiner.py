"""The recurrent refinement loop.

Render once at the initial pose, correlate the rendering with the observed
crop, then alternate: look up the correlation around the current flow,
predict an intermediate flow, solve a residual pose from it, and turn the
new pose back into a pose-induced flow for the next lookup.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .correlation import build_correlation, extract_features, lookup_shape_constraint, lookup_standard
from .flow import (FlowField, downsample_flow, flow_error, gt_flow, pose_induced_flow, upsample_flow,
                   warp, write_flo)
from .geometry import (CameraIntrinsics, PoseDelta, RigidPose, compose_pose, decompose_pose,
                       pose_errors)
from .mesh import TriangleMesh
from .predictor import PredictorInput, predict_intermediate_flow
from .render import RenderBuffers, rasterize, save_png
from .solver import PoseSolverError, lift_flow, solve_epnp_ransac, solve_gauss_newton

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SOLVERS = ("gauss_newton", "epnp_ransac")
LOOKUPS = ("shape_constraint", "standard")


class RefinementError(RuntimeError):
    pass


@dataclass
class RefinerConfig:
    iterations: int = 8
    gamma: float = 0.8
    alpha: float = 0.1
    radius: int = 4
    levels: int = 4
    temperature: float = 0.1
    solver: str = "gauss_newton"
    lookup: str = "shape_constraint"
    seed: int = 0
    downsample: int = 4
    huber_delta: float = 2.0
    gn_iters: int = 10
    ransac_threshold: float = 3.0
    lift_stride: int = 2
    lazy_correlation: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.lookup not in LOOKUPS:
            raise ValueError(f"lookup must be one of {LOOKUPS}")
        if self.radius < 1 or self.levels < 1 or self.downsample < 1 or self.lift_stride < 1:
            raise ValueError("radius, levels, downsample and lift_stride must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerConfig":
        d = dict(d)
        schema = d.pop("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {schema}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class IterationRecord:
    k: int
    pose: RigidPose
    delta: PoseDelta
    lookup_flow: FlowField         # grid flow the windows were centered on
    pose_flow: FlowField           # grid pose-induced flow of (P0, P_{k-1})
    intermediate: FlowField        # grid intermediate flow
    intermediate_full: FlowField   # image-resolution intermediate flow
    confidence: np.ndarray
    mean_confidence: float
    max_confidence: float
    n_correspondences: int
    flow_l1: float | None = None
    rot_err: float | None = None
    trans_err: float | None = None


@dataclass(eq=False)
class RefinementTrace:
    initial_pose: RigidPose
    K: CameraIntrinsics
    config: RefinerConfig
    records: list[IterationRecord] = field(default_factory=list)
    failure: str | None = None
    buffers0: RenderBuffers | None = None

    @property
    def poses(self) -> list[RigidPose]:
        return [r.pose for r in self.records]

    @property
    def final_pose(self) -> RigidPose:
        return self.records[-1].pose if self.records else self.initial_pose

    def pose_at(self, k: int) -> RigidPose:
        """Pose after ``k`` iterations (``k = 0`` is the initial pose)."""
        if k == 0 or not self.records:
            return self.initial_pose
        return self.records[min(k, len(self.records)) - 1].pose

    def __len__(self):
        return len(self.records)


def refine(target_image: np.ndarray, mesh: TriangleMesh, P0: RigidPose, K: CameraIntrinsics,
           config: RefinerConfig | None = None, gt_pose: RigidPose | None = None,
           observed_depth: np.ndarray | None = None) -> RefinementTrace:
    """Refine ``P0`` against ``target_image`` (already cropped to ``K``'s frame).

    ``gt_pose`` (and ``observed_depth`` for occlusion handling) only feed the
    per-iteration diagnostics; they never influence the estimate.
    """
    cfg = config or RefinerConfig()
    H, W = K.height, K.width
    if np.asarray(target_image).shape[:2] != (H, W):
        raise ValueError(f"target image must be {H}x{W}")
    buffers0 = rasterize(mesh, P0, K)
    if not buffers0.mask.any():
        raise RefinementError("object out of view")
    trace = RefinementTrace(P0, K, cfg, buffers0=buffers0)

    f1 = extract_features(buffers0.color, cfg.downsample)
    f2 = extract_features(target_image, cfg.downsample)
    f = cfg.downsample
    h, w = H // f, W // f
    covered = buffers0.mask[: h * f, : w * f].reshape(h, f, w, f).any(axis=(1, 3))
    pyr = build_correlation(f1, f2, cfg.levels, lazy=cfg.lazy_correlation, source_mask=covered)
    gt_full = gt_flow(buffers0, P0, gt_pose, K, observed_depth) if gt_pose is not None else None

    prev = P0
    prev_inter = None
    for k in range(1, cfg.iterations + 1):
        pflow_full = pose_induced_flow(buffers0, P0, prev, K)
        pflow = downsample_flow(pflow_full, cfg.downsample)
        if cfg.lookup == "shape_constraint" or prev_inter is None:
            lookup_flow = pflow
            corr = lookup_shape_constraint(pyr, pflow, cfg.radius)
        else:
            lookup_flow = prev_inter
            corr = lookup_standard(pyr, prev_inter, cfg.radius)
        pred = predict_intermediate_flow(
            PredictorInput(corr, lookup_flow, prev_inter, k, cfg.radius), cfg.temperature)

        if lookup_flow is pflow:
            base_full = pflow_full
        else:
            base_full = upsample_flow(lookup_flow, cfg.downsample)
        res = upsample_flow(FlowField(pred.residual, pred.flow.valid), cfg.downsample)
        full = FlowField(base_full.flow + res.flow, base_full.valid & res.valid & buffers0.mask)
        conf_full = np.repeat(np.repeat(pred.confidence, cfg.downsample, 0), cfg.downsample, 1)
        corrs = lift_flow(buffers0, full, conf_full, cfg.lift_stride)
        try:
            if cfg.solver == "gauss_newton":
                solved = solve_gauss_newton(corrs, prev, K, cfg.gn_iters, cfg.huber_delta)
            else:
                solved, _ = solve_epnp_ransac(corrs[corrs.weights > 0], K, cfg.ransac_threshold,
                                              seed=cfg.seed * 1000 + k)
        except PoseSolverError as exc:
            trace.failure = f"iteration {k}: {exc}"
            log.info("refinement stopped: %s", trace.failure)
            break
        delta = decompose_pose(prev, solved, K)
        pose = compose_pose(prev, delta, K)

        vconf = pred.confidence[pred.flow.valid]
        rec = IterationRecord(
            k=k, pose=pose, delta=delta, lookup_flow=lookup_flow, pose_flow=pflow,
            intermediate=pred.flow, intermediate_full=full, confidence=pred.confidence,
            mean_confidence=float(vconf.mean()) if vconf.size else 0.0,
            max_confidence=float(vconf.max()) if vconf.size else 0.0,
            n_correspondences=int((corrs.weights > 0).sum()))
        if gt_pose is not None:
            rec.flow_l1 = flow_error(full, gt_full).l1
            rec.rot_err, rec.trans_err = pose_errors(pose, gt_pose)
        trace.records.append(rec)
        prev = pose
        prev_inter = pred.flow
    return trace


def loss_weights(n: int, gamma: float) -> np.ndarray:
    """``gamma ** (n - k)`` for ``k = 1..n``."""
    return np.array([float(gamma) ** (n - k) for k in range(1, n + 1)])


def diagnostic_loss(trace: RefinementTrace, Pgt: RigidPose, mesh: TriangleMesh,
                    buffers0: RenderBuffers, K: CameraIntrinsics, config: RefinerConfig,
                    observed_depth: np.ndarray | None = None, n_points: int = 1000):
    """Exponentially weighted sum of per-iteration pose and flow losses.

    Pose loss: mean distance between 1000 seeded surface samples moved by
    the iteration's pose and by ``Pgt``. Flow loss: L1 endpoint error of the
    iteration's intermediate flow against the ground-truth flow, over the
    rendered mask minus occluded pixels.

    Returns ``(total, pose_losses, flow_losses)``.
    """
    pts = mesh.sample_surface(n_points, np.random.default_rng(config.seed))
    ref = Pgt.transform(pts)
    gtf = gt_flow(buffers0, trace.initial_pose, Pgt, K, observed_depth)
    pose_l = np.array([np.linalg.norm(r.pose.transform(pts) - ref, axis=1).mean()
                       for r in trace.records])
    flow_l = np.array([flow_error(r.intermediate_full, gtf).l1 for r in trace.records])
    w = loss_weights(len(trace.records), config.gamma)
    total = float(np.sum(w * (pose_l + config.alpha * flow_l)))
    return total, pose_l, flow_l


def save_trace(out_dir, trace: RefinementTrace, target_image: np.ndarray | None = None) -> None:
    """Write ``poses.json``, per-iteration ``.flo`` files, warp PNGs and ``diagnostics.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poses = {"initial": trace.initial_pose.to_dict(),
             "iterations": [r.pose.to_dict() for r in trace.records],
             "final": trace.final_pose.to_dict(),
             "failure": trace.failure,
             "intrinsics": trace.K.to_dict(),
             "config": trace.config.to_dict()}
    (out / "poses.json").write_text(json.dumps(poses, indent=1))
    for r in trace.records:
        write_flo(out / f"intermediate_{r.k:02d}.flo", r.intermediate_full)
        write_flo(out / f"pose_flow_{r.k:02d}.flo", upsample_flow(r.pose_flow, trace.config.downsample))
        if target_image is not None:
            save_png(out / f"warp_{r.k:02d}.png", warp(target_image, r.intermediate_full))
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "mean_confidence", "max_confidence", "n_correspondences",
                     "flow_l1", "rot_err_deg", "trans_err_m"])
        for r in trace.records:
            wr.writerow([r.k, f"{r.mean_confidence:.6f}", f"{r.max_confidence:.6f}", r.n_correspondences,
                         "" if r.flow_l1 is None else f"{r.flow_l1:.6f}",
                         "" if r.rot_err is None else f"{r.rot_err:.6f}",
                         "" if r.trans_err is None else f"{r.trans_err:.8f}"])
