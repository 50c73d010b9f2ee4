"""Synthetic scenes, pose perturbation and Monte-Carlo benchmarking."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidPose, axis_angle_matrix, random_rotation
from .mesh import TriangleMesh, get_mesh, merge_meshes, procedural_colors
from .metrics import add_metric, adds_metric, success_at
from .refiner import SCHEMA_VERSION, RefinementError, RefinerConfig, refine
from .render import rasterize, roi_from_pose

log = logging.getLogger(__name__)

DEFAULT_INTRINSICS = {"fx": 500.0, "fy": 500.0, "cx": 320.0, "cy": 240.0, "width": 640, "height": 480}


@dataclass
class PerturbationRanges:
    max_rotation_deg: float = 15.0
    max_translation_frac: float = 0.10  # in-plane offset, fraction of the diameter
    max_depth_scale: float = 0.10       # depth multiplied by a factor in [1 - m, 1 + m]


@dataclass
class ScenarioSpec:
    mesh: str = "checker_cube"
    intrinsics: dict = field(default_factory=lambda: dict(DEFAULT_INTRINSICS))
    depth_range: tuple[float, float] = (0.45, 0.6)
    max_center_offset_px: float = 60.0
    perturbation: PerturbationRanges = field(default_factory=PerturbationRanges)
    occluder: bool = False
    occlusion_range: tuple[float, float] = (0.1, 0.4)
    trials: int = 10
    seed: int = 0
    crop_size: int = 256
    crop_pad: float = 0.2

    def __post_init__(self):
        if isinstance(self.perturbation, dict):
            self.perturbation = PerturbationRanges(**self.perturbation)
        self.depth_range = tuple(self.depth_range)
        self.occlusion_range = tuple(self.occlusion_range)
        p = self.perturbation
        if min(p.max_rotation_deg, p.max_translation_frac, p.max_depth_scale) < 0:
            raise ValueError("perturbation ranges must be non-negative")
        if p.max_depth_scale >= 1:
            raise ValueError("depth scale range must be below 1")
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if not 0 < self.depth_range[0] <= self.depth_range[1]:
            raise ValueError("invalid depth range")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_dict(self.intrinsics)

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        schema = d.pop("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema {schema}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent stream per (master seed, trial index)."""
    return np.random.default_rng([int(seed), int(trial)])


def sample_gt_pose(spec: ScenarioSpec, rng: np.random.Generator) -> RigidPose:
    K = spec.camera
    R = random_rotation(rng)
    z = rng.uniform(*spec.depth_range)
    du, dv = rng.uniform(-spec.max_center_offset_px, spec.max_center_offset_px, size=2)
    x = (K.cx + du - K.cx) * z / K.fx
    y = (K.cy + dv - K.cy) * z / K.fy
    return RigidPose(R, [x, y, z])


def sample_perturbed_pose(gt: RigidPose, ranges: PerturbationRanges, rng: np.random.Generator,
                          diameter: float, center=(0.0, 0.0, 0.0)) -> RigidPose:
    """Random pose around ``gt``.

    Rotation: uniform random axis, angle uniform in ``[0, max]`` degrees,
    applied in the camera frame about the object center. Translation: an
    in-plane (camera x/y) offset of uniform direction and length uniform in
    ``[0, max_translation_frac * diameter]``, then the whole translation is
    scaled by a depth factor uniform in ``[1 - m, 1 + m]``.
    """
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, 1.0) * ranges.max_rotation_deg
    phi = rng.uniform(0.0, 2 * math.pi)
    mag = rng.uniform(0.0, 1.0) * ranges.max_translation_frac * diameter
    scale = 1.0 + rng.uniform(-1.0, 1.0) * ranges.max_depth_scale

    c = np.asarray(center, dtype=np.float64)
    dR = axis_angle_matrix(axis, angle) if angle > 0 else np.eye(3)
    R = dR @ gt.rotation
    C = gt.rotation @ c + gt.translation
    t = dR @ (gt.translation - C) + C if angle > 0 else gt.translation
    t = (t + np.array([mag * math.cos(phi), mag * math.sin(phi), 0.0])) * scale
    return RigidPose(R, t)


OCCLUDER_TEXTURE_CELL = 0.01  # meters


def make_occluder(mesh: TriangleMesh, gt: RigidPose, K: CameraIntrinsics, fraction: float,
                  rng: np.random.Generator, divisions: int = 8) -> TriangleMesh | None:
    """Textured plane just in front of the object hiding roughly ``fraction`` of
    its visible pixels; vertices are expressed in the object's model frame."""
    buf = rasterize(mesh, gt, K)
    ys, xs = np.nonzero(buf.mask)
    if len(ys) == 0:
        return None
    theta = rng.uniform(0, 2 * math.pi)
    d = np.array([math.cos(theta), math.sin(theta)])
    proj = (xs + 0.5) * d[0] + (ys + 0.5) * d[1]
    cut = float(np.quantile(proj, fraction))
    z = float(buf.depth[buf.mask].min()) - 0.01
    # the part of the half-plane {proj <= cut} over the object's footprint,
    # as a rectangle aligned with the cut line
    perp = np.array([-d[1], d[0]])
    along = (xs + 0.5) * perp[0] + (ys + 0.5) * perp[1]
    pad = 0.1 * max(float(np.ptp(along)), float(np.ptp(proj)), 1.0)
    a0, a1 = float(along.min()) - pad, float(along.max()) + pad
    b0 = float(proj.min()) - pad
    corners = [cut * d + a1 * perp, cut * d + a0 * perp, b0 * d + a0 * perp, b0 * d + a1 * perp]
    g = np.linspace(0, 1, divisions + 1)
    verts, faces = [], []
    for a in g:
        for b in g:
            top = corners[0] * (1 - a) + corners[1] * a
            bot = corners[3] * (1 - a) + corners[2] * a
            uv = top * (1 - b) + bot * b
            verts.append([(uv[0] - K.cx) * z / K.fx, (uv[1] - K.cy) * z / K.fy, z])
    n = divisions + 1
    for i in range(divisions):
        for j in range(divisions):
            q = [i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1]
            faces += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    cam = np.array(verts)
    model = gt.inverse().transform(cam)
    cell = OCCLUDER_TEXTURE_CELL
    return TriangleMesh(model, np.array(faces), procedural_colors(model, cell), name="occluder",
                        face_texture=np.full(len(faces), cell))


@dataclass
class TrialResult:
    trial: int
    seed: int
    rot_perturbation_deg: float
    trans_perturbation_m: float
    occlusion: float
    add_per_iter: list[float]
    add: float
    adds: float
    rot_err_deg: float
    trans_err_m: float
    pass_01d: bool
    pass_005d: bool
    iterations_run: int
    failure: str
    runtime_ms: float


@dataclass
class BenchmarkReport:
    rows: list[TrialResult]
    iterations: int
    diameter: float
    spec: dict
    config: dict

    def success_rate(self, k: int, fraction: float) -> float:
        """Fraction of trials whose ADD after ``k`` iterations is below ``fraction * d``."""
        hits = sum(success_at(r.add_per_iter[k], self.diameter, fraction)
                   for r in self.rows if not math.isnan(r.add_per_iter[k]))
        return hits / len(self.rows)

    def aggregates(self) -> list[dict]:
        return [{"iterations": k, "success_01d": self.success_rate(k, 0.1),
                 "success_005d": self.success_rate(k, 0.05)} for k in range(self.iterations + 1)]

    def csv_text(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        add_cols = [f"add_k{k}" for k in range(self.iterations + 1)]
        wr.writerow(["trial", "seed", "rot_perturbation_deg", "trans_perturbation_m", "occlusion",
                     *add_cols, "add", "adds", "rot_err_deg", "trans_err_m", "pass_0.1d", "pass_0.05d",
                     "iterations_run", "failure"])
        for r in self.rows:
            wr.writerow([r.trial, r.seed, f"{r.rot_perturbation_deg:.6f}", f"{r.trans_perturbation_m:.8f}",
                         f"{r.occlusion:.4f}", *(f"{a:.8f}" for a in r.add_per_iter),
                         f"{r.add:.8f}", f"{r.adds:.8f}", f"{r.rot_err_deg:.6f}", f"{r.trans_err_m:.8f}",
                         int(r.pass_01d), int(r.pass_005d), r.iterations_run, r.failure])
        return buf.getvalue()

    def aggregates_csv_text(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iterations", "success_0.1d", "success_0.05d"])
        for a in self.aggregates():
            wr.writerow([a["iterations"], f"{a['success_01d']:.4f}", f"{a['success_005d']:.4f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        """Deterministic CSV at ``path``; timings go to ``<path>.timing.json``."""
        path = Path(path)
        path.write_text(self.csv_text())
        timing = {"runtime_ms": [round(r.runtime_ms, 3) for r in self.rows]}
        path.with_name(path.name + ".timing.json").write_text(json.dumps(timing))


def run_trial(spec: ScenarioSpec, config: RefinerConfig, mesh: TriangleMesh, trial: int) -> TrialResult:
    t0 = time.perf_counter()
    rng = trial_rng(spec.seed, trial)
    K = spec.camera
    d = mesh.diameter
    gt = sample_gt_pose(spec, rng)
    P0 = sample_perturbed_pose(gt, spec.perturbation, rng, d)
    occ_frac = rng.uniform(*spec.occlusion_range) if spec.occluder else 0.0
    rot0 = float(np.degrees(np.arccos(np.clip((np.trace(P0.rotation.T @ gt.rotation) - 1) / 2, -1, 1))))
    trans0 = float(np.linalg.norm(P0.translation - gt.translation))
    N = config.iterations
    failure = ""
    adds_k = [add_metric(mesh, gt, P0)]
    final = P0
    run = 0
    try:
        _, Kc = roi_from_pose(P0, mesh, K, spec.crop_pad, spec.crop_size)
        scene = mesh
        if spec.occluder:
            occ = make_occluder(mesh, gt, Kc, occ_frac, rng)
            if occ is not None:
                scene = merge_meshes(mesh, occ)
        target = rasterize(scene, gt, Kc)
        cfg = RefinerConfig(**{**asdict(config), "seed": int(rng.integers(2**31))})
        trace = refine(target.color, mesh, P0, Kc, cfg, gt_pose=gt, observed_depth=target.depth)
        run = len(trace)
        failure = trace.failure or ""
        for k in range(1, N + 1):
            adds_k.append(add_metric(mesh, gt, trace.pose_at(k)))
        final = trace.final_pose
    except (RefinementError, ValueError) as exc:
        failure = str(exc)
        adds_k += [float("nan")] * (N + 1 - len(adds_k))
    add = add_metric(mesh, gt, final)
    adds = adds_metric(mesh, gt, final)
    rot = float(np.degrees(np.arccos(np.clip((np.trace(final.rotation.T @ gt.rotation) - 1) / 2, -1, 1))))
    ok = not (failure and run == 0)
    return TrialResult(
        trial=trial, seed=spec.seed, rot_perturbation_deg=rot0, trans_perturbation_m=trans0,
        occlusion=occ_frac, add_per_iter=adds_k, add=add, adds=adds, rot_err_deg=rot,
        trans_err_m=float(np.linalg.norm(final.translation - gt.translation)),
        pass_01d=ok and success_at(add, d, 0.1), pass_005d=ok and success_at(add, d, 0.05),
        iterations_run=run, failure=failure, runtime_ms=(time.perf_counter() - t0) * 1e3)


def run_benchmark(spec: ScenarioSpec, config: RefinerConfig, workers: int = 1) -> BenchmarkReport:
    """Run every trial; failures are recorded in their row and count as misses."""
    mesh = get_mesh(spec.mesh)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(lambda i: run_trial(spec, config, mesh, i), range(spec.trials)))
    else:
        rows = [run_trial(spec, config, mesh, i) for i in range(spec.trials)]
    return BenchmarkReport(rows, config.iterations, mesh.diameter, spec.to_dict(), config.to_dict())
