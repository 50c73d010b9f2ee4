"""ADD / ADD-S pose accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidPose, pose_errors
from .mesh import TriangleMesh


@dataclass
class MetricReport:
    add: float
    adds: float
    add_01d: bool
    add_005d: bool
    adds_01d: bool
    adds_005d: bool
    rot_err_deg: float
    trans_err_m: float
    diameter: float

    def to_dict(self) -> dict:
        return asdict(self)


def _vertices(mesh) -> np.ndarray:
    v = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=np.float64)
    if len(v) == 0:
        raise ValueError("mesh has no vertices")
    return v


def add_metric(mesh, Pgt: RigidPose, Ppred: RigidPose) -> float:
    """Mean distance between corresponding vertices under the two poses."""
    v = _vertices(mesh)
    return float(np.linalg.norm(Pgt.transform(v) - Ppred.transform(v), axis=1).mean())


def adds_metric(mesh, Pgt: RigidPose, Ppred: RigidPose) -> float:
    """Mean distance from each ground-truth vertex to the nearest predicted vertex."""
    v = _vertices(mesh)
    pred, gt = Ppred.transform(v), Pgt.transform(v)
    _, idx = cKDTree(pred).query(gt, k=1)
    return float(np.linalg.norm(gt - pred[idx], axis=1).mean())


def success_at(metric_value: float, mesh_diameter: float, fraction: float = 0.1) -> bool:
    if mesh_diameter <= 0:
        raise ValueError("diameter must be positive")
    return bool(metric_value < fraction * mesh_diameter)


def evaluate(mesh: TriangleMesh, Pgt: RigidPose, Ppred: RigidPose) -> MetricReport:
    d = mesh.diameter
    add = add_metric(mesh, Pgt, Ppred)
    adds = adds_metric(mesh, Pgt, Ppred)
    rot, trans = pose_errors(Pgt, Ppred)
    return MetricReport(add, adds, success_at(add, d, 0.1), success_at(add, d, 0.05),
                        success_at(adds, d, 0.1), success_at(adds, d, 0.05), rot, trans, d)
