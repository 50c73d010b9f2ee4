import numpy as np
import pytest

from posematch.geometry import CameraIntrinsics, RigidPose, random_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K64():
    return CameraIntrinsics(90.0, 90.0, 32.0, 32.0, 64, 64)


def random_pose(rng, z=(0.35, 0.5), xy=0.02) -> RigidPose:
    return RigidPose(random_rotation(rng), [*rng.uniform(-xy, xy, 2), rng.uniform(*z)])


def brute_force_render(mesh, pose, K, width, height):
    """Per-pixel ray casting against every triangle (Moller-Trumbore).

    Returns depth (+inf where empty), model-frame hit points and the
    smallest barycentric margin of the winning hit (for boundary pixels).
    """
    Xc = pose.transform(mesh.vertices)
    ys, xs = np.mgrid[0:height, 0:width]
    d = np.stack([(xs + 0.5 - K.cx) / K.fx, (ys + 0.5 - K.cy) / K.fy, np.ones_like(xs, float)], -1)
    d = d.reshape(-1, 3)
    depth = np.full(len(d), np.inf)
    hit = np.full((len(d), 3), np.nan)
    margin = np.full(len(d), np.inf)
    for f in mesh.faces:
        a, b, c = Xc[f]
        e1, e2 = b - a, c - a
        p = np.cross(d, e2)
        det = p @ e1
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = -a
        u = (p @ s) * inv
        q = np.cross(s, e1)
        v = (d @ q) * inv
        t = (q @ e2) * inv
        m = np.minimum(np.minimum(u, v), 1 - u - v)
        inside = ok & (m >= 0) & (t > 0)
        better = inside & (t < depth)
        depth[better] = t[better]
        hit[better] = (a + u[better, None] * e1 + v[better, None] * e2)
        margin[better] = m[better]
    model = (hit - pose.translation) @ pose.rotation
    return depth.reshape(height, width), model.reshape(height, width, 3), margin.reshape(height, width)


def project_loop(points, pose, K):
    """Scalar re-derivation of the pinhole projection."""
    out = []
    for p in points:
        X = [sum(pose.rotation[i, j] * p[j] for j in range(3)) + pose.translation[i] for i in range(3)]
        out.append((K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy, X[2]))
    return np.array(out)


def make_scene(spec, trial, mesh=None):
    """gt pose, initial pose, crop intrinsics and target render, as the harness builds them."""
    from posematch.harness import sample_gt_pose, sample_perturbed_pose, trial_rng
    from posematch.mesh import get_mesh
    from posematch.render import rasterize, roi_from_pose

    mesh = mesh or get_mesh(spec.mesh)
    rng = trial_rng(spec.seed, trial)
    gt = sample_gt_pose(spec, rng)
    P0 = sample_perturbed_pose(gt, spec.perturbation, rng, mesh.diameter)
    _, Kc = roi_from_pose(P0, mesh, spec.camera, spec.crop_pad, spec.crop_size)
    return mesh, gt, P0, Kc, rasterize(mesh, gt, Kc)
