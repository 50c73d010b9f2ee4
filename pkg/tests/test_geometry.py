import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from posematch.geometry import (
    CameraIntrinsics, GeometryError, PoseDelta, RigidPose, TranslationDelta, axis_angle_matrix,
    compose_pose, decompose_pose, load_poses, pose_errors, project, random_rotation, rot6d_decode,
    rot6d_encode, save_poses,
)

from conftest import project_loop, random_pose

K = CameraIntrinsics(500, 500, 128, 128, 256, 256)


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0, 500, 10, 10, 20, 20)
    with pytest.raises(GeometryError):
        CameraIntrinsics(500, 500, 20, 10, 20, 20)
    assert CameraIntrinsics.crop(500, 500, -5, 30, 20, 20).cx == -5


def test_project_examples():
    pose = RigidPose(np.eye(3), [0, 0, 1])
    uv, z, ok = project([[0, 0, 0], [0.1, 0, 0]], pose, K)
    assert np.array_equal(uv, [[128, 128], [178, 128]])
    assert np.array_equal(z, [1, 1]) and ok.all()


def test_project_flags_points_behind_camera():
    pose = RigidPose(np.eye(3), [0, 0, 0.5])
    uv, z, ok = project([[0, 0, 0], [0, 0, -0.5], [0, 0, -1]], pose, K)
    assert ok.tolist() == [True, False, False]
    assert np.isnan(uv[1:]).all()


def test_project_matches_loop_oracle(rng):
    for _ in range(20):
        pose = random_pose(rng)
        pts = rng.normal(scale=0.05, size=(50, 3))
        uv, z, _ = project(pts, pose, K)
        ref = project_loop(pts, pose, K)
        assert np.max(np.abs(uv - ref[:, :2])) < 1e-9
        assert np.max(np.abs(z - ref[:, 2])) < 1e-12


def test_project_scale_consistency(rng):
    pose = random_pose(rng)
    pts = rng.normal(scale=0.05, size=(30, 3))
    a = project(pts, pose, K)[0]
    b = project(pose.transform(pts), RigidPose.identity(), K)[0]
    assert np.array_equal(a, b)


def test_rot6d_examples():
    assert np.array_equal(rot6d_encode(np.eye(3)), [1, 0, 0, 0, 1, 0])
    assert np.array_equal(rot6d_decode([2, 0, 0, 0, 3, 0]), np.eye(3))


def test_rot6d_roundtrip_1000(rng):
    err = max(np.abs(rot6d_decode(rot6d_encode(R)) - R).max()
              for R in (random_rotation(rng) for _ in range(1000)))
    assert err < 1e-9


@pytest.mark.parametrize("v", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1, 2, 3, 0, 0, 0],
                               [1e-13, 0, 0, 0, 1, 0]])
def test_rot6d_degenerate(v):
    with pytest.raises(GeometryError, match="degenerate rotation encoding"):
        rot6d_decode(v)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=6, max_size=6))
def test_rot6d_decode_is_rotation(v):
    a1, a2 = np.array(v[:3]), np.array(v[3:])
    n1 = np.linalg.norm(a1)
    if n1 < 1e-3 or np.linalg.norm(np.cross(a1, a2)) < 1e-3 * n1 * max(np.linalg.norm(a2), 1e-3):
        return
    R = rot6d_decode(v)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_compose_identity_is_exact(rng):
    for _ in range(50):
        prev = random_pose(rng)
        out = compose_pose(prev, PoseDelta.identity(), K)
        assert np.abs(out.rotation - prev.rotation).max() <= 1e-15
        assert np.array_equal(out.translation, prev.translation)


def test_compose_depth_halving():
    prev = RigidPose(np.eye(3), [0, 0, 1])
    out = compose_pose(prev, PoseDelta(np.array([1.0, 0, 0, 0, 1, 0]), TranslationDelta(0, 0, math.log(2))), K)
    assert out.translation.tolist() == [0.0, 0.0, 0.5]


def test_compose_translation_formula():
    prev = RigidPose(np.eye(3), [0.02, -0.01, 0.4])
    d = PoseDelta(np.array([1.0, 0, 0, 0, 1, 0]), TranslationDelta(10.0, -4.0, 0.1))
    t = compose_pose(prev, d, K).translation
    z = 0.4 * math.exp(-0.1)
    assert np.allclose(t, [(0.02 / 0.4 + 10 / 500) * z, (-0.01 / 0.4 - 4 / 500) * z, z], atol=1e-15)


def test_compose_rejects_non_finite():
    with pytest.raises(GeometryError):
        compose_pose(RigidPose(np.eye(3), [0, 0, 1]),
                     PoseDelta(np.array([1.0, 0, 0, 0, 1, 0]), TranslationDelta(np.nan, 0, 0)), K)


def test_decompose_inverts_compose(rng):
    for _ in range(200):
        prev = random_pose(rng)
        R = axis_angle_matrix(rng.normal(size=3), rng.uniform(0, 20))
        d = PoseDelta(rot6d_encode(R), TranslationDelta(*rng.normal(scale=[5, 5, 0.05])))
        back = decompose_pose(prev, compose_pose(prev, d, K), K)
        assert np.abs(back.as_vector() - d.as_vector()).max() < 1e-9


def test_chained_composition_stays_orthonormal(rng):
    pose = random_pose(rng)
    for _ in range(10000):
        R = axis_angle_matrix(rng.normal(size=3), rng.uniform(0, 5))
        d = PoseDelta(rot6d_encode(R), TranslationDelta(*rng.normal(scale=[0.1, 0.1, 1e-3])))
        pose = compose_pose(pose, d, K)
    assert pose.is_valid(1e-9)


def test_pose_errors_examples(rng):
    a = random_pose(rng)
    assert pose_errors(a, a) == (0.0, 0.0)
    b = RigidPose(axis_angle_matrix([0, 0, 1], 90) @ a.rotation, a.translation)
    ang, tr = pose_errors(a, b)
    assert abs(ang - 90) < 1e-9 and tr == 0


def test_pose_errors_quaternion_oracle(rng):
    for _ in range(200):
        a, b = random_pose(rng), random_pose(rng)
        qa = Rotation.from_matrix(a.rotation).as_quat()
        qb = Rotation.from_matrix(b.rotation).as_quat()
        ref = math.degrees(2 * math.acos(min(1.0, abs(float(qa @ qb)))))
        assert abs(pose_errors(a, b)[0] - ref) < 1e-6


def test_pose_json_roundtrip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(3)]
    save_poses(tmp_path / "seq.json", poses)
    assert load_poses(tmp_path / "seq.json") == poses
    save_poses(tmp_path / "one.json", poses[0])
    assert load_poses(tmp_path / "one.json") == poses[0]
    (tmp_path / "bad.json").write_text('{"R": [1, 0, 0], "t": [0, 0, 1]}')
    with pytest.raises(GeometryError):
        load_poses(tmp_path / "bad.json")
