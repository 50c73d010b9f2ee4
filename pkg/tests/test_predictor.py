import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from posematch.correlation import build_correlation, extract_features, lookup_shape_constraint, window_offsets
from posematch.flow import FlowField, downsample_flow, gt_flow, pose_induced_flow
from posematch.geometry import CameraIntrinsics, RigidPose
from posematch.mesh import TriangleMesh, procedural_colors
from posematch.predictor import AMBIGUITY_THRESHOLD, PredictorInput, predict_intermediate_flow
from posematch.render import rasterize

R = 4
N_WIN = (2 * R + 1) ** 2


def single_cell(window, base=(0.5, -0.25), levels=1):
    corr = np.zeros((1, 1, levels * N_WIN), np.float32)
    corr[0, 0, :N_WIN] = window
    base = FlowField(np.array(base, float).reshape(1, 1, 2), np.ones((1, 1), bool))
    return PredictorInput(corr, base, None, 1, R)


def test_one_hot_window():
    offs = window_offsets(R)
    w = np.zeros(N_WIN)
    w[np.flatnonzero((offs[:, 0] == 2) & (offs[:, 1] == 1))] = 1.0
    out = predict_intermediate_flow(single_cell(w), temperature=0.01)
    assert np.abs(out.residual[0, 0] - [2, 1]).max() < 1e-6
    assert np.abs(out.flow.flow[0, 0] - [2.5, 0.75]).max() < 1e-6
    assert out.confidence[0, 0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("value", [0.8, 0.1])
def test_uniform_window_gives_zero_residual(value):
    out = predict_intermediate_flow(single_cell(np.full(N_WIN, value)))
    assert np.array_equal(out.residual[0, 0], [0.0, 0.0])


def test_ambiguous_cells_keep_lookup_flow():
    w = np.zeros(N_WIN)
    w[3] = AMBIGUITY_THRESHOLD - 1e-3
    out = predict_intermediate_flow(single_cell(w))
    assert out.confidence[0, 0] == 0 and not out.residual.any()
    assert out.flow.flow[0, 0].tolist() == [0.5, -0.25]


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        predict_intermediate_flow(single_cell(np.zeros(N_WIN)), temperature=0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, (3, 4, 2 * N_WIN), elements=st.floats(-1, 1, width=32)),
       st.floats(0.001, 5.0))
def test_residual_stays_inside_window(corr, temperature):
    valid = np.ones((3, 4), bool)
    valid[0, 0] = False
    inp = PredictorInput(corr, FlowField(np.zeros((3, 4, 2)), valid), None, 2, R)
    out = predict_intermediate_flow(inp, temperature)
    assert np.abs(out.residual).max() <= R
    assert np.array_equal(out.flow.valid, valid)
    assert np.all((out.confidence >= 0) & (out.confidence <= 1))
    assert out.confidence[0, 0] == 0 and not out.residual[0, 0].any()


def test_low_temperature_limit_is_argmax(rng):
    offs = window_offsets(R)
    corr = rng.uniform(0.3, 0.9, size=(16, 16, N_WIN))
    planted = rng.integers(N_WIN, size=(16, 16))
    np.put_along_axis(corr, planted[..., None], 1.0, axis=-1)
    corr = corr.astype(np.float32)
    top = np.sort(corr, axis=-1)
    unique = top[..., -1] - top[..., -2] > 0.02
    valid = np.ones((16, 16), bool)
    out = predict_intermediate_flow(PredictorInput(corr, FlowField.zeros(16, 16), None, 1, R), 1e-3)
    expect = offs[corr.argmax(axis=-1)]
    assert unique.sum() > 100
    assert np.abs(out.residual[unique & valid] - expect[unique]).max() < 1e-6


def test_confidence_is_max_softmax_weight(rng):
    w = rng.uniform(0.3, 1.0, N_WIN).astype(np.float32)
    out = predict_intermediate_flow(single_cell(w), temperature=0.1)
    e = np.exp((w.astype(float) - w.max()) / 0.1)
    assert out.confidence[0, 0] == pytest.approx(e.max() / e.sum(), rel=1e-12)


def test_validity_equals_pose_flow_validity(rng):
    valid = rng.random((8, 8)) > 0.5
    corr = rng.uniform(0, 1, (8, 8, N_WIN)).astype(np.float32)
    out = predict_intermediate_flow(PredictorInput(corr, FlowField(np.zeros((8, 8, 2)), valid), None, 1, R))
    assert np.array_equal(out.flow.valid, valid)
    assert not out.flow.flow[~valid].any()


def textured_plate(size=0.12, divisions=6):
    g = np.linspace(-size / 2, size / 2, divisions + 1)
    v = np.array([[x, y, 0.0] for y in g for x in g])
    n = divisions + 1
    f = []
    for i in range(divisions):
        for j in range(divisions):
            q = [i * n + j, i * n + j + 1, (i + 1) * n + j + 1, (i + 1) * n + j]
            f += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    return TriangleMesh(v, f, procedural_colors(v, size / 8), face_texture=np.full(len(f), size / 8))


def test_recovers_three_cell_in_plane_shift():
    K = CameraIntrinsics(400.0, 400.0, 128.0, 128.0, 256, 256)
    mesh = textured_plate()
    z = 0.4
    P0 = RigidPose(np.eye(3), [0.0, 0.0, z])
    Pgt = RigidPose(np.eye(3), [12 * z / K.fx, 0.0, z])  # 12 px = 3 cells
    src = rasterize(mesh, P0, K)
    tgt = rasterize(mesh, Pgt, K)
    pyr = build_correlation(extract_features(src.color), extract_features(tgt.color), 4)
    truth = downsample_flow(gt_flow(src, P0, Pgt, K), 4)
    pflow = FlowField(np.zeros((64, 64, 2)), downsample_flow(pose_induced_flow(src, P0, P0, K), 4).valid)
    out = predict_intermediate_flow(PredictorInput(lookup_shape_constraint(pyr, pflow, R), pflow, None, 1, R))
    both = out.flow.valid & truth.valid
    assert both.sum() > 500
    assert np.abs(truth.flow[both] - [3, 0]).max() < 1e-9
    err = np.linalg.norm(out.flow.flow[both] - truth.flow[both], axis=-1)
    assert np.mean(err < 0.25) >= 0.9


def test_mismatched_shapes_rejected():
    with pytest.raises(ValueError):
        PredictorInput(np.zeros((2, 2, N_WIN)), FlowField.zeros(3, 2), None, 1, R)
