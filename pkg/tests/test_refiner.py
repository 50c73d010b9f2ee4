import json

import numpy as np
import pytest

from posematch.flow import FlowField, downsample_flow, gt_flow, pose_induced_flow
from posematch.geometry import RigidPose, pose_errors
from posematch.harness import PerturbationRanges, ScenarioSpec, run_benchmark
from posematch.metrics import add_metric
from posematch.refiner import (
    IterationRecord, RefinementError, RefinementTrace, RefinerConfig, diagnostic_loss, loss_weights, refine,
    save_trace,
)
from posematch.render import rasterize
from posematch.solver import lift_flow, solve_epnp_ransac

from conftest import make_scene


def test_config_defaults_and_validation():
    cfg = RefinerConfig()
    assert (cfg.iterations, cfg.gamma, cfg.alpha, cfg.radius, cfg.levels, cfg.temperature) == (8, 0.8, 0.1, 4, 4, 0.1)
    for bad in ({"iterations": 0}, {"gamma": 0.0}, {"gamma": 1.5}, {"alpha": -0.1}, {"solver": "x"},
                {"lookup": "x"}, {"temperature": 0.0}, {"radius": 0}):
        with pytest.raises(ValueError):
            RefinerConfig(**bad)
    assert RefinerConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict()["schema"] == 1
    with pytest.raises(ValueError, match="schema"):
        RefinerConfig.from_dict({"schema": 2})
    with pytest.raises(ValueError, match="unknown"):
        RefinerConfig.from_dict({"iters": 3})


def test_fixed_point_when_initial_pose_is_gt():
    spec = ScenarioSpec(perturbation=PerturbationRanges(0, 0, 0))
    for trial in range(5):
        mesh, gt, P0, Kc, target = make_scene(spec, trial)
        assert P0 == gt
        trace = refine(target.color, mesh, P0, Kc)
        rot, tr = pose_errors(trace.final_pose, gt)
        assert len(trace) == 8 and trace.failure is None
        assert rot < 0.5 and tr < 0.005 * mesh.diameter


@pytest.mark.slow
def test_perturbed_start_converges():
    spec = ScenarioSpec(perturbation=PerturbationRanges(10.0, 0.05, 0.0), trials=100, seed=3)
    report = run_benchmark(spec, RefinerConfig())
    assert report.success_rate(8, 0.05) >= 0.9


def test_trace_structure_and_pose_flow_consistency():
    spec = ScenarioSpec(seed=11)
    mesh, gt, P0, Kc, target = make_scene(spec, 0)
    trace = refine(target.color, mesh, P0, Kc, gt_pose=gt)
    assert len(trace) == 8 and trace.pose_at(0) == P0 and trace.pose_at(8) == trace.final_pose
    buf = rasterize(mesh, P0, Kc)
    prev = P0
    for rec in trace.records:
        assert rec.pose.is_valid(1e-9)
        again = downsample_flow(pose_induced_flow(buf, P0, prev, Kc), 4)
        assert np.array_equal(again.flow, rec.pose_flow.flow)
        assert np.array_equal(again.valid, rec.pose_flow.valid)
        assert np.array_equal(rec.intermediate.valid, rec.pose_flow.valid)
        assert rec.flow_l1 is not None and rec.rot_err is not None
        prev = rec.pose
    # iteration 1 looks up around the zero flow of P0 against itself
    assert np.abs(trace.records[0].pose_flow.flow).max() < 0.71 / 4


def test_refine_is_deterministic():
    spec = ScenarioSpec(seed=5)
    mesh, gt, P0, Kc, target = make_scene(spec, 1)
    a = refine(target.color, mesh, P0, Kc)
    b = refine(target.color, mesh, P0, Kc)
    for ra, rb in zip(a.records, b.records):
        assert ra.pose == rb.pose
        assert np.array_equal(ra.intermediate_full.flow, rb.intermediate_full.flow)
        assert np.array_equal(ra.confidence, rb.confidence)


def test_cross_solver_sanity():
    spec = ScenarioSpec(seed=2)
    for trial in range(3):
        mesh, gt, P0, Kc, target = make_scene(spec, trial)
        trace = refine(target.color, mesh, P0, Kc)
        last = trace.records[-1]
        corrs = lift_flow(trace.buffers0, last.intermediate_full, None, 2)
        pose, _ = solve_epnp_ransac(corrs, Kc, 3.0, seed=0)
        rot, tr = pose_errors(pose, trace.final_pose)
        assert rot < 1.0 and tr < 0.02 * mesh.diameter


def test_epnp_solver_mode_runs():
    spec = ScenarioSpec(seed=4)
    mesh, gt, P0, Kc, target = make_scene(spec, 0)
    trace = refine(target.color, mesh, P0, Kc, RefinerConfig(solver="epnp_ransac"))
    assert len(trace) == 8
    assert add_metric(mesh, gt, trace.final_pose) < add_metric(mesh, gt, P0)


def test_solver_failure_truncates_trace():
    spec = ScenarioSpec(seed=4)
    mesh, gt, P0, Kc, target = make_scene(spec, 0)
    trace = refine(np.zeros_like(target.color), mesh, P0, Kc)
    assert len(trace) == 0 and "underdetermined" in trace.failure
    assert trace.final_pose == P0


def test_out_of_view_and_bad_image():
    spec = ScenarioSpec(seed=4)
    mesh, gt, P0, Kc, target = make_scene(spec, 0)
    away = RigidPose(P0.rotation, P0.translation + [5.0, 0, 0])
    with pytest.raises(RefinementError, match="object out of view"):
        refine(target.color, mesh, away, Kc)
    with pytest.raises(ValueError):
        refine(target.color[:10], mesh, P0, Kc)


def fake_trace(mesh, gt, P0, Kc, offsets, shifts, cfg):
    buf = rasterize(mesh, P0, Kc)
    gtf = gt_flow(buf, P0, gt, Kc)
    trace = RefinementTrace(P0, Kc, cfg, buffers0=buf)
    for k, (dt, df) in enumerate(zip(offsets, shifts), 1):
        pose = RigidPose(gt.rotation, gt.translation + dt)
        inter = FlowField(gtf.flow + [df, 0.0], gtf.valid)
        z = FlowField.zeros(64, 64)
        trace.records.append(IterationRecord(k, pose, None, z, z, z, inter, np.zeros((64, 64)), 0.0, 0.0, 0))
    return trace, buf


def test_loss_weights_match_direct_powers():
    w = loss_weights(8, 0.8)
    assert w.tolist() == [0.8 ** (8 - k) for k in range(1, 9)]
    assert loss_weights(1, 0.8).tolist() == [1.0]


def test_diagnostic_loss_arithmetic():
    spec = ScenarioSpec(seed=9)
    mesh, gt, P0, Kc, _ = make_scene(spec, 0)
    cfg = RefinerConfig()
    offsets = [np.array([0.0, 0.0, 0.001 * k]) for k in range(1, 9)]
    shifts = [0.25 * k for k in range(1, 9)]
    trace, buf = fake_trace(mesh, gt, P0, Kc, offsets, shifts, cfg)
    total, pose_l, flow_l = diagnostic_loss(trace, gt, mesh, buf, Kc, cfg)
    assert np.allclose(pose_l, [0.001 * k for k in range(1, 9)], rtol=0, atol=1e-15)
    assert flow_l.tolist() == shifts
    hand = [0.2097152, 0.262144, 0.32768, 0.4096, 0.512, 0.64, 0.8, 1.0]
    expect = sum(w * (p + 0.1 * f) for w, p, f in zip(hand, pose_l, flow_l))
    assert total == pytest.approx(expect, rel=1e-14)

    perfect, _ = fake_trace(mesh, gt, P0, Kc, [np.zeros(3)] * 8, [0.0] * 8, cfg)
    assert diagnostic_loss(perfect, gt, mesh, buf, Kc, cfg)[0] == 0.0

    one, _ = fake_trace(mesh, gt, P0, Kc, offsets[:1], shifts[:1], RefinerConfig(iterations=1))
    t1, p1, f1 = diagnostic_loss(one, gt, mesh, buf, Kc, RefinerConfig(iterations=1))
    assert t1 == p1[0] + 0.1 * f1[0]


def test_save_trace(tmp_path):
    spec = ScenarioSpec(seed=6)
    mesh, gt, P0, Kc, target = make_scene(spec, 0)
    trace = refine(target.color, mesh, P0, Kc, RefinerConfig(iterations=2), gt_pose=gt)
    save_trace(tmp_path, trace, target.color)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"poses.json", "diagnostics.csv", "intermediate_01.flo", "pose_flow_02.flo", "warp_02.png"} <= names
    poses = json.loads((tmp_path / "poses.json").read_text())
    assert len(poses["iterations"]) == 2 and poses["config"]["schema"] == 1
    assert len((tmp_path / "diagnostics.csv").read_text().splitlines()) == 3


def test_soft_monotonicity_is_logged(capsys):
    spec = ScenarioSpec(seed=21)
    mono = 0
    n = 10
    for trial in range(n):
        mesh, gt, P0, Kc, target = make_scene(spec, trial)
        trace = refine(target.color, mesh, P0, Kc)
        errs = [add_metric(mesh, gt, p) for p in trace.poses]
        mono += all(b <= a + 1e-4 * mesh.diameter for a, b in zip(errs[1:], errs[2:]))
    with capsys.disabled():
        print(f"\n[soft] non-increasing ADD from iteration 2 in {mono}/{n} trials")


@pytest.mark.slow
def test_shape_constraint_final_add_not_worse_on_paired_trials():
    spec = ScenarioSpec(trials=30, seed=13)
    sc = run_benchmark(spec, RefinerConfig(lookup="shape_constraint"))
    std = run_benchmark(spec, RefinerConfig(lookup="standard"))
    wins = sum(a.add <= b.add for a, b in zip(sc.rows, std.rows))
    assert wins / spec.trials >= 0.7
