"""Command-line entry point: ``posematch <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad arguments or unreadable/invalid
inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path


from .flow import pose_induced_flow, write_flo
from .geometry import CameraIntrinsics, load_intrinsics, load_poses
from .harness import DEFAULT_INTRINSICS, ScenarioSpec, run_benchmark
from .mesh import MeshParseError, get_mesh
from .metrics import evaluate
from .refiner import RefinerConfig, refine, save_trace
from .render import crop_image, load_png, rasterize, roi_from_pose, save_buffers

log = logging.getLogger("posematch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _config(args) -> RefinerConfig:
    try:
        cfg = RefinerConfig.from_dict(_read_json(args.config)) if args.config else RefinerConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return cfg
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _scenario(args) -> ScenarioSpec:
    try:
        spec = ScenarioSpec.from_dict(_read_json(args.scenario))
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        if getattr(args, "trials", None):
            spec = replace(spec, trials=args.trials)
        return spec
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scenario: {exc}") from exc


def _intrinsics(path) -> CameraIntrinsics:
    if path is None:
        return CameraIntrinsics.from_dict(DEFAULT_INTRINSICS)
    try:
        return load_intrinsics(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid intrinsics {path}: {exc}") from exc


def _pose(path):
    try:
        pose = load_poses(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid pose file {path}: {exc}") from exc
    if isinstance(pose, list):
        if len(pose) != 1:
            raise UsageError(f"{path} must hold exactly one pose")
        pose = pose[0]
    return pose


def _mesh(source):
    try:
        return get_mesh(source)
    except (OSError, MeshParseError, ValueError) as exc:
        raise UsageError(f"cannot load mesh {source}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_render(args) -> int:
    _config(args)
    mesh, pose, K = _mesh(args.mesh), _pose(args.pose), _intrinsics(args.intrinsics)
    buffers = rasterize(mesh, pose, K)
    save_buffers(args.out, buffers)
    log.info("rendered %d pixels to %s", int(buffers.mask.sum()), args.out)
    return 0


def cmd_flow(args) -> int:
    _config(args)
    mesh, K = _mesh(args.mesh), _intrinsics(args.intrinsics)
    pa, pb = _pose(args.pose_a), _pose(args.pose_b)
    buffers = rasterize(mesh, pa, K)
    write_flo(args.out, pose_induced_flow(buffers, pa, pb, K))
    return 0


def cmd_refine(args) -> int:
    cfg = _config(args)
    mesh, P0, K = _mesh(args.mesh), _pose(args.init), _intrinsics(args.intrinsics)
    try:
        image = load_png(args.image)
    except OSError as exc:
        raise UsageError(f"cannot read image {args.image}: {exc}") from exc
    if image.shape[:2] != (K.height, K.width):
        raise UsageError(f"image is {image.shape[1]}x{image.shape[0]}, intrinsics say {K.width}x{K.height}")
    gt = _pose(args.gt) if args.gt else None
    box, Kc = roi_from_pose(P0, mesh, K, args.pad, args.crop_size)
    target = crop_image(image, box)
    trace = refine(target, mesh, P0, Kc, cfg, gt_pose=gt)
    save_trace(args.out, trace, target)
    if trace.failure:
        log.warning("refinement stopped early: %s", trace.failure)
    json.dump(trace.final_pose.to_dict(), sys.stdout)
    sys.stdout.write("\n")
    return 0


def cmd_bench(args) -> int:
    cfg, spec = _config(args), _scenario(args)
    _mesh(spec.mesh)
    report = run_benchmark(spec, cfg, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    out.with_name(out.stem + ".aggregates.csv").write_text(report.aggregates_csv_text())
    final = report.aggregates()[-1]
    log.info("success@0.1d %.3f success@0.05d %.3f", final["success_01d"], final["success_005d"])
    return 0


def cmd_eval(args) -> int:
    _config(args)
    mesh, gt, pred = _mesh(args.mesh), _pose(args.gt), _pose(args.pred)
    json.dump(evaluate(mesh, gt, pred).to_dict(), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def cmd_ablate(args) -> int:
    cfg, spec = _config(args), _scenario(args)
    _mesh(spec.mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for lookup in ("shape_constraint", "standard"):
        rep = run_benchmark(spec, replace(cfg, lookup=lookup), workers=args.workers)
        rep.write(out / f"{lookup}.csv")
        reports[lookup] = rep
    with open(out / "iterations.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iterations", "shape_constraint_0.1d", "shape_constraint_0.05d",
                     "standard_0.1d", "standard_0.05d"])
        for k in range(cfg.iterations + 1):
            wr.writerow([k] + [f"{reports[m].success_rate(k, f):.4f}"
                               for m in ("shape_constraint", "standard") for f in (0.1, 0.05)])
    n = cfg.iterations
    summary = {m: {"success_0.1d": reports[m].success_rate(n, 0.1),
                   "success_0.05d": reports[m].success_rate(n, 0.05)} for m in reports}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed in --config / the scenario")
    common.add_argument("--config", default=None, help="refiner config JSON (\"schema\": 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="posematch", description="Render-and-compare pose refinement with shape-constrained flow.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("render", parents=[common], help="render color, mask and depth")
    s.add_argument("--mesh", required=True)
    s.add_argument("--pose", required=True)
    s.add_argument("--intrinsics", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("flow", parents=[common], help="pose-induced flow between two poses")
    s.add_argument("--mesh", required=True)
    s.add_argument("--pose-a", required=True)
    s.add_argument("--pose-b", required=True)
    s.add_argument("--intrinsics", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("refine", parents=[common], help="refine an initial pose against an image")
    s.add_argument("--mesh", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--intrinsics", default=None)
    s.add_argument("--gt", default=None, help="ground-truth pose for per-iteration diagnostics")
    s.add_argument("--crop-size", type=int, default=256)
    s.add_argument("--pad", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_refine)

    for name, func, help_ in (("bench", cmd_bench, "Monte-Carlo benchmark"),
                              ("ablate", cmd_ablate, "paired lookup ablation")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--scenario", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--trials", type=int, default=None, help="override the scenario trial count")
        s.add_argument("--workers", type=int, default=1)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="ADD / ADD-S of a predicted pose")
    s.add_argument("--mesh", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("posematch: error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"posematch: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"posematch: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
