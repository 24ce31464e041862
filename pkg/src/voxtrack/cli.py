"""Command-line interface: scene building, sequence synthesis, tracking,
and evaluation.  All file writes are atomic (temp file + rename).

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from voxtrack import bench, field as fd, tracker as tk


class UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(self, message)


def _atomic_write(path: str, write_fn):
    """Write via a sibling temp file and rename into place."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fh, tmp = tempfile.mkstemp(prefix=".voxtrack-", dir=directory)
    os.close(fh)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxtrack", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-scene", help="rasterize or fit the scene fields")
    b.add_argument("--scene", required=True)
    b.add_argument("--out-dir", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--fidelity", action="store_true", help="fit the object field from renders")
    b.add_argument("--map-points", type=int, default=400)

    s = sub.add_parser("synth", help="render a query sequence with ground truth")
    s.add_argument("--scene", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None, help="override the trajectory seed")

    t = sub.add_parser("track", help="run the tracker over a synthesized sequence")
    t.add_argument("--scene", required=True)
    t.add_argument("--traj", required=True)
    t.add_argument("--out", required=True, help="trajectory CSV output")
    t.add_argument("--gt-out", default=None, help="also write the ground-truth CSV")
    t.add_argument("--map-out", default=None, help="also write the object map (VXM1)")
    t.add_argument("--seed", type=int, default=None, help="override the trajectory seed")
    t.add_argument("--timing", action="store_true", help="write measured ms (non-reproducible)")
    t.add_argument(
        "--static-reference",
        action="store_true",
        help="disable dynamic references (fixed nearest canonical view)",
    )

    e = sub.add_parser("eval", help="compute pose-error metrics")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--map", required=True)
    e.add_argument("--json", required=True)

    d = sub.add_parser("demo", help="end-to-end pipeline on the standard scene")
    d.add_argument("--out-dir", default="demo-out")
    d.add_argument("--frames", type=int, default=40)
    d.add_argument("--seed", type=int, default=7)
    return p


def _build(scene_path: str, seed: int, fidelity: bool = False, map_points: int = 400):
    spec = bench.load_scene(scene_path)
    return bench.build_scene(spec, seed=seed, fidelity=fidelity, map_points=map_points)


def _cmd_build_scene(args) -> int:
    scene = _build(args.scene, args.seed, fidelity=args.fidelity, map_points=args.map_points)
    os.makedirs(args.out_dir, exist_ok=True)
    obj_path = os.path.join(args.out_dir, "object.vxf")
    _atomic_write(obj_path, lambda tmp: scene.object_field.save(tmp))
    print(f"wrote {obj_path}")
    if scene.background is not None:
        bg_path = os.path.join(args.out_dir, "background.vxf")
        _atomic_write(bg_path, lambda tmp: scene.background.save(tmp))
        print(f"wrote {bg_path}")
    map_path = os.path.join(args.out_dir, "map.vxm")
    _atomic_write(map_path, lambda tmp: scene.object_map.save(tmp))
    print(f"wrote {map_path} ({len(scene.object_map)} points)")
    return 0


def _cmd_synth(args) -> int:
    spec = bench.load_scene(args.scene)
    traj = bench.load_trajectory(args.traj)
    if args.seed is not None:
        traj.seed = args.seed
    scene = bench.build_scene(spec, seed=traj.seed)
    frames = bench.synth_sequence(scene, traj)
    os.makedirs(args.out_dir, exist_ok=True)
    for k, (img, _) in enumerate(frames):
        path = os.path.join(args.out_dir, f"frame_{k:05d}.ppm")
        _atomic_write(path, lambda tmp, img=img: fd.write_ppm(tmp, img))
    gt_path = os.path.join(args.out_dir, "gt.csv")
    _atomic_write(gt_path, lambda tmp: bench.write_gt_csv(tmp, [p for _, p in frames]))
    print(f"wrote {len(frames)} frames and {gt_path}")
    return 0


def _cmd_track(args) -> int:
    spec = bench.load_scene(args.scene)
    traj = bench.load_trajectory(args.traj)
    if args.seed is not None:
        traj.seed = args.seed
    scene = bench.build_scene(spec, seed=traj.seed)
    frames = bench.synth_sequence(scene, traj)
    cfg = tk.TrackerConfig(
        object_field=scene.object_field,
        object_map=scene.object_map,
        bundle=scene.bundle,
        background=scene.background,
        dynamic_reference=not args.static_reference,
        seed=traj.seed,
    )
    tracker = tk.new_tracker(cfg)
    reports = tk.run_stream(tracker, [(img, scene.camera) for img, _ in frames])
    _atomic_write(args.out, lambda tmp: tk.write_trajectory(reports, tmp, timing=args.timing))
    print(f"wrote {args.out}")
    if args.gt_out:
        _atomic_write(args.gt_out, lambda tmp: bench.write_gt_csv(tmp, [p for _, p in frames]))
        print(f"wrote {args.gt_out}")
    if args.map_out:
        _atomic_write(args.map_out, lambda tmp: scene.object_map.save(tmp))
        print(f"wrote {args.map_out}")
    warm = sum(1 for r in reports if r.state_after == "warm")
    print(f"tracked {len(reports)} frames, {warm} warm")
    return 0


def _cmd_eval(args) -> int:
    records = tk.read_trajectory(args.est)
    gt = bench.read_gt_csv(args.gt)
    omap = fd.ObjectMap.load(args.map)
    metrics = bench.evaluate(records, gt, omap.points)
    flat = metrics.to_flat_dict()
    _atomic_write(
        args.json,
        lambda tmp: open(tmp, "w", encoding="ascii").write(json.dumps(flat, indent=2) + "\n"),
    )
    for key, value in flat.items():
        print(f"{key} = {value}")
    return 0


def _cmd_demo(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    scene_path = bench.standard_scene_path()
    traj = bench.load_trajectory(bench.bundled_trajectory_path("orbit"))
    traj.frames = args.frames
    traj.seed = args.seed
    spec = bench.load_scene(scene_path)
    scene = bench.build_scene(spec, seed=traj.seed)
    frames = bench.synth_sequence(scene, traj)
    cfg = tk.TrackerConfig(
        object_field=scene.object_field,
        object_map=scene.object_map,
        bundle=scene.bundle,
        background=scene.background,
        seed=traj.seed,
    )
    reports = tk.run_stream(tk.new_tracker(cfg), [(img, scene.camera) for img, _ in frames])
    run_path = os.path.join(args.out_dir, "run.csv")
    gt_path = os.path.join(args.out_dir, "gt.csv")
    map_path = os.path.join(args.out_dir, "map.vxm")
    metrics_path = os.path.join(args.out_dir, "metrics.json")
    _atomic_write(run_path, lambda tmp: tk.write_trajectory(reports, tmp))
    _atomic_write(gt_path, lambda tmp: bench.write_gt_csv(tmp, [p for _, p in frames]))
    _atomic_write(map_path, lambda tmp: scene.object_map.save(tmp))
    metrics = bench.evaluate(
        [(r.state_after, r.pose) for r in reports], [p for _, p in frames], scene.object_map.points
    )
    flat = metrics.to_flat_dict()
    _atomic_write(
        metrics_path,
        lambda tmp: open(tmp, "w", encoding="ascii").write(json.dumps(flat, indent=2) + "\n"),
    )
    print(f"demo outputs in {args.out_dir}")
    for key in (
        "frames",
        "cold_start_count",
        "rotation_err_median_deg",
        "translation_err_median_frac",
        "success_rate",
    ):
        print(f"{key} = {flat[key]}")
    return 0


_COMMANDS = {
    "build-scene": _cmd_build_scene,
    "synth": _cmd_synth,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "demo": _cmd_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        e.parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # runtime failures: report and exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
