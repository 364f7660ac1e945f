"""Command line entry point.

Subcommands::

    synth           scene, ground truth and rendered depth sequence
    fuse            depth fusion only, writes a map snapshot
    run             full pipeline with completion and CRF
    eval            per-class IoU report of a map against ground truth
    export-dataset  training pairs for a completion network
    export-ply      labeled point cloud of the Occupied voxels

Sequence inputs come either from ``--data DIR`` (the layout written by
``synth``) or from ``--depth``, ``--trajectory`` and ``--intrinsics``.
Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .completion import CompletionError
from .core_map import MapCapacityError
from .dataset import export_training_pairs, fuse_frames
from .evaluation import evaluate
from .fileio import (export_ply, load_gt, load_map, save_depth_png, save_gt, save_map,
                     save_trajectory)
from .pipeline import PipelineConfig, iter_sequence, run_sequence
from .sensor import CameraIntrinsics
from .synth import RoomSpec, build_scene, generate_trajectory, render_depth

log = logging.getLogger("semocc")

DEPTH_DIR = "depth"
TRAJECTORY = "trajectory.txt"
INTRINSICS = "intrinsics.json"
GT_FILE = "gt.bin"
SCENE_FILE = "scene.json"


class UsageError(Exception):
    pass


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sequence_paths(args):
    if args.data:
        d = Path(args.data)
        depth = args.depth or d / DEPTH_DIR
        traj = args.trajectory or d / TRAJECTORY
        intr = args.intrinsics or d / INTRINSICS
    else:
        depth, traj, intr = args.depth, args.trajectory, args.intrinsics
    missing = [n for n, v in (("--depth", depth), ("--trajectory", traj),
                              ("--intrinsics", intr)) if v is None]
    if missing:
        raise UsageError(f"need --data or {', '.join(missing)}")
    return Path(depth), Path(traj), Path(intr)


def _gt_path(args, required=False):
    gt = args.gt or (Path(args.data) / GT_FILE if getattr(args, "data", None) else None)
    if gt is None and required:
        raise UsageError("ground truth needed: pass --gt or --data")
    return gt


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        merged = cfg.to_dict()
        for k, v in json.loads(p.read_text()).items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k] = {**merged[k], **v}
            else:
                merged[k] = v
        cfg = PipelineConfig.from_dict(merged)
    return cfg


def _load_intrinsics(path) -> CameraIntrinsics:
    if not Path(path).is_file():
        raise FileNotFoundError(f"intrinsics file not found: {path}")
    return CameraIntrinsics.load(path)


def cmd_synth(args) -> int:
    spec = RoomSpec()
    if args.scene_spec:
        spec = RoomSpec.from_dict(json.loads(Path(args.scene_spec).read_text()))
    scene, gt = build_scene(args.seed, spec)
    out = Path(args.out)
    (out / DEPTH_DIR).mkdir(parents=True, exist_ok=True)
    w, h = args.width, args.height
    f = args.focal if args.focal else 0.78 * w
    intr = CameraIntrinsics(f, f, w / 2.0, h / 2.0, w, h)
    poses = generate_trajectory(scene, args.frames, args.pattern)
    rng = np.random.default_rng(args.seed)
    for i, pose in enumerate(poses):
        depth = render_depth(scene, pose, intr, noise=args.noise, rng=rng)
        save_depth_png(depth, out / DEPTH_DIR / f"{i:06d}.png")
    save_trajectory(poses, out / TRAJECTORY)
    intr.save(out / INTRINSICS)
    save_gt(gt, out / GT_FILE)
    _write_json(out / SCENE_FILE, scene.to_dict())
    print(f"wrote {len(poses)} frames and ground truth {gt.dims} to {out}")
    return 0


def cmd_fuse(args) -> int:
    depth, traj, intr_path = _sequence_paths(args)
    cfg = _load_config(args)
    intr = _load_intrinsics(intr_path)
    gmap = fuse_frames(iter_sequence(depth, traj), intr, cfg.map, cfg.sensor)
    save_map(gmap, args.out)
    print(f"fused {gmap.frame_counter} frames, {gmap.n_blocks} blocks -> {args.out}")
    return 0


def cmd_run(args) -> int:
    depth, traj, intr_path = _sequence_paths(args)
    cfg = _load_config(args)
    cfg = cfg.updated(backend=args.backend, mode=args.mode,
                      external_command=tuple(args.external) if args.external else None)
    if cfg.backend == "oracle":
        gt = _gt_path(args) or cfg.gt_path
        if gt is None:
            raise UsageError("oracle backend needs --gt, --data or gt_path in the config")
        cfg = cfg.updated(gt_path=str(gt))
    if not Path(intr_path).is_file():
        raise FileNotFoundError(f"intrinsics file not found: {intr_path}")
    result = run_sequence(cfg, depth, traj, intr_path)
    save_map(result.map, args.out)
    if args.ply:
        export_ply(result.map, args.ply)
    if args.stats:
        _write_json(args.stats, result.summary())
    if args.timing:
        _write_json(args.timing, result.timing.to_dict())
    print(result.timing.table())
    return 0


def cmd_eval(args) -> int:
    gt_path = _gt_path(args, required=True)
    gmap = load_map(_existing(args.map, "map"))
    gt = load_gt(gt_path)
    report = evaluate(gmap, gt, args.mode, ignore_carved=args.ignore_carved)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if not args.json:
        print(report.to_json())
    else:
        miou = report.mean_iou
        print(f"{report.mode.value} mean IoU: {'n/a' if miou is None else f'{miou:.4f}'}")
    return 0


def cmd_export_dataset(args) -> int:
    depth, traj, intr_path = _sequence_paths(args)
    cfg = _load_config(args)
    intr = _load_intrinsics(intr_path)
    gt = load_gt(_gt_path(args, required=True))
    frames = list(iter_sequence(depth, traj))
    manifest = export_training_pairs(args.out, gt, frames=frames, intr=intr,
                                     skip=args.skip, config=cfg.map)
    print(f"kept {len(manifest['kept'])} pairs, dropped {manifest['dropped']} -> {args.out}")
    return 0


def cmd_export_ply(args) -> int:
    n = export_ply(load_map(_existing(args.map, "map")), args.out)
    print(f"wrote {n} vertices to {args.out}")
    return 0


def _existing(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _add_sequence(p):
    p.add_argument("--data", help="directory written by 'synth'")
    p.add_argument("--depth", help="directory of 16-bit depth PNGs (mm)")
    p.add_argument("--trajectory", help="trajectory text file")
    p.add_argument("--intrinsics", help="intrinsics JSON")
    p.add_argument("--config", help="JSON overrides of the pipeline configuration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semocc", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene and depth sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--pattern", choices=("orbit", "lawnmower"), default="orbit")
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--focal", type=float, help="focal length in pixels (default 0.78 * width)")
    p.add_argument("--noise", action="store_true", help="add depth-proportional noise")
    p.add_argument("--scene-spec", help="room spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="depth fusion only")
    _add_sequence(p)
    p.add_argument("--out", required=True, help="map snapshot to write")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("run", help="full pipeline")
    _add_sequence(p)
    p.add_argument("--backend", choices=("null", "heuristic", "oracle", "external"))
    p.add_argument("--mode", choices=("sync", "concurrent"))
    p.add_argument("--gt", help="ground-truth volume (oracle backend)")
    p.add_argument("--external", nargs=argparse.REMAINDER,
                   help="command of an external completion process (must come last)")
    p.add_argument("--out", required=True, help="map snapshot to write")
    p.add_argument("--ply", help="also export a PLY point cloud")
    p.add_argument("--stats", help="fusion and CRF statistics JSON")
    p.add_argument("--timing", help="per-stage timing JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="per-class IoU against ground truth")
    p.add_argument("--map", required=True)
    p.add_argument("--gt")
    p.add_argument("--data", help="directory holding gt.bin")
    p.add_argument("--mode", choices=("surface", "full"), default="full")
    p.add_argument("--ignore-carved", action="store_true",
                   help="skip ground-truth occupied voxels the sensor observed as empty")
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--csv", help="write per-class rows as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dataset", help="training pairs from a sequence")
    _add_sequence(p)
    p.add_argument("--gt")
    p.add_argument("--skip", type=int, default=200, help="use every N-th frame")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_dataset)

    p = sub.add_parser("export-ply", help="PLY of the Occupied voxels")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, CompletionError, MapCapacityError) as e:
        print(f"{parser.prog} {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
