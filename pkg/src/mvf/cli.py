"""Command-line entry points.

Exit codes: 0 on success, 2 on usage or input errors, 3 when training hits a
non-finite loss. Every command writes a ``manifest.json`` with its effective
configuration and seed next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from mvf._io import atomic_write_text
from mvf.boxes import read_boxes, write_boxes
from mvf.detector import Detector, DetectorConfig
from mvf.errors import NonFiniteLoss
from mvf.evaluation import EvalConfig, compute_ap_frames
from mvf.head import write_detections
from mvf.network import desk_bev_grid, desk_persp_grid
from mvf.pointcloud import SyntheticSceneSpec, generate_panorama, generate_scene, read_kitti_bin, write_kitti_bin
from mvf.trainer import TrainerConfig, TrainState, train
from mvf.voxelizer import (
    KT_TRADEOFF_CONFIGS,
    GridSpec,
    HardVoxelConfig,
    bev_grid,
    buffer_report,
    dynamic_voxelize,
    hard_voxelize,
    kt_sweep,
    perspective_grid,
    sweep_table,
    toy_cloud,
    toy_grid,
)

log = logging.getLogger("mvf")

GRID_PRESETS = {
    "toy": toy_grid,
    "bev": bev_grid,
    "perspective": perspective_grid,
    "desk-bev": desk_bev_grid,
    "desk-perspective": desk_persp_grid,
}


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _grid(spec: str) -> GridSpec:
    if spec in GRID_PRESETS:
        return GRID_PRESETS[spec]()
    if not os.path.exists(spec):
        raise UsageError(f"unknown grid preset or missing grid file: {spec}")
    with open(spec) as fh:
        return GridSpec.from_dict(json.load(fh))


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def gt_path(cloud_path: str | os.PathLike) -> Path:
    """Ground-truth sidecar of a scan: ``scene.bin`` -> ``scene.gt.txt``."""
    p = Path(cloud_path)
    return p.with_name(p.stem + ".gt.txt")


def _load_scene(path: str):
    gp = gt_path(path)
    if not gp.exists():
        raise UsageError(f"missing ground-truth file {gp} for {path}")
    return read_kitti_bin(path), read_boxes(gp)


def _write_manifest(out: Path, args: argparse.Namespace, effective: dict, inputs: list) -> None:
    manifest = {
        "subcommand": args.command,
        "config": getattr(args, "config", None),
        "inputs": [str(p) for p in inputs],
        "output_dir": str(out),
        "seed": args.seed,
        "effective_config": effective,
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_scene(args) -> None:
    out = _out_dir(args)
    if args.kind == "toy":
        pc, gts = toy_cloud(), []
        effective = {"kind": "toy"}
    elif args.kind == "panorama":
        pc, gts = generate_panorama(args.seed), []
        effective = {"kind": "panorama", "rng_seed": args.seed}
    else:
        spec = SyntheticSceneSpec(object_count=args.objects, rng_seed=args.seed,
                                  background_points=args.background_points)
        pc, gts = generate_scene(spec)
        effective = {"kind": "desk", "object_count": spec.object_count, "rng_seed": spec.rng_seed,
                     "background_points": spec.background_points}
    cloud = out / f"{args.name}.bin"
    write_kitti_bin(cloud, pc)
    write_boxes(gt_path(cloud), gts)
    _write_manifest(out, args, effective, [])
    print(f"wrote {cloud} ({len(pc)} points, {len(gts)} boxes)")


def cmd_voxelize(args) -> None:
    grid = _grid(args.grid)
    pc = read_kitti_bin(args.input)
    if args.mode == "hard":
        if args.K is None or args.T is None:
            raise UsageError("--mode hard needs --K and --T")
        hv = HardVoxelConfig(args.K, args.T, args.seed)
        mapping = hard_voxelize(pc, grid, hv)
    else:
        hv = None
        mapping = dynamic_voxelize(pc, grid)
    report = buffer_report(mapping, hv, args.feature_width)
    out = _out_dir(args)
    atomic_write_text(out / "mapping.txt", mapping.dump())
    atomic_write_text(out / "buffer_report.txt", report.to_text())
    effective = {"mode": args.mode, "grid": grid.to_dict(), "feature_width": args.feature_width,
                 "K": args.K, "T": args.T}
    _write_manifest(out, args, effective, [args.input])
    sys.stdout.write(report.to_text())


def _parse_configs(text: str | None) -> list[tuple[int, int]]:
    if not text:
        return list(KT_TRADEOFF_CONFIGS)
    configs = []
    for item in text.split(","):
        try:
            k, t = item.split(":")
            configs.append((int(k), int(t)))
        except ValueError:
            raise UsageError(f"bad K:T pair {item!r}") from None
    return configs


def cmd_bench_kt(args) -> None:
    if not args.scenes:
        raise UsageError("bench-kt needs at least one scene")
    grid = _grid(args.grid)
    configs = _parse_configs(args.configs)
    clouds = [read_kitti_bin(p) for p in args.scenes]
    rows = kt_sweep(clouds, grid, configs, args.feature_width, args.seed)
    out = _out_dir(args)
    table = sweep_table(rows)
    atomic_write_text(out / "kt_sweep.csv", table)
    _write_manifest(out, args, {"grid": grid.to_dict(), "configs": configs,
                                "feature_width": args.feature_width}, args.scenes)
    sys.stdout.write(table)


def cmd_train(args) -> None:
    if not args.scene:
        raise UsageError("train needs at least one --scene")
    scenes = [_load_scene(p) for p in args.scene]
    file_cfg = _read_json(args.config)
    if args.resume:
        state = TrainState.load(args.resume)
        tcfg = state.cfg
    else:
        dcfg = DetectorConfig.from_dict(file_cfg.get("model", {}))
        tdict = dict(file_cfg.get("trainer", {}))
        if args.seed is not None:
            tdict["rng_seed"] = args.seed
        if args.steps is not None:
            per_epoch = -(-len(scenes) // tdict.get("batch_size", 1))
            tdict["total_epochs"] = args.steps / per_epoch
        if args.checkpoint_every is not None:
            tdict["checkpoint_every"] = args.checkpoint_every
        tcfg = TrainerConfig.from_dict(tdict)
        state = TrainState(Detector(dcfg, tcfg.rng_seed), tcfg)
    args.seed = tcfg.rng_seed
    out = _out_dir(args)
    effective = {"model": state.detector.cfg.to_dict(), "trainer": tcfg.to_dict(), "resume": args.resume}
    _write_manifest(out, args, effective, args.scene)
    atomic_write_text(out / "config.json", json.dumps(
        {"model": effective["model"], "trainer": effective["trainer"]}, indent=1, sort_keys=True) + "\n")
    records = train(state, scenes, max_steps=args.max_steps, out_dir=out)
    if records:
        r = records[-1]
        print(f"step {r.step}: loss_cls={r.loss_cls:.6f} loss_reg={r.loss_reg:.6f} lr={r.lr:.3e}")
    print(f"checkpoint: {out / 'last.mvf'}")


def cmd_detect(args) -> None:
    det, _, _ = Detector.load(args.checkpoint)
    pc = read_kitti_bin(args.input)
    dets = det.detect(pc)
    out = _out_dir(args)
    write_detections(out / "detections.txt", dets)
    _write_manifest(out, args, det.cfg.to_dict(), [args.checkpoint, args.input])
    print(f"{len(dets)} detections")


def cmd_eval(args) -> None:
    if not args.scene:
        raise UsageError("eval needs at least one --scene")
    if (args.checkpoint is None) == (args.detections is None):
        raise UsageError("eval needs exactly one of --checkpoint or --detections")
    scenes = [_load_scene(p) for p in args.scene]
    if args.checkpoint:
        det, _, _ = Detector.load(args.checkpoint)
        all_dets = [det.detect(pc) for pc, _ in scenes]
    else:
        if len(args.detections) != len(scenes):
            raise UsageError("need one --detections file per --scene")
        all_dets = [read_boxes(p, with_score=True) for p in args.detections]
    ecfg_d = _read_json(args.config)
    if "buckets" in ecfg_d:
        # strict JSON has no infinity; null or "inf" marks an open upper edge
        ecfg_d["buckets"] = tuple((float(lo), math.inf if hi is None else float(hi)) for lo, hi in ecfg_d["buckets"])
    ecfg = EvalConfig(**ecfg_d)
    report = compute_ap_frames([(d, g) for d, (_, g) in zip(all_dets, scenes)], ecfg)
    out = _out_dir(args)
    report.write(out / "report.txt", out / "metrics.json")
    effective = {"iou_thresholds": ecfg.iou_thresholds,
                 "buckets": [[lo, None if math.isinf(hi) else hi] for lo, hi in ecfg.buckets],
                 "modes": list(ecfg.modes)}
    inputs = [*args.scene, *(args.detections or []), *([args.checkpoint] if args.checkpoint else [])]
    _write_manifest(out, args, effective, inputs)
    sys.stdout.write(report.to_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvf", description="Multi-view fusion LiDAR detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scene", help="write a synthetic scan and its ground truth")
    g.add_argument("--kind", choices=("desk", "panorama", "toy"), default="desk")
    g.add_argument("--objects", type=int, default=8)
    g.add_argument("--background-points", type=int, default=1500)
    g.add_argument("--name", default="scene")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate_scene)

    v = sub.add_parser("voxelize", help="dump a point-voxel mapping and its buffer report")
    v.add_argument("input")
    v.add_argument("--mode", choices=("dynamic", "hard"), default="dynamic")
    v.add_argument("--grid", default="toy", help=f"preset ({', '.join(GRID_PRESETS)}) or grid JSON file")
    v.add_argument("-K", "--K", "--max-voxels", dest="K", type=int)
    v.add_argument("-T", "--T", "--max-points", dest="T", type=int)
    v.add_argument("--feature-width", type=int, default=1)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_voxelize)

    b = sub.add_parser("bench-kt", help="coverage of hard voxelization over (K, T) settings")
    b.add_argument("scenes", nargs="*")
    b.add_argument("--configs", help="comma-separated K:T pairs (default: the four tradeoff settings)")
    b.add_argument("--grid", default="bev")
    b.add_argument("--feature-width", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_bench_kt)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--scene", action="append", default=[], help="scan .bin with a .gt.txt sidecar; repeatable")
    t.add_argument("--config", help="JSON with optional 'model' and 'trainer' sections")
    t.add_argument("--steps", type=int, help="schedule length in steps (overrides total_epochs)")
    t.add_argument("--max-steps", type=int, help="stop after this many steps of this invocation")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="average precision report")
    e.add_argument("--scene", action="append", default=[])
    e.add_argument("--checkpoint")
    e.add_argument("--detections", action="append", help="scored box file per scene, in --scene order")
    e.add_argument("--config", help="evaluation JSON (iou_thresholds, buckets, modes)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="run a checkpoint on one scan")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_detect)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return 3
    except (UsageError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
