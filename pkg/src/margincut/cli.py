"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 pipeline error, 3 partial batch failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .calibration import map_cloud_to_image
from .data import Tissue
from .metrics import dsc_2d, dsc_3d_labels, margin_error
from .pipeline import (ConfigError, ExperimentConfig, StageError, apply_overrides, build_cameras,
                       bundled_configs, calibrate, load_config, read_scene, run_batch,
                       run_pipeline, write_phantom_spec)
from .phantom import generate_phantom, render_depth_cloud, render_label_mask, render_nir_image
from .planner import IncisionPlanner, PlanningError
from .segmentation import label_cloud, segment_nir

EXIT_OK, EXIT_INVALID, EXIT_PIPELINE, EXIT_PARTIAL = 0, 1, 2, 3
log = logging.getLogger("margincut")


def _common(p):
    p.add_argument("--config", type=Path, help="experiment config (INI)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--margin", type=float, help="surgical margin in mm")
    p.add_argument("--speed", type=float, help="tool speed in mm/s")
    p.add_argument("--mask", type=Path, help="external segmentation mask (PGM/PNG, classes 0/1/2)")
    p.add_argument("--log-level", default=os.environ.get("MARGINCUT_LOG_LEVEL", "WARNING"))


def build_parser():
    parser = argparse.ArgumentParser(prog="margincut", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write phantom meshes")
    _common(p)
    p = sub.add_parser("render", help="render depth cloud, NIR image and calibration")
    _common(p)
    p.add_argument("--scene", type=Path, help="directory with kidney.ply/tumor.ply/phantom.ini")
    p = sub.add_parser("segment", help="segment a NIR image")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--threshold", type=float)
    p = sub.add_parser("plan", help="plan an incision path on a labelled cloud")
    _common(p)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--calibration", type=Path,
                   help="frame graph + cameras; with --mask the cloud is relabelled first")
    p.add_argument("--ball-radius", type=float)
    p = sub.add_parser("evaluate", help="score a path, mask or labelled cloud")
    _common(p)
    p.add_argument("--path", type=Path, help="incision path CSV")
    p.add_argument("--incision", type=Path, help="incision points PLY (alternative to --path)")
    p.add_argument("--scene", type=Path, help="directory with tumor.ply (ground truth)")
    p.add_argument("--tool-offset", type=float, default=None)
    p.add_argument("--reference-mask", type=Path)
    p.add_argument("--cloud", type=Path, help="labelled cloud with gt_class column")
    p = sub.add_parser("run", help="run the full pipeline")
    _common(p)
    p = sub.add_parser("batch", help="run several configs and tabulate")
    _common(p)
    p.add_argument("configs", nargs="*", type=Path)
    p.add_argument("--bundled", action="store_true", help="use the four bundled phantom configs")
    return parser


def _config(args):
    overrides = {"seed": args.seed, "out": args.out, "margin": args.margin,
                 "speed": args.speed, "mask": args.mask}
    if args.config is not None:
        return load_config(args.config, overrides)
    return apply_overrides(ExperimentConfig(), overrides)


def _out(args, cfg=None):
    out = Path(args.out or (cfg.output_dir if cfg else os.environ.get("MARGINCUT_OUTPUT_DIR", ".")))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard_files(out, names, overwrite):
    taken = [n for n in names if (out / n).exists()]
    if taken and not overwrite:
        raise ConfigError(f"{out} already holds {', '.join(taken)}; pass --overwrite")


def cmd_generate(args):
    cfg = _config(args).validate()
    out = _out(args, cfg)
    _guard_files(out, ["kidney.ply", "tumor.ply", "phantom.ini"], args.overwrite)
    scene = generate_phantom(cfg.phantom)
    io.write_mesh_ply(out / "kidney.ply", scene.kidney, scene.kidney_classes)
    io.write_mesh_ply(out / "tumor.ply", scene.tumor, scene.tumor_classes)
    write_phantom_spec(out / "phantom.ini", cfg.phantom)
    print(out / "kidney.ply")


def cmd_render(args):
    cfg = _config(args).validate()
    out = _out(args, cfg)
    names = ["cloud_gt.ply", "nir.pgm", "nir.png", "mask_gt.pgm", "calibration.ini"]
    _guard_files(out, names, args.overwrite)
    scene = read_scene(args.scene) if args.scene else generate_phantom(cfg.phantom)
    depth_cam, nir_cam = build_cameras(scene, cfg.rig)
    cloud = render_depth_cloud(scene, depth_cam, depth_noise=cfg.rig.depth_noise, seed=cfg.seed)
    world = cloud.transformed(depth_cam.pose.inverse(), "world")
    io.write_cloud_ply(out / "cloud_gt.ply", world.with_labels(world.gt_labels), "class")
    nir = render_nir_image(scene, nir_cam, cfg.dye, seed=cfg.seed)
    io.write_pgm(out / "nir.pgm", nir, 65535)
    io.write_png16(out / "nir.png", nir)
    io.write_mask(out / "mask_gt.pgm", render_label_mask(scene, nir_cam))
    graph, _ = calibrate(scene, depth_cam, nir_cam, cfg.calibration, cfg.seed)
    io.write_frame_graph(out / "calibration.ini", graph, {"depth": depth_cam, "nir": nir_cam})
    print(out / "cloud_gt.ply")


def cmd_segment(args):
    out = _out(args)
    _guard_files(out, ["mask.pgm"], args.overwrite)
    mask = segment_nir(io.read_image(args.image), args.threshold)
    io.write_mask(out / "mask.pgm", mask)
    print(out / "mask.pgm")


def cmd_plan(args):
    cfg = _config(args).validate()
    out = _out(args, cfg)
    _guard_files(out, ["cloud_labeled.ply", "path.csv", "path.json"], args.overwrite)
    cloud = io.read_cloud_ply(args.cloud)
    if args.mask is not None:
        if args.calibration is None:
            raise ConfigError("--mask needs --calibration to map the cloud into the NIR image")
        graph, cams = io.read_frame_graph(args.calibration)
        proj = map_cloud_to_image(cloud, graph, cams["nir"], "nir")
        cloud = label_cloud(cloud, proj, io.read_mask(args.mask))
    p = cfg.planner
    planner = IncisionPlanner(margin=p.margin, ball_radius=args.ball_radius or p.ball_radius,
                              speed=p.speed, max_step=p.max_step).fit(cloud)
    io.write_cloud_ply(out / "cloud_labeled.ply", planner.cloud_)
    io.write_path_csv(out / "path.csv", planner.path_)
    io.write_path_json(out / "path.json", planner.path_, p.margin, 1 + len(planner.other_loops_),
                       ball_radius_mm=planner.radius_)
    print(f"perimeter {planner.path_.perimeter:.2f} mm, time {planner.path_.total_time:.1f} s")


def cmd_evaluate(args):
    cfg = _config(args)
    out = _out(args, cfg)
    _guard_files(out, ["evaluation.json"], args.overwrite)
    doc = {}
    if args.path or args.incision:
        if args.scene is None:
            raise ConfigError("margin evaluation needs --scene with tumor.ply")
        tumor, tc = io.read_mesh_ply(Path(args.scene) / "tumor.ply")
        kidney, kc = io.read_mesh_ply(Path(args.scene) / "kidney.ply")
        tumor_pts = np.concatenate([tumor.vertices[tc == Tissue.TUMOR], kidney.vertices[kc == Tissue.TUMOR]])
        if args.path:
            pts = io.read_path_csv(args.path).positions
            offset = 0.0 if args.tool_offset is None else args.tool_offset
        else:
            pts = io.read_cloud_ply(args.incision).points
            offset = cfg.planner.tool_offset if args.tool_offset is None else args.tool_offset
        doc["margin_error"] = margin_error(pts, tumor_pts, cfg.planner.margin, offset).to_dict()
    if args.mask and args.reference_mask:
        d2 = dsc_2d(io.read_mask(args.mask), io.read_mask(args.reference_mask))
        doc["dsc_2d"] = {"mean": d2["mean"], "per_class": {str(k): v for k, v in d2["per_class"].items()}}
    if args.cloud:
        c = io.read_cloud_ply(args.cloud)
        if c.gt_labels is None:
            raise ConfigError("--cloud needs a gt_class column")
        labels = np.where(c.labels == Tissue.MARGIN, Tissue.HEALTHY, c.labels)
        d3 = dsc_3d_labels(c.points, labels, c.gt_labels)
        doc["dsc_3d"] = {"mean": d3["mean"], "per_class": {str(k): v for k, v in d3["per_class"].items()}}
    if not doc:
        raise ConfigError("nothing to evaluate; give --path/--incision, --mask/--reference-mask or --cloud")
    io.write_json(out / "evaluation.json", doc)
    print(out / "evaluation.json")


def cmd_run(args):
    cfg = _config(args)
    report = run_pipeline(cfg, overwrite=args.overwrite)
    m = report.metrics
    print(f"dsc_2d {m['dsc_2d']:.4f}  dsc_3d {m['dsc_3d']:.4f}  "
          f"mean |eps| {m['margin_error']['mae']:.3f} mm  "
          f"time {report.planner['estimated_time_s']:.1f} s")


def cmd_batch(args):
    configs = list(args.configs)
    if args.bundled:
        configs += bundled_configs()
    if not configs:
        raise ConfigError("batch needs at least one config (or --bundled)")
    out = Path(args.out or os.environ.get("MARGINCUT_OUTPUT_DIR", "margincut-batch"))
    result = run_batch(configs, out, overwrite=args.overwrite)
    print(result.table_path.read_text(), end="")
    if result.failures:
        for k, v in result.failures.items():
            print(f"FAILED {k}: {v}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "render": cmd_render, "segment": cmd_segment,
            "plan": cmd_plan, "evaluate": cmd_evaluate, "run": cmd_run, "batch": cmd_batch}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (PlanningError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
