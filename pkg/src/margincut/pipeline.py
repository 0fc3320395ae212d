"""End-to-end runs: config parsing, stage orchestration, reports and batches."""
import configparser
import copy
import logging
import os
import time
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import numpy as np

from . import io
from .calibration import (CameraModel, FrameGraph, calibrate_cameras, checkerboard_corners, look_at,
                          map_cloud_to_image)
from .data import Tissue
from .geometry import RigidTransform
from .metrics import dsc_2d, dsc_3d_labels, hausdorff, margin_error
from .phantom import DyeModel, PhantomSpec, generate_phantom, render_depth_cloud, \
    render_label_mask, render_nir_image
from .planner import IncisionPlanner
from .segmentation import label_cloud, segment_nir

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"
OUTPUT_FILES = ("kidney.ply", "tumor.ply", "phantom.ini", "cloud_gt.ply", "nir.pgm", "nir.png",
                "mask_gt.pgm", "calibration.ini", "mask.pgm", "cloud_labeled.ply",
                "path.csv", "path.json", "report.json")


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 1)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit code 2)."""

    def __init__(self, stage, cause, hint=""):
        self.stage = stage
        self.cause = cause
        self.hint = hint
        msg = f"stage '{stage}' failed: {cause}"
        if hint:
            msg += f" (hint: {hint})"
        super().__init__(msg)


HINTS = {
    "render": "check camera standoff/obliquity so the phantom is in view",
    "calibrate": "checkerboard corners must not be collinear",
    "segment": "set [segmentation] healthy_threshold or supply --mask",
    "label": "calibration must connect the depth and nir frames",
    "plan": "try a different camera obliquity, margin or [planner] ball_radius",
    "evaluate": "",
}


@dataclass
class CameraRig:
    """Depth camera aimed at the tumor; the NIR camera sits ``baseline`` mm to its side."""

    vfov_deg: float = 60.0
    width: int = 960
    height: int = 720
    standoff: float = 400.0
    obliquity_deg: float = 0.0
    azimuth_deg: float = 0.0
    depth_noise: float = 0.0
    nir_vfov_deg: float = 60.0
    nir_width: int = 1024
    nir_height: int = 540
    baseline: float = 40.0


@dataclass
class CalibrationSettings:
    board_rows: int = 7
    board_cols: int = 10
    square: float = 10.0
    corner_noise: float = 0.0
    rotation_error_deg: float = 0.0
    translation_error_mm: float = 0.0
    error_seed: int = None


@dataclass
class PlannerSettings:
    margin: float = 5.0
    speed: float = 2.0
    tool_offset: float = 0.5
    max_step: float = 1.0
    ball_radius: float = None


@dataclass
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    rig: CameraRig = field(default_factory=CameraRig)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    dye: DyeModel = field(default_factory=DyeModel)
    planner: PlannerSettings = field(default_factory=PlannerSettings)
    healthy_threshold: float = None
    mask_path: str = None
    output_dir: str = "margincut-run"
    seed: int = 0
    name: str = "run"

    def validate(self):
        p = self.planner
        if not p.margin > 0:
            raise ConfigError(f"margin must be positive, got {p.margin}")
        if not p.speed > 0:
            raise ConfigError(f"tool speed must be positive, got {p.speed}")
        if p.tool_offset < 0:
            raise ConfigError("tool offset must be non-negative")
        if not p.max_step > 0:
            raise ConfigError("max step must be positive")
        if p.ball_radius is not None and not p.ball_radius > 0:
            raise ConfigError("ball radius must be positive")
        r = self.rig
        if not (r.standoff > 0 and 0 < r.vfov_deg < 180 and 0 < r.nir_vfov_deg < 180):
            raise ConfigError("camera standoff and field of view must be positive")
        if min(r.width, r.height, r.nir_width, r.nir_height) <= 0:
            raise ConfigError("image sizes must be positive")
        if r.depth_noise < 0 or self.calibration.corner_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.mask_path is not None and not Path(self.mask_path).is_file():
            raise ConfigError(f"external mask {self.mask_path} does not exist")
        return self

    def to_dict(self):
        d = asdict(self)
        d["phantom"] = self.phantom.to_dict()
        return d


def _num(v):
    if v is None:
        return None
    text = str(v).strip()
    if text.lower() in ("", "auto", "none"):
        return None
    return float(text)


def _fill(obj, section, cast=None):
    """Set dataclass fields of ``obj`` from a config section."""
    kwargs = {}
    for f in fields(obj):
        if f.name in section:
            raw = section[f.name]
            cur = getattr(obj, f.name)
            if isinstance(cur, bool):
                kwargs[f.name] = section.getboolean(f.name)
            elif isinstance(cur, int) and not isinstance(cur, bool):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = _num(raw)
    return kwargs


def load_config(path, overrides=None):
    """Read an INI experiment config; unknown keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if not cp.read(path):
            raise ConfigError(f"config file {path} not found")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_parser(cp, Path(path).parent, overrides)


def config_from_parser(cp, base_dir=Path("."), overrides=None):
    known = {"experiment", "phantom", "camera", "calibration", "dye", "segmentation", "planner"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = ExperimentConfig()
    allowed = {
        "experiment": {"seed", "output_dir", "name"},
        "phantom": {"tumor_polar_deg", "tumor_azimuth_deg", "tumor_radius", "tumor_diameter",
                    "protrusion", "dye_concentration", "density", "semi_axes"},
        "camera": {f.name for f in fields(CameraRig)},
        "calibration": {f.name for f in fields(CalibrationSettings)},
        "dye": {f.name for f in fields(DyeModel)},
        "segmentation": {"healthy_threshold", "mask"},
        "planner": {f.name for f in fields(PlannerSettings)},
    }
    for name in cp.sections():
        extra = set(cp[name]) - allowed[name]
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    try:
        if "experiment" in cp:
            ex = cp["experiment"]
            cfg.seed = ex.getint("seed", cfg.seed)
            cfg.output_dir = ex.get("output_dir", cfg.output_dir)
            cfg.name = ex.get("name", cfg.name)
        if "phantom" in cp:
            sec = cp["phantom"]
            kw = {}
            for key in ("tumor_polar_deg", "tumor_azimuth_deg", "tumor_radius", "protrusion",
                        "dye_concentration", "density"):
                if key in sec:
                    kw[key] = float(sec[key])
            if "tumor_diameter" in sec:
                kw["tumor_radius"] = float(sec["tumor_diameter"]) / 2.0
            if "semi_axes" in sec:
                kw["semi_axes"] = tuple(io.parse_vector(sec["semi_axes"], 3))
            kw["seed"] = cfg.seed
            cfg.phantom = PhantomSpec(**kw)
        else:
            cfg.phantom = PhantomSpec(seed=cfg.seed)
        if "camera" in cp:
            cfg.rig = CameraRig(**{**asdict(cfg.rig), **_fill(cfg.rig, cp["camera"])})
        if "calibration" in cp:
            sec = cp["calibration"]
            kw = _fill(cfg.calibration, sec)
            if "error_seed" in sec:
                kw["error_seed"] = int(sec["error_seed"])
            cfg.calibration = CalibrationSettings(**{**asdict(cfg.calibration), **kw})
        if "dye" in cp:
            base = asdict(cfg.dye)
            for k in base:
                if k in cp["dye"]:
                    base[k] = float(cp["dye"][k])
            cfg.dye = DyeModel(**base)
        if "segmentation" in cp:
            sec = cp["segmentation"]
            cfg.healthy_threshold = _num(sec.get("healthy_threshold"))
            mask = sec.get("mask", "").strip()
            if mask:
                cfg.mask_path = str((base_dir / mask) if not Path(mask).is_absolute() else mask)
        if "planner" in cp:
            cfg.planner = PlannerSettings(**{**asdict(cfg.planner), **_fill(cfg.planner, cp["planner"])})
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg, overrides=None):
    """CLI / environment overrides: seed, out, margin, speed, mask."""
    o = dict(overrides or {})
    env_out = os.environ.get("MARGINCUT_OUTPUT_DIR")
    if env_out and o.get("out") is None:
        o["out"] = env_out
    cfg = copy.deepcopy(cfg)
    try:
        if o.get("seed") is not None:
            cfg.seed = int(o["seed"])
            cfg.phantom = PhantomSpec(**{**cfg.phantom.to_dict(), "semi_axes": cfg.phantom.semi_axes,
                                         "seed": cfg.seed})
        if o.get("out") is not None:
            cfg.output_dir = str(o["out"])
        if o.get("margin") is not None:
            cfg.planner.margin = float(o["margin"])
        if o.get("speed") is not None:
            cfg.planner.speed = float(o["speed"])
        if o.get("mask") is not None:
            cfg.mask_path = str(o["mask"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def bundled_configs():
    return sorted(CONFIG_DIR.glob("phantom*.ini"))


# -- scene set-up -----------------------------------------------------------------

def build_cameras(scene, rig):
    """Depth and NIR cameras looking at the tumor along (a tilted) surface normal."""
    n = scene.anchor_normal
    target = scene.anchor
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(n, ref)
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    az = np.radians(rig.azimuth_deg)
    tilt_dir = np.cos(az) * u + np.sin(az) * w
    ob = np.radians(rig.obliquity_deg)
    view = np.cos(ob) * n + np.sin(ob) * tilt_dir
    eye = target + rig.standoff * view
    up = w if abs(np.dot(w, view)) < 0.99 else u
    depth = CameraModel.from_fov(rig.vfov_deg, rig.width, rig.height, look_at(eye, target, up))
    side = depth.pose.rotation[0]  # depth camera x-axis in world
    nir_eye = eye + rig.baseline * side
    nir = CameraModel.from_fov(rig.nir_vfov_deg, rig.nir_width, rig.nir_height,
                               look_at(nir_eye, target, up))
    return depth, nir


def perturbation(rotation_deg, translation_mm, seed):
    """Rigid error of the given magnitudes in seeded random directions."""
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return RigidTransform.from_axis_angle(axis, np.radians(rotation_deg), translation_mm * direction)


def calibrate(scene, depth_cam, nir_cam, settings, seed):
    board_pose = RigidTransform.from_translation(scene.anchor)
    board = checkerboard_corners(settings.board_rows, settings.board_cols, settings.square, board_pose)
    graph, rms = calibrate_cameras({"depth": depth_cam, "nir": nir_cam}, board,
                                   settings.corner_noise, rng=seed)
    if settings.rotation_error_deg or settings.translation_error_mm:
        err_seed = settings.error_seed if settings.error_seed is not None else seed
        delta = perturbation(settings.rotation_error_deg, settings.translation_error_mm, err_seed)
        edges = graph.edges
        graph = FrameGraph()
        for a, b, T in edges:
            graph.add_edge(a, b, delta @ T if a == "nir" else T)
    return graph, rms


# -- reports ----------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    metrics: dict
    planner: dict
    files: dict
    timings: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def stable_dict(self):
        """Report contents without wall-clock timings."""
        d = self.to_dict()
        d.pop("timings")
        return d


def _check_outputs(out, overwrite):
    existing = [f for f in OUTPUT_FILES if (out / f).exists()]
    if existing and not overwrite:
        raise ConfigError(
            f"{out} already holds {', '.join(existing)}; pass --overwrite to replace them"
        )


def run_pipeline(cfg, overwrite=False):
    """Generate, render, calibrate, segment, label, plan and evaluate one phantom."""
    cfg.validate()
    out = Path(cfg.output_dir)
    _check_outputs(out, overwrite)
    out.mkdir(parents=True, exist_ok=True)
    timings, files = {}, {}
    state = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            result = fn()
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(name, exc, HINTS.get(name, "")) from exc
        timings[name] = time.perf_counter() - t0
        return result

    def save(key, fname, writer, *args, **kw):
        writer(out / fname, *args, **kw)
        files[key] = fname

    def generate():
        scene = generate_phantom(cfg.phantom)
        save("kidney", "kidney.ply", io.write_mesh_ply, scene.kidney, scene.kidney_classes)
        save("tumor", "tumor.ply", io.write_mesh_ply, scene.tumor, scene.tumor_classes)
        save("phantom", "phantom.ini", write_phantom_spec, cfg.phantom)
        return scene

    scene = stage("generate", generate)

    def render():
        depth_cam, nir_cam = build_cameras(scene, cfg.rig)
        cloud = render_depth_cloud(scene, depth_cam, depth_noise=cfg.rig.depth_noise, seed=cfg.seed)
        nir = render_nir_image(scene, nir_cam, cfg.dye, seed=cfg.seed)
        gt_mask = render_label_mask(scene, nir_cam)
        world_cloud_gt = cloud.transformed(depth_cam.pose.inverse(), "world")
        save("cloud_gt", "cloud_gt.ply", io.write_cloud_ply,
             world_cloud_gt.with_labels(world_cloud_gt.gt_labels), "class")
        save("nir_pgm", "nir.pgm", io.write_pgm, nir, 65535)
        save("nir_png", "nir.png", io.write_png16, nir)
        save("mask_gt", "mask_gt.pgm", io.write_mask, gt_mask)
        return depth_cam, nir_cam, cloud, nir, gt_mask

    depth_cam, nir_cam, cloud, nir, gt_mask = stage("render", render)

    def calib():
        graph, rms = calibrate(scene, depth_cam, nir_cam, cfg.calibration, cfg.seed)
        save("calibration", "calibration.ini", io.write_frame_graph, graph,
             {"depth": depth_cam, "nir": nir_cam})
        state["rms"] = rms
        return graph

    graph = stage("calibrate", calib)

    def segment():
        if cfg.mask_path:
            mask = io.read_mask(cfg.mask_path)
            if (mask.height, mask.width) != (nir.height, nir.width):
                raise ValueError(f"external mask is {mask.width}x{mask.height}, "
                                 f"NIR image is {nir.width}x{nir.height}")
        else:
            mask = segment_nir(nir, cfg.healthy_threshold)
        save("mask", "mask.pgm", io.write_mask, mask)
        return mask

    mask = stage("segment", segment)

    def label():
        proj = map_cloud_to_image(cloud, graph, nir_cam, "nir")
        labelled = label_cloud(cloud, proj, mask)
        world = labelled.transformed(graph.transform("world", "depth"), "world")
        return world

    world = stage("label", label)

    def plan():
        p = cfg.planner
        planner = IncisionPlanner(margin=p.margin, ball_radius=p.ball_radius, speed=p.speed,
                                  max_step=p.max_step).fit(world)
        save("cloud_labeled", "cloud_labeled.ply", io.write_cloud_ply, planner.cloud_)
        save("path_csv", "path.csv", io.write_path_csv, planner.path_)
        save("path_json", "path.json", io.write_path_json, planner.path_, p.margin,
             1 + len(planner.other_loops_), ball_radius_mm=planner.radius_)
        return planner

    planner = stage("plan", plan)

    def evaluate():
        p = cfg.planner
        # the planned path is the tool centreline, so no electrode offset applies
        err = margin_error(planner.path_.positions, scene.tumor_points, p.margin, tool_offset=0.0)
        d2 = dsc_2d(mask, gt_mask)
        d3 = dsc_3d_labels(world.points, world.labels, world.gt_labels)
        pred_t = world.points[world.labels == Tissue.TUMOR]
        gt_t = world.points[world.gt_labels == Tissue.TUMOR]
        hd = hausdorff(pred_t, gt_t) if len(pred_t) and len(gt_t) else float("nan")
        return {
            "hausdorff_tumor_mm": hd,
            "dsc_2d": d2["mean"],
            "dsc_2d_per_class": {str(k): v for k, v in d2["per_class"].items()},
            "dsc_3d": d3["mean"],
            "dsc_3d_per_class": {str(k): v for k, v in d3["per_class"].items()},
            "margin_error": err.to_dict(),
        }

    metrics = stage("evaluate", evaluate)
    report = RunReport(
        config=cfg.to_dict(),
        metrics=metrics,
        planner={
            "loop_count": 1 + len(planner.other_loops_),
            "other_loop_sizes": [len(o) for o in planner.other_loops_],
            "perimeter_mm": planner.path_.perimeter,
            "estimated_time_s": planner.path_.total_time,
            "ball_radius_mm": planner.radius_,
            "n_margin_points": int(len(planner.margin_set_.indices)),
            "n_cloud_points": len(world),
            "n_poses": len(planner.path_),
        },
        files=dict(sorted(files.items())),
        timings=timings,
        calibration={"rms_mm": state["rms"]},
    )
    files["report"] = "report.json"
    report.files = dict(sorted(files.items()))
    io.write_json(out / "report.json", report.to_dict())
    return report


def write_phantom_spec(path, spec):
    cp = configparser.ConfigParser(interpolation=None)
    d = spec.to_dict()
    cp["phantom"] = {k: (io.format_vector(v) if k == "semi_axes" else repr(v)) for k, v in d.items()}
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        cp.write(fh)


def read_phantom_spec(path):
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path):
        raise FileNotFoundError(path)
    sec = cp["phantom"]
    kw = {k: float(v) for k, v in sec.items() if k not in ("semi_axes", "seed")}
    return PhantomSpec(semi_axes=tuple(io.parse_vector(sec["semi_axes"], 3)),
                       seed=int(sec.get("seed", 0)), **kw)


def read_scene(directory):
    """Rebuild a Scene from ``kidney.ply``, ``tumor.ply`` and ``phantom.ini``."""
    from .phantom import Scene, ellipsoid_point

    d = Path(directory)
    kidney, kc = io.read_mesh_ply(d / "kidney.ply")
    tumor, tc = io.read_mesh_ply(d / "tumor.ply")
    spec = read_phantom_spec(d / "phantom.ini")
    anchor, normal = ellipsoid_point(spec.semi_axes, spec.tumor_polar_deg, spec.tumor_azimuth_deg)
    center = anchor - normal * spec.tumor_radius * (1 - spec.protrusion)
    return Scene(kidney, tumor, kc, tc, center, spec.tumor_radius, anchor, normal, spec)


# -- batches ----------------------------------------------------------------------

TABLE_HEADER = ("run_id", "hausdorff_mm", "dsc_2d", "dsc_3d", "mean_abs_error_mm", "time_estimate_s")


@dataclass
class BatchResult:
    reports: dict
    failures: dict
    table_path: Path = None
    errors_path: Path = None

    @property
    def ok(self):
        return not self.failures


def run_batch(configs, out_dir, overwrite=False):
    """Run each config into ``out_dir/<run id>``; failures are recorded, not raised."""
    if not configs:
        raise ConfigError("batch needs at least one config")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports, failures = {}, {}
    for k, item in enumerate(configs):
        run_id = f"run{k + 1}"
        try:
            if isinstance(item, ExperimentConfig):
                cfg = copy.deepcopy(item)
            else:
                cfg = load_config(item)
                run_id = Path(item).stem
            cfg.output_dir = str(out / run_id)
            reports[run_id] = run_pipeline(cfg, overwrite=overwrite)
        except (ConfigError, StageError, ValueError) as exc:
            log.error("run %s failed: %s", run_id, exc)
            failures[run_id] = str(exc)
    rows, eps_rows = [], []
    for run_id, rep in reports.items():
        m = rep.metrics
        rows.append((run_id, m["hausdorff_tumor_mm"], m["dsc_2d"], m["dsc_3d"],
                     m["margin_error"]["mae"], rep.planner["estimated_time_s"]))
    table = out / "summary.csv"
    io.write_rows_csv(table, TABLE_HEADER, rows)
    for run_id, rep in reports.items():
        run_out = out / run_id
        path = io.read_path_csv(run_out / "path.csv")
        for (x, y, z), e in zip(path.positions.tolist(), rep.metrics["margin_error"]["errors"]):
            eps_rows.append((run_id, float(x), float(y), float(z), float(e)))
    errors = out / "margin_errors.csv"
    io.write_rows_csv(errors, ("run_id", "x", "y", "z", "error_mm"), eps_rows)
    if failures:
        io.write_json(out / "failures.json", failures)
    return BatchResult(reports, failures, table, errors)
