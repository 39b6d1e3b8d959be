"""Project configuration and the end-to-end refinement pipeline.

A project is described by one YAML file::

    paths:
      mesh: fused.ply            # or leave out and give preprocess.depth_map
      views: views.txt
      albedo: null               # optional precomputed albedo file
      output: out/
    light:
      gamma: 0.8                 # required unless calibration.sphere is given
      ambient: 0.0
      brightness_c: 1.0
      light_offset: null         # overrides every view's light offset
    calibration:
      sphere: null               # mesh of a white sphere seen in calibration.views
      views: null
      albedo: null
    albedo:
      mode: global               # or grouped
      variance_target: 0.95
      lambda_pairwise: null
    refinement:
      lambda1: 1.0
      lambda2: 0.1
      iterations: 10
    preprocess:
      target_vertex_count: null  # remesh when set
      depth_map: null            # single-view path: depth map of the first view
      mm_per_unit: 1.0
      spatial_sigma: 2.0
      range_sigma: 0.05
      depth_sigma: 30.0
    eval:
      leave_one_out: false
      truth: null                # ground-truth mesh for distance reporting
      icp: true
    seed: 0
    deterministic: true

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ._validation import check_choice, check_scalar
from .albedo import AlbedoEstimator
from .calibration import build_sphere_samples, fit_gamma_ransac
from .camera import View
from .depth import depth_map_to_mesh, joint_bilateral_depth_filter
from .evaluate import align_icp, leave_one_out_eval, mesh_distance
from .io import (iteration_rows, load_albedo, load_views, read_depth, read_mesh, save_albedo,
                 write_csv, write_mesh)
from .refine import RefinementConfig, refine
from .remesh import isotropic_remesh
from .shading import LightModel, linearize

log = logging.getLogger(__name__)

DEFAULTS = {
    "paths": {"mesh": None, "views": None, "albedo": None, "output": "output"},
    "light": {"gamma": None, "ambient": 0.0, "brightness_c": 1.0, "light_offset": None},
    "calibration": {"sphere": None, "views": None, "albedo": None, "n_samples": 1000,
                    "n_iterations": 1000, "inlier_threshold": 0.05},
    "albedo": {"mode": "global", "variance_target": 0.95, "lambda_pairwise": None, "low": 0.02,
               "high": 0.98},
    "refinement": {"lambda1": 1.0, "lambda2": 0.1, "iterations": 10, "convergence_tol": None,
                   "displacement_cap": None, "nl_floor": 0.05},
    "preprocess": {"target_vertex_count": None, "remesh_iterations": 10, "depth_map": None,
                   "mm_per_unit": 1.0, "spatial_sigma": 2.0, "range_sigma": 0.05,
                   "depth_sigma": 30.0, "depth_threshold": 50.0},
    "eval": {"leave_one_out": False, "truth": None, "icp": True},
    "seed": 0,
    "deterministic": True,
}

_PATH_KEYS = [("paths", "mesh"), ("paths", "views"), ("paths", "albedo"), ("calibration", "sphere"),
              ("calibration", "views"), ("preprocess", "depth_map"), ("eval", "truth")]


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    """Failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


def _merge(base, over, where=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class ProjectConfig:
    """Validated project settings (see the module docstring for the layout)."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.data = _merge(DEFAULTS, self.data)
        self.base_dir = Path(self.base_dir)
        self.validate()

    @classmethod
    def load(cls, path, overrides=None):
        """Read a YAML config; ``overrides`` (nested dict) win over the file."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = _merge(DEFAULTS, raw)
        if overrides:
            data = _merge(data, overrides)
        return cls(data, path.parent)

    def __getitem__(self, key):
        return self.data[key]

    def path(self, section, key):
        v = self.data[section][key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self):
        return self.path("paths", "output")

    def validate(self):
        try:
            return self._validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def _validate(self):
        d = self.data
        for section, key in _PATH_KEYS:
            p = self.path(section, key)
            if p is not None and not p.exists():
                raise ConfigError(f"{section}.{key}: path not found: {p}")
        if self.path("paths", "views") is None:
            raise ConfigError("paths.views is required")
        if self.path("paths", "mesh") is None and self.path("preprocess", "depth_map") is None:
            raise ConfigError("either paths.mesh or preprocess.depth_map is required")
        lt = d["light"]
        check_scalar(lt["gamma"], "light.gamma", 0, 3, low_inclusive=False, allow_none=True)
        check_scalar(lt["ambient"], "light.ambient", 0)
        check_scalar(lt["brightness_c"], "light.brightness_c", 0, low_inclusive=False)
        if lt["light_offset"] is not None and np.shape(lt["light_offset"]) != (3,):
            raise ConfigError("light.light_offset must have 3 entries")
        cal = d["calibration"]
        check_scalar(cal["n_samples"], "calibration.n_samples", 1, integer=True)
        check_scalar(cal["n_iterations"], "calibration.n_iterations", 1, integer=True)
        check_scalar(cal["inlier_threshold"], "calibration.inlier_threshold", 0, low_inclusive=False)
        al = d["albedo"]
        check_choice(al["mode"], "albedo.mode", ("global", "grouped"))
        check_scalar(al["variance_target"], "albedo.variance_target", 0, 1, low_inclusive=False)
        check_scalar(al["lambda_pairwise"], "albedo.lambda_pairwise", 0, allow_none=True)
        check_scalar(al["low"], "albedo.low", 0, 1)
        check_scalar(al["high"], "albedo.high", 0, 1)
        rf = d["refinement"]
        check_scalar(rf["lambda1"], "refinement.lambda1", 0)
        check_scalar(rf["lambda2"], "refinement.lambda2", 0)
        check_scalar(rf["iterations"], "refinement.iterations", 1, integer=True)
        check_scalar(rf["convergence_tol"], "refinement.convergence_tol", 0, allow_none=True)
        check_scalar(rf["displacement_cap"], "refinement.displacement_cap", 0, low_inclusive=False,
                     allow_none=True)
        check_scalar(rf["nl_floor"], "refinement.nl_floor", 0, 1)
        pp = d["preprocess"]
        check_scalar(pp["target_vertex_count"], "preprocess.target_vertex_count", 4, integer=True,
                     allow_none=True)
        check_scalar(pp["remesh_iterations"], "preprocess.remesh_iterations", 1, integer=True)
        for k in ("mm_per_unit", "spatial_sigma", "range_sigma", "depth_sigma", "depth_threshold"):
            check_scalar(pp[k], f"preprocess.{k}", 0, low_inclusive=False)
        check_scalar(d["seed"], "seed", 0, integer=True)
        return self

    def refinement_config(self):
        rf = self.data["refinement"]
        return RefinementConfig(lambda1=rf["lambda1"], lambda2=rf["lambda2"],
                                outer_iterations=rf["iterations"],
                                convergence_tol=rf["convergence_tol"],
                                displacement_cap=rf["displacement_cap"], nl_floor=rf["nl_floor"])

    def to_yaml(self):
        return yaml.safe_dump(self.data, sort_keys=True)


@dataclass
class PipelineResult:
    mesh: object
    reports: list
    distance: tuple | None
    manifest: Path
    gamma: float


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Manifest:
    def __init__(self, out):
        self.out = out
        self.entries = []
        self.path = out / "manifest.json"

    def add(self, stage, path):
        path = Path(path)
        self.entries.append({"stage": stage, "path": path.name, "sha256": _sha256(path),
                             "bytes": path.stat().st_size})
        self.flush()

    def flush(self, status="running", error=None):
        doc = {"status": status, "artifacts": self.entries}
        if error:
            doc["error"] = error
        self.path.write_text(json.dumps(doc, indent=2))


def resolve_seed(config):
    """The configured seed, or a time-based one when determinism is off."""
    if config["deterministic"]:
        return int(config["seed"])
    return int(time.time_ns() % (2 ** 31))


def run_pipeline(config):
    """Preprocess, linearise, estimate albedo, refine and optionally evaluate.

    Every artifact is written to the output directory and listed with its
    SHA-256 in ``manifest.json``. A failing stage raises
    :class:`PipelineError`; artifacts of earlier stages stay on disk.
    """
    if not isinstance(config, ProjectConfig):
        config = ProjectConfig.load(config)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(out)
    (out / "config.yaml").write_text(config.to_yaml())
    manifest.add("config", out / "config.yaml")
    seed = resolve_seed(config)
    stage = "load"
    try:
        lt = config["light"]
        views = load_views(config.path("paths", "views"))
        if lt["light_offset"] is not None:
            views = [View(v.intrinsics, v.pose, np.asarray(lt["light_offset"], float), v.image, v.name)
                     for v in views]

        stage = "calibrate"
        gamma = lt["gamma"]
        if gamma is None:
            sphere = config.path("calibration", "sphere")
            if sphere is None:
                raise ConfigError("gamma is not specified and no calibration sphere is configured; "
                                  "run `irshade calibrate gamma` first or set light.gamma")
            cal = config["calibration"]
            cal_views = load_views(config.path("calibration", "views") or config.path("paths", "views"))
            samples = build_sphere_samples(read_mesh(sphere), cal_views,
                                           LightModel(lt["brightness_c"], lt["ambient"]),
                                           cal["albedo"] if cal["albedo"] is not None else 1.0)
            fit = fit_gamma_ransac(samples, min(cal["n_samples"], len(samples)), cal["n_iterations"],
                                   cal["inlier_threshold"], seed)
            gamma = fit.gamma
            (out / "gamma.json").write_text(json.dumps({"gamma": gamma,
                                                        "inlier_ratio": fit.inlier_ratio}))
            manifest.add(stage, out / "gamma.json")
        light = LightModel(lt["brightness_c"], lt["ambient"], 1.0)

        stage = "linearize"
        lin_views = []
        for v in views:
            img = linearize(v.image, gamma) if v.image.gamma_applied else v.image
            lin_views.append(v.with_image(img))

        stage = "preprocess"
        pp = config["preprocess"]
        mesh_path = config.path("paths", "mesh")
        if mesh_path is not None:
            mesh = read_mesh(mesh_path)
        else:
            depth = read_depth(config.path("preprocess", "depth_map"), pp["mm_per_unit"])
            depth = joint_bilateral_depth_filter(depth, lin_views[0].image, pp["spatial_sigma"],
                                                 pp["range_sigma"], pp["depth_sigma"])
            cam = depth_map_to_mesh(depth, lin_views[0].intrinsics, pp["depth_threshold"])
            mesh = cam.with_vertices(lin_views[0].pose.to_world(cam.vertices))
        if pp["target_vertex_count"] is not None:
            mesh = isotropic_remesh(mesh, pp["target_vertex_count"], pp["remesh_iterations"])
        write_mesh(out / "preprocessed.ply", mesh)
        manifest.add(stage, out / "preprocessed.ply")

        stage = "albedo"
        albedo_path = config.path("paths", "albedo")
        if albedo_path is not None:
            albedo = load_albedo(albedo_path)
        else:
            al = config["albedo"]
            est = AlbedoEstimator(al["mode"], al["variance_target"],
                                  lambda_pairwise=al["lambda_pairwise"], low=al["low"],
                                  high=al["high"], seed=seed)
            albedo = est.fit(mesh, lin_views, light).model_
        save_albedo(out / "albedo.txt", albedo)
        manifest.add(stage, out / "albedo.txt")

        stage = "refine"
        result = refine(mesh, lin_views, albedo, light, config.refinement_config())
        write_mesh(out / "refined.ply", result.mesh)
        manifest.add(stage, out / "refined.ply")
        write_csv(out / "diagnostics.csv", iteration_rows(result.history))
        manifest.add(stage, out / "diagnostics.csv")

        stage = "eval"
        reports = []
        distance = None
        ev = config["eval"]
        if ev["leave_one_out"]:
            from types import SimpleNamespace
            scene = SimpleNamespace(degraded=mesh, views=lin_views, albedo=albedo, light=light)
            reports = leave_one_out_eval(scene, config.refinement_config())
            write_csv(out / "loo.csv", [r.as_row() for r in reports])
            manifest.add(stage, out / "loo.csv")
        truth_path = config.path("eval", "truth")
        if truth_path is not None:
            truth = read_mesh(truth_path)
            refined = result.mesh
            T = np.eye(4)
            if ev["icp"]:
                al_ = align_icp(refined, truth)
                refined = refined.with_vertices(al_.apply(refined.vertices))
                T = al_.matrix
            distance = mesh_distance(refined, truth)
            (out / "distance.json").write_text(json.dumps({"mean": distance[0], "max": distance[1],
                                                           "transform": T.tolist()}))
            manifest.add(stage, out / "distance.json")
    except Exception as exc:
        manifest.flush("failed", f"[{stage}] {exc}")
        if isinstance(exc, PipelineError):
            raise
        raise PipelineError(stage, str(exc)) from exc
    manifest.flush("complete")
    return PipelineResult(result.mesh, reports, distance, manifest.path, float(gamma))
