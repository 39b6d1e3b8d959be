"""Mesh refinement from active infrared shading."""

from .albedo import AlbedoEstimator, AlbedoModel
from .calibration import (FalloffRegressor, GammaCalibrator, build_sphere_samples,
                          fit_falloff_exponent, fit_gamma_ransac)
from .camera import (CameraIntrinsics, CameraPose, View, compute_visibility, project_points,
                     rasterize)
from .depth import DepthMap, depth_map_to_mesh, joint_bilateral_depth_filter
from .evaluate import (align_icp, gradient_rmse, image_rmse, leave_one_out_eval,
                       mesh_distance)
from .io import load_albedo, load_views, read_image, read_mesh, save_albedo, save_views, write_image, write_mesh
from .mesh import TriangleMesh, compute_vertex_normals, grid_mesh, icosphere
from .pipeline import ProjectConfig, run_pipeline
from .refine import MeshRefiner, RefinementConfig, refine
from .remesh import isotropic_remesh
from .shading import LightModel, ShadingImage, linearize, predict_intensity, render_shading_image
from .synth import generate_scene

__version__ = "0.1.0"

__all__ = [
    "AlbedoEstimator", "AlbedoModel", "CameraIntrinsics", "CameraPose", "DepthMap",
    "FalloffRegressor", "GammaCalibrator", "LightModel", "MeshRefiner", "ProjectConfig",
    "RefinementConfig", "ShadingImage", "TriangleMesh", "View", "align_icp",
    "build_sphere_samples", "compute_vertex_normals", "compute_visibility", "depth_map_to_mesh",
    "fit_falloff_exponent", "fit_gamma_ransac", "generate_scene", "gradient_rmse", "grid_mesh",
    "icosphere", "image_rmse", "isotropic_remesh", "joint_bilateral_depth_filter",
    "leave_one_out_eval", "linearize", "load_albedo", "load_views", "mesh_distance",
    "predict_intensity", "project_points", "rasterize", "read_image", "read_mesh", "refine",
    "render_shading_image", "run_pipeline", "save_albedo", "save_views", "write_image",
    "write_mesh",
]
