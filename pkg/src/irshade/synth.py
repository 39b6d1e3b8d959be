"""Synthetic ground-truth scenes for exercising the refinement pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .albedo import AlbedoModel
from .camera import CameraIntrinsics, CameraPose, View
from .mesh import (TriangleMesh, compute_vertex_normals, grid_mesh, icosphere,
                   laplacian_smooth_field)
from .shading import LightModel, render_shading_image

SCENE_KINDS = ("sphere", "bumpy_sphere", "relief_plane", "two_material_plane")


@dataclass
class SyntheticScene:
    kind: str
    truth: TriangleMesh
    degraded: TriangleMesh
    views: list
    light: LightModel
    albedo: AlbedoModel
    materials: np.ndarray
    heights: np.ndarray = None
    degraded_heights: np.ndarray = None
    params: dict = field(default_factory=dict)


_DEFAULTS = {
    "sphere": dict(radius=100.0, frequency=32, n_views=12, distance=450.0, elevation=30.0,
                   albedo=1.0e5, gamma=0.8, smooth_iterations=0),
    "bumpy_sphere": dict(radius=100.0, frequency=45, n_views=12, distance=450.0, elevation=30.0,
                         albedo=1.0e5, gamma=0.8, amplitude=2.0, bump_wavelength=20.0, n_waves=6,
                         smooth_iterations=45),
    "relief_plane": dict(size=120.0, resolution=121, n_views=5, distance=400.0, elevation=25.0,
                         albedo=1.0e5, gamma=0.8, amplitude=0.8, stripe_period=8.0,
                         smooth_iterations=30),
    "two_material_plane": dict(size=120.0, resolution=81, n_views=5, distance=400.0, elevation=25.0,
                               albedo=1.0e5, albedo_ratio=2.0, gamma=0.8, smooth_iterations=0),
}


def default_params(kind):
    if kind not in _DEFAULTS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    return dict(_DEFAULTS[kind])


def ring_views(n_views, distance, elevation_deg, target=(0.0, 0.0, 0.0), intrinsics=None,
               light_offset=(0.0, 0.0, 0.0), full_circle=True, arc_deg=120.0):
    """Cameras on a circle around ``target`` looking at it.

    Successive cameras alternate between ``+elevation`` and ``-elevation``
    so that both poles of a closed object are observed. With
    ``full_circle=False`` the cameras span an ``arc_deg`` arc in front of
    the xy-plane (for planar scenes facing -z).
    """
    intr = intrinsics or CameraIntrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)
    target = np.asarray(target, float)
    views = []
    el = np.deg2rad(elevation_deg)
    for k in range(n_views):
        if full_circle:
            az = 2 * np.pi * k / n_views
            e = el if k % 2 == 0 else -el
            d = np.array([np.cos(e) * np.sin(az), np.sin(e), -np.cos(e) * np.cos(az)])
            up = (0.0, 1.0, 0.0)
        else:
            # planar scenes: cameras over the -z side on a tilted arc
            az = np.deg2rad(arc_deg) * ((k / max(n_views - 1, 1)) - 0.5) if n_views > 1 else 0.0
            d = np.array([np.sin(az) * np.cos(el), np.sin(el) * np.cos(az * 2), -np.cos(az) * np.cos(el)])
            up = (0.0, 1.0, 0.0)
        eye = target + distance * d / np.linalg.norm(d)
        views.append(View(intr, CameraPose.look_at(eye, target, up), np.asarray(light_offset, float),
                          name=f"view{k:02d}"))
    return views


def _wave_relief(points, n_waves, wavelength, rng):
    """Sum of plane waves of one wavelength in random directions and phases."""
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0.0, 2 * np.pi, size=n_waves)
    return np.sin(2 * np.pi * (points @ dirs.T) / wavelength + phase).sum(axis=1)


def _render_views(mesh, views, albedo, light):
    return [v.with_image(render_shading_image(mesh, v, albedo, light)) for v in views]


def generate_scene(kind="bumpy_sphere", params=None, seed=0):
    """Build a ground-truth mesh, its degraded copy and rendered views.

    The degraded mesh keeps the truth's topology. Detail is modelled as a
    height field along the base-shape normal; degradation applies
    ``smooth_iterations`` umbrella-Laplacian passes to that height field,
    which erases fine relief while leaving the base shape (and hence the
    object's size) untouched.
    """
    p = default_params(kind)
    if params:
        unknown = set(params) - set(p) - {"light_offset", "intrinsics", "noise_sigma"}
        if unknown:
            raise ValueError(f"unknown parameters for {kind}: {sorted(unknown)}")
        p.update(params)
    rng = np.random.default_rng(seed)
    light = LightModel(gamma=float(p["gamma"]))
    light_offset = p.get("light_offset", (0.0, 0.0, 0.0))

    if kind in ("sphere", "bumpy_sphere"):
        base = icosphere(int(p["frequency"]), 1.0)
        dirs = base.vertices
        R = float(p["radius"])
        if kind == "bumpy_sphere":
            h = _wave_relief(dirs * R, int(p["n_waves"]), float(p["bump_wavelength"]), rng)
            h *= float(p["amplitude"]) / np.abs(h).max()
        else:
            h = np.zeros(len(dirs))
        topo = TriangleMesh(dirs * R, base.faces)
        hs = laplacian_smooth_field(topo, h, int(p["smooth_iterations"]))
        truth = compute_vertex_normals(TriangleMesh(dirs * (R + h)[:, None], base.faces))
        degraded = compute_vertex_normals(truth.with_vertices(dirs * (R + hs)[:, None]))
        materials = np.zeros(len(dirs), dtype=np.int64)
        albedo = AlbedoModel.global_(float(p["albedo"]))
        views = ring_views(int(p["n_views"]), float(p["distance"]), float(p["elevation"]),
                           intrinsics=p.get("intrinsics"), light_offset=light_offset)
    elif kind in ("relief_plane", "two_material_plane"):
        size = float(p["size"])
        n = int(p["resolution"])
        base = grid_mesh(n, n, (size, size), (-size / 2, -size / 2))
        # flip winding so the outward side faces the cameras at -z
        faces = base.faces[:, ::-1].copy()
        xy = base.vertices[:, :2]
        if kind == "relief_plane":
            period = float(p["stripe_period"])
            # concentric relief loosely imitating a carved shell
            r = np.linalg.norm(xy, axis=1)
            ang = np.arctan2(xy[:, 1], xy[:, 0])
            h = 0.5 * float(p["amplitude"]) * np.sin(2 * np.pi * (r + 4.0 * ang) / period)
        else:
            h = np.zeros(len(xy))
        topo = TriangleMesh(base.vertices, faces)
        boundary = topo.boundary_vertices()
        hs = laplacian_smooth_field(topo, h, int(p["smooth_iterations"]), fixed=boundary)
        # heights grow towards the cameras (-z)
        truth = compute_vertex_normals(TriangleMesh(np.column_stack([xy, -h]), faces))
        degraded = compute_vertex_normals(truth.with_vertices(np.column_stack([xy, -hs])))
        if kind == "two_material_plane":
            materials = (xy[:, 0] >= 0).astype(np.int64)
            high = float(p["albedo"])
            values = np.array([high, high / float(p["albedo_ratio"])])
            albedo = AlbedoModel.grouped(materials, values)
        else:
            materials = np.zeros(len(xy), dtype=np.int64)
            albedo = AlbedoModel.global_(float(p["albedo"]))
        views = ring_views(int(p["n_views"]), float(p["distance"]), float(p["elevation"]),
                           intrinsics=p.get("intrinsics"), light_offset=light_offset,
                           full_circle=False)
    else:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")

    views = _render_views(truth, views, albedo, light)
    sigma = float(p.get("noise_sigma", 0.0) or 0.0)
    if sigma > 0:
        noisy = []
        for v in views:
            img = v.image
            inten = np.clip(img.intensity + rng.normal(0.0, sigma, img.shape) * img.mask, 0.0, 1.0)
            noisy.append(v.with_image(type(img)(inten, img.gamma_applied, img.gamma, img.mask, img.saturated)))
        views = noisy
    return SyntheticScene(kind, truth, degraded, views, light, albedo, materials, h, hs, p)


def bump_power(heights):
    """Mean squared height about the mean (the power of a relief field)."""
    h = np.asarray(heights, float)
    return float(np.mean((h - h.mean()) ** 2))
