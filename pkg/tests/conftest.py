import numpy as np
import pytest

from irshade.camera import CameraIntrinsics, CameraPose, View
from irshade.mesh import TriangleMesh, compute_vertex_normals, grid_mesh, icosphere
from irshade.synth import generate_scene


def make_view(eye, target=(0.0, 0.0, 0.0), intrinsics=None, light_offset=(0.0, 0.0, 0.0), name="v"):
    intr = intrinsics or CameraIntrinsics(300.0, 300.0, 79.5, 59.5, 160, 120)
    return View(intr, CameraPose.look_at(eye, target), np.asarray(light_offset, float), name=name)


def bumpy_patch(n=15, size=40.0, amplitude=1.5, seed=0):
    """Small height-field patch facing -z (towards cameras placed at negative z)."""
    rng = np.random.default_rng(seed)
    g = grid_mesh(n, n, (size, size), (-size / 2, -size / 2))
    xy = g.vertices[:, :2]
    h = amplitude * np.sin(xy[:, 0] / 6.0 + rng.uniform(0, 6)) * np.cos(xy[:, 1] / 7.0)
    return compute_vertex_normals(TriangleMesh(np.column_stack([xy, -h]), g.faces[:, ::-1].copy()))


@pytest.fixture(scope="session")
def unit_sphere():
    return compute_vertex_normals(icosphere(8, 1.0))


@pytest.fixture(scope="session")
def small_relief_scene():
    return generate_scene("relief_plane", {"resolution": 41}, seed=3)


@pytest.fixture(scope="session")
def small_bumpy_scene():
    return generate_scene("bumpy_sphere", {"frequency": 16, "n_views": 6, "bump_wavelength": 40.0,
                                           "smooth_iterations": 15}, seed=1)


@pytest.fixture(scope="session")
def two_material_scene():
    return generate_scene("two_material_plane", {}, seed=0)
