import numpy as np
import pytest

from irshade.mesh import (NonManifoldError, TriangleMesh, closest_points_on_mesh,
                          compute_vertex_normals, icosphere)
from irshade.remesh import edge_length_cv, isotropic_remesh, target_edge_length


def graded_plane(nx=60, ny=40, size=100.0):
    """Plane whose columns get denser towards x = 0 (strongly non-uniform edges)."""
    xs = size * np.linspace(0.0, 1.0, nx) ** 2
    ys = np.linspace(0.0, size * 0.6, ny)
    X, Y = np.meshgrid(xs, ys)
    V = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    F = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return compute_vertex_normals(TriangleMesh(V, F))


def hausdorff(a, b):
    _, d1, _ = closest_points_on_mesh(b, a.vertices)
    _, d2, _ = closest_points_on_mesh(a, b.vertices)
    return max(d1.max(), d2.max())


def orientation_agrees(out, ref):
    """Every output face normal points the same way as the nearest input face."""
    c = out.vertices[out.faces].mean(axis=1)
    _, _, fid = closest_points_on_mesh(ref, c)
    return np.einsum("ij,ij->i", out.face_normals(), ref.face_normals()[fid]).min() > 0


class TestIsotropicRemesh:
    def test_uniform_sphere_is_nearly_a_fixed_point(self):
        m = compute_vertex_normals(icosphere(16, 50.0))
        out = isotropic_remesh(m, m.n_vertices)
        assert abs(out.n_vertices - m.n_vertices) <= 0.1 * m.n_vertices
        assert edge_length_cv(out) <= edge_length_cv(m)
        assert hausdorff(out, m) < 0.005 * m.bbox_diagonal()
        assert orientation_agrees(out, m)
        out.check_manifold()

    def test_graded_plane_cv_halved(self):
        m = graded_plane()
        out = isotropic_remesh(m, 10_000)
        assert edge_length_cv(out) <= 0.5 * edge_length_cv(m)
        assert abs(out.n_vertices - 10_000) <= 1_000
        assert hausdorff(out, m) < 0.005 * m.bbox_diagonal()
        assert orientation_agrees(out, m)

    def test_boundary_stays_on_input_boundary(self):
        m = graded_plane(30, 20)
        out = isotropic_remesh(m, 3000)
        b = out.boundary_vertices()
        x, y = out.vertices[b, 0], out.vertices[b, 1]
        on_edge = (np.isclose(x, 0, atol=1e-9) | np.isclose(x, 100, atol=1e-9)
                   | np.isclose(y, 0, atol=1e-9) | np.isclose(y, 60, atol=1e-9))
        assert on_edge.all()

    def test_coarse_to_dense(self):
        # a coarse fused-style mesh refined to the working resolution
        rng = np.random.default_rng(0)
        base = icosphere(22, 100.0)
        r = 100.0 + 2.0 * np.sin(base.vertices[:, 0] / 9.0) * np.cos(base.vertices[:, 1] / 11.0)
        v = base.vertices / 100.0 * r[:, None] + rng.normal(0, 0.05, base.vertices.shape)
        m = compute_vertex_normals(TriangleMesh(v, base.faces))
        assert 4_000 < m.n_vertices < 6_000
        out = isotropic_remesh(m, 100_000)
        assert 90_000 <= out.n_vertices <= 110_000
        assert orientation_agrees(out, m)

    def test_non_manifold_input_is_rejected(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
        with pytest.raises(NonManifoldError, match="non-manifold"):
            isotropic_remesh(TriangleMesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]]), 50)

    def test_target_edge_length_formula(self):
        m = icosphere(8, 10.0)
        L = target_edge_length(m, 1000)
        # an equilateral tessellation with 2N triangles of side L covers the area
        assert np.isclose(2 * 1000 * np.sqrt(3) / 4 * L ** 2, m.surface_area())
