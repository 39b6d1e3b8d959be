from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

import irshade.evaluate as evaluate
from irshade.evaluate import (EvaluationError, ErrorReport, align_icp, gradient_rmse, image_rmse,
                              leave_one_out_eval, mesh_distance)
from irshade.mesh import TriangleMesh, closest_points_on_mesh, grid_mesh
from irshade.refine import RefinementConfig, RefinementError
from irshade.shading import ShadingImage
from irshade.synth import bump_power, generate_scene


def point_triangle_distance(p, a, b, c):
    """Exact distance from point ``p`` to every triangle (a, b, c) by region tests."""
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    h = np.einsum("ij,ij->i", p - a, n)
    q = p - h[:, None] * n

    def inside(u, v, w):
        return np.einsum("ij,ij->i", np.cross(v - u, q - u), n) >= 0

    on_face = inside(a, b, c) & inside(b, c, a) & inside(c, a, b)

    def seg(u, v):
        e = v - u
        t = np.clip(np.einsum("ij,ij->i", p - u, e) / np.einsum("ij,ij->i", e, e), 0, 1)
        return np.linalg.norm(p - (u + t[:, None] * e), axis=1)

    edge = np.minimum(np.minimum(seg(a, b), seg(b, c)), seg(c, a))
    return np.where(on_face, np.abs(h), edge)


def brute_force_distance(source, target, idx):
    a, b, c = (target.vertices[target.faces[:, k]] for k in range(3))
    return np.array([point_triangle_distance(np.broadcast_to(source.vertices[i], a.shape), a, b, c).min()
                     for i in idx])


def plane(z=0.0, n=11, size=10.0):
    g = grid_mesh(n, n, (size, size), (-size / 2, -size / 2), z=z)
    return g


class TestGenerateScene:
    def test_bumpy_sphere_smoothing_removes_bumps(self):
        sc = generate_scene("bumpy_sphere", {"radius": 100.0, "amplitude": 2.0, "n_views": 12})
        assert len(sc.views) == 12
        assert np.abs(sc.heights).max() == pytest.approx(2.0)
        assert bump_power(sc.degraded_heights) < 0.1 * bump_power(sc.heights)

    def test_relief_plane_stripes_flattened(self):
        sc = generate_scene("relief_plane", {"amplitude": 0.8})
        assert np.abs(sc.heights).max() == pytest.approx(0.4, rel=1e-3)
        # the outer 10 mm border is pinned so the plane keeps its extent
        inner = np.abs(sc.truth.vertices[:, :2]).max(axis=1) <= 50.0
        h = sc.degraded_heights[inner]
        assert (h.max() - h.min()) / 2 < 0.1

    def test_two_material_labels(self, two_material_scene):
        sc = two_material_scene
        assert set(np.unique(sc.materials)) == {0, 1}
        v = sc.albedo.group_values
        assert v[0] / v[1] == pytest.approx(2.0)
        np.testing.assert_array_equal(sc.albedo.labels, sc.materials)

    def test_topology_preserved_and_gamma_tagged(self, small_bumpy_scene):
        sc = small_bumpy_scene
        np.testing.assert_array_equal(sc.degraded.faces, sc.truth.faces)
        for v in sc.views:
            assert v.image.gamma_applied and v.image.gamma == sc.light.gamma

    def test_deterministic(self):
        a = generate_scene("relief_plane", {"resolution": 31, "noise_sigma": 0.01}, seed=5)
        b = generate_scene("relief_plane", {"resolution": 31, "noise_sigma": 0.01}, seed=5)
        assert np.array_equal(a.truth.vertices, b.truth.vertices)
        assert np.array_equal(a.degraded.vertices, b.degraded.vertices)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.image.intensity, vb.image.intensity)

    def test_unknown_kind_and_params(self):
        with pytest.raises(ValueError):
            generate_scene("teapot")
        with pytest.raises(ValueError):
            generate_scene("sphere", {"colour": 3})


class TestImageMetrics:
    def test_identical_images(self):
        a = np.random.default_rng(0).uniform(size=(20, 30))
        assert image_rmse(a, a) == 0.0
        assert gradient_rmse(a, a) == 0.0

    def test_constant_images(self):
        assert image_rmse(np.full((5, 5), 0.2), np.full((5, 5), 0.5)) == pytest.approx(0.3, abs=1e-15)

    def test_offset_does_not_change_gradients(self):
        a = np.random.default_rng(1).uniform(size=(20, 30))
        assert gradient_rmse(a, a + 0.25) == pytest.approx(0.0, abs=1e-14)

    def test_rmse_matches_two_pass_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(2, 25, 35))
        mask = rng.uniform(size=a.shape) < 0.7
        total, n = 0.0, 0
        for y in range(a.shape[0]):
            for x in range(a.shape[1]):
                if mask[y, x]:
                    total += (a[y, x] - b[y, x]) ** 2
                    n += 1
        assert abs(image_rmse(a, b, mask) - np.sqrt(total / n)) < 1e-12

    def test_gradient_rmse_matches_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(2, 18, 22))
        mask = np.zeros(a.shape, bool)
        mask[2:15, 3:20] = True
        H, W = a.shape

        def grad(img, y, x):
            gx = img[y, x + 1] - img[y, x] if x + 1 < W else 0.0
            gy = img[y + 1, x] - img[y, x] if y + 1 < H else 0.0
            return np.hypot(gx, gy)

        total, n = 0.0, 0
        for y in range(H):
            for x in range(W):
                # 1-pixel erosion: whole 3x3 neighbourhood inside the mask
                if 0 < y < H - 1 and 0 < x < W - 1 and mask[y - 1:y + 2, x - 1:x + 2].all():
                    total += (grad(a, y, x) - grad(b, y, x)) ** 2
                    n += 1
        assert abs(gradient_rmse(a, b, mask) - np.sqrt(total / n)) < 1e-12

    def test_default_mask_uses_coverage(self):
        a = ShadingImage(np.full((4, 4), 0.5), mask=np.eye(4, dtype=bool))
        b = ShadingImage(np.full((4, 4), 0.1))
        assert image_rmse(a, b) == pytest.approx(0.4)

    def test_empty_mask(self):
        a = np.zeros((4, 4))
        with pytest.raises(EvaluationError):
            image_rmse(a, a, np.zeros((4, 4), bool))
        with pytest.raises(EvaluationError):
            gradient_rmse(a, a, np.eye(4, dtype=bool))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(2, 10, 12))
        assert image_rmse(a, b) == image_rmse(b, a)
        assert gradient_rmse(a, b) == gradient_rmse(b, a)

    def test_error_report_rejects_negative(self):
        with pytest.raises(EvaluationError):
            ErrorReport("v", {"input": -1.0, "refined": 0.0}, {"input": 0.0, "refined": 0.0})


class TestICP:
    def test_identity(self, small_bumpy_scene):
        m = small_bumpy_scene.truth
        al = align_icp(m, m)
        np.testing.assert_allclose(al.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(al.translation, 0.0, atol=1e-9)

    def test_known_transform_recovered(self, small_bumpy_scene):
        m = small_bumpy_scene.truth
        R = Rotation.from_rotvec(np.deg2rad(5.0) * np.array([1.0, 2.0, 2.0]) / 3.0).as_matrix()
        t = np.array([6.0, 0.0, 8.0])
        moved = TriangleMesh(m.vertices @ R.T + t, m.faces)
        al = align_icp(moved, m)
        ang = np.rad2deg(Rotation.from_matrix(al.rotation @ R).magnitude())
        assert ang < 0.1
        assert np.linalg.norm(al.translation + R.T @ t) < 0.1
        assert np.all(np.diff(al.history) <= 0)

    def test_no_correspondences(self, small_bumpy_scene):
        m = small_bumpy_scene.truth
        far = TriangleMesh(m.vertices + 1e4, m.faces)
        with pytest.raises(EvaluationError):
            align_icp(far, m, max_distance=10.0)


class TestMeshDistance:
    def test_identical(self, small_bumpy_scene):
        m = small_bumpy_scene.truth
        assert mesh_distance(m, m) == (0.0, 0.0)

    def test_plane_offset(self):
        mean, mx = mesh_distance(plane(1.0), plane(0.0))
        assert mean == pytest.approx(1.0, abs=1e-12)
        assert mx == pytest.approx(1.0, abs=1e-12)

    def test_matches_brute_force(self, small_bumpy_scene):
        sc = small_bumpy_scene
        idx = np.random.default_rng(0).choice(sc.degraded.n_vertices, 300, replace=False)
        _, fast, _ = closest_points_on_mesh(sc.truth, sc.degraded.vertices[idx])
        slow = brute_force_distance(sc.degraded, sc.truth, idx)
        assert abs(fast.mean() - slow.mean()) <= 0.01 * slow.mean()
        np.testing.assert_allclose(fast, slow, atol=1e-9)
        mean, _ = mesh_distance(sc.degraded, sc.truth)
        assert mean > 0

    def test_rigid_invariance(self, small_bumpy_scene):
        sc = small_bumpy_scene
        R = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
        t = np.array([10.0, -4.0, 7.0])
        a = TriangleMesh(sc.degraded.vertices @ R.T + t, sc.degraded.faces)
        b = TriangleMesh(sc.truth.vertices @ R.T + t, sc.truth.faces)
        np.testing.assert_allclose(mesh_distance(a, b), mesh_distance(sc.degraded, sc.truth), atol=1e-9)


class TestLeaveOneOut:
    def test_truth_input_is_a_fixed_point(self, small_relief_scene):
        sc = small_relief_scene
        scene = SimpleNamespace(degraded=sc.truth, truth=sc.truth, views=sc.views, albedo=sc.albedo,
                                light=sc.light)
        reports = leave_one_out_eval(scene, RefinementConfig(outer_iterations=2))
        assert len(reports) == len(sc.views)
        for r in reports:
            assert abs(r.image_rmse["refined"] - r.image_rmse["input"]) < 1e-6

    def test_one_report_per_fold_and_improvement(self, small_relief_scene):
        reports = leave_one_out_eval(small_relief_scene, RefinementConfig(lambda1=0.3, outer_iterations=3))
        assert len(reports) == len(small_relief_scene.views)
        assert all(r.improved for r in reports)
        assert all(np.isfinite(r.mean_distance) for r in reports)

    def test_failed_fold_skipped(self, small_relief_scene, monkeypatch, caplog):
        real = evaluate.refine
        calls = []

        def flaky(mesh, views, *a, **kw):
            calls.append(1)
            if len(calls) == 2:
                raise RefinementError("forced")
            return real(mesh, views, *a, **kw)

        monkeypatch.setattr(evaluate, "refine", flaky)
        with caplog.at_level("WARNING"):
            reports = leave_one_out_eval(small_relief_scene, RefinementConfig(outer_iterations=1))
        assert len(reports) == len(small_relief_scene.views) - 1
        assert "skipped" in caplog.text

    def test_needs_three_views(self, small_relief_scene):
        sc = small_relief_scene
        scene = SimpleNamespace(degraded=sc.degraded, views=sc.views[:2], albedo=sc.albedo, light=sc.light)
        with pytest.raises(EvaluationError):
            leave_one_out_eval(scene)
