import numpy as np
import pytest
import scipy.sparse as sp

from irshade.camera import VisibilityMap, compute_visibility, rasterize
from irshade.evaluate import mesh_distance
from irshade.mesh import TriangleMesh, compute_vertex_normals, icosphere
from irshade.refine import (LinearResidualSystem, MeshRefiner, RefinementConfig, RefinementError,
                            ResidualSystem, _flipped_faces, build_data_residuals,
                            build_regularization_residuals, build_smoothness_residuals,
                            collect_observations, refine, solve_displacements)
from irshade.shading import LightModel, render_radiance, render_shading_image

from conftest import bumpy_patch, make_view

ALBEDO = 5e4
LIGHT = LightModel(gamma=1.0)


def patch_problem(n_views=3, seed=0):
    """225-vertex bumpy patch, ``n_views`` cameras and its own renders as images."""
    mesh = bumpy_patch(seed=seed)
    eyes = [(0.0, 0.0, -300.0), (80.0, 30.0, -290.0), (-70.0, -40.0, -290.0)][:n_views]
    views = [make_view(e, name=f"v{k}") for k, e in enumerate(eyes)]
    views = [v.with_image(render_shading_image(mesh, v, ALBEDO, LIGHT)) for v in views]
    return mesh, views


def frozen_state(mesh, views, rendered=False):
    rasters = [rasterize(mesh, v) for v in views]
    vis = compute_visibility(mesh, views, rasters=rasters)
    ren = None
    if rendered:
        ren = []
        for v, r in zip(views, rasters):
            lin, mask = render_radiance(mesh, v, ALBEDO, LIGHT, r)
            ren.append((np.minimum(lin, 1.0), mask))
    return collect_observations(mesh, views, vis, ALBEDO, LIGHT, rendered=ren)


def central_difference(fun, x, h):
    cols = []
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.column_stack(cols)


@pytest.fixture(scope="module")
def patch():
    mesh, views = patch_problem()
    return mesh, views, frozen_state(mesh, views)


class TestDataResiduals:
    def test_zero_at_own_render(self, patch):
        mesh, views, _ = patch
        state = frozen_state(mesh, views, rendered=True)
        assert state.n_obs > 300
        r = build_data_residuals(mesh, state, np.zeros(mesh.n_vertices), with_jacobian=False)
        assert np.abs(r).max() < 1e-9 * ALBEDO

    def test_jacobian_matches_finite_differences(self, patch):
        mesh, views, state = patch
        assert 200 <= mesh.n_vertices <= 250
        rng = np.random.default_rng(0)
        delta = rng.normal(0, 0.3, mesh.n_vertices)
        _, J = build_data_residuals(mesh, state, delta)
        fd = central_difference(lambda d: build_data_residuals(mesh, state, d, False), delta, 1e-4)
        Jd = J.toarray()
        big = np.abs(Jd) > 1e-8
        rel = np.abs(Jd[big] - fd[big]) / np.abs(Jd[big])
        assert rel.max() < 1e-5
        # entries the analytic Jacobian leaves out must vanish numerically
        assert np.abs(fd[~big]).max() < 1e-6 * np.abs(Jd).max()

    def test_full_stacked_jacobian(self, patch):
        mesh, views, state = patch
        system = ResidualSystem(mesh, state, 2.0, 0.5)
        rng = np.random.default_rng(1)
        delta = rng.normal(0, 0.3, mesh.n_vertices)
        _, J = system.evaluate(delta)
        fd = central_difference(system.residual, delta, 1e-4)
        Jd = J.toarray()
        big = np.abs(Jd) > 1e-8
        assert np.max(np.abs(Jd[big] - fd[big]) / np.abs(Jd[big])) < 1e-5

    def test_rows_touch_only_vertex_and_one_ring(self, patch):
        mesh, _, state = patch
        _, J = build_data_residuals(mesh, state, np.zeros(mesh.n_vertices))
        J = J.tocsr()
        adj = mesh.adjacency
        for row, i in enumerate(state.obs_vertex):
            cols = set(J.indices[J.indptr[row]:J.indptr[row + 1]])
            allowed = {int(i)} | set(adj.neighbors_of(i).tolist())
            assert cols <= allowed
            assert len(cols) <= 1 + len(adj.neighbors_of(i))

    def test_back_facing_pairs_omitted(self):
        mesh = compute_vertex_normals(icosphere(8, 50.0))
        view = make_view((0.0, 0.0, -300.0))
        view = view.with_image(render_shading_image(mesh, view, ALBEDO, LIGHT))
        everything = VisibilityMap(np.ones((1, mesh.n_vertices), bool), ())
        state = collect_observations(mesh, [view], everything, ALBEDO, LIGHT)
        facing = np.einsum("ij,ij->i", mesh.normals, view.light_position - mesh.vertices) > 0
        assert state.n_obs > 0
        assert facing[state.obs_vertex].all()
        assert np.all(state.weight > 0)

    def test_vertex_with_too_few_neighbours_excluded(self, caplog):
        mesh, views = patch_problem(1)
        # append a vertex that no face references
        lonely = TriangleMesh(np.vstack([mesh.vertices, [0.0, 0.0, -1.0]]), mesh.faces)
        lonely = compute_vertex_normals(lonely)
        vis = VisibilityMap(np.ones((1, lonely.n_vertices), bool), ())
        with caplog.at_level("WARNING"):
            state = collect_observations(lonely, views, vis, ALBEDO, LIGHT)
        assert lonely.n_vertices - 1 not in state.obs_vertex
        assert "fewer than 2 neighbours" in caplog.text


class TestSmoothnessAndRegularization:
    def test_constant_field_is_smooth(self, patch):
        mesh = patch[0]
        r, _ = build_smoothness_residuals(mesh, np.full(mesh.n_vertices, 2.5), 3.0)
        np.testing.assert_array_equal(r, 0.0)

    def test_single_edge(self):
        tri = TriangleMesh([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        r, J = build_smoothness_residuals(tri, np.array([1.0, 0.0, 0.0]), 4.0)
        row = [k for k in range(J.shape[0])
               if J[k, 0] > 0 and J[k, 1] < 0][0]
        assert r[row] == 2.0
        assert J[row, 0] == 2.0 and J[row, 1] == -2.0
        # one residual per directed edge
        assert len(r) == 6

    def test_smoothness_jacobian_is_exact(self, patch):
        mesh = patch[0]
        rng = np.random.default_rng(2)
        d = rng.normal(size=mesh.n_vertices)
        r, J = build_smoothness_residuals(mesh, d, 1.7)
        np.testing.assert_allclose(J @ d, r, rtol=0, atol=1e-12)
        fd = central_difference(lambda x: build_smoothness_residuals(mesh, x, 1.7)[0], d, 1.0)
        np.testing.assert_allclose(fd, J.toarray(), rtol=0, atol=1e-12)

    def test_regularization_examples(self):
        r, J = build_regularization_residuals(np.zeros(4), 2.0)
        np.testing.assert_array_equal(r, 0.0)
        r, J = build_regularization_residuals(np.array([3.0]), 1.0)
        assert r[0] == 3.0
        assert (J != sp.identity(1)).nnz == 0

    def test_regularization_shrinks_displacement(self):
        mesh, views = patch_problem(1)
        flat = compute_vertex_normals(mesh.with_vertices(mesh.vertices * [1, 1, 0.3]))
        move = []
        for lam2 in (0.0, 1.0):
            cfg = RefinementConfig(lambda1=0.1, lambda2=lam2, outer_iterations=1)
            out = refine(flat, views, ALBEDO, LIGHT, cfg).mesh
            move.append(np.linalg.norm(out.vertices - flat.vertices, axis=1).mean())
        assert move[0] > move[1]


class TestSolver:
    def test_pure_regularization_returns_zero(self, patch):
        mesh, views, state = patch
        empty = collect_observations(mesh, views, VisibilityMap(np.zeros((3, mesh.n_vertices), bool), ()),
                                     ALBEDO, LIGHT)
        assert empty.n_obs == 0
        delta, info = solve_displacements(ResidualSystem(mesh, empty, 0.0, 1.0))
        np.testing.assert_array_equal(delta, 0.0)
        assert info.costs[-1] == 0.0

    def test_linear_system_recovered(self):
        rng = np.random.default_rng(3)
        A = sp.random(150, 80, density=0.1, random_state=4) + sp.identity(150, format="csr")[:, :80]
        x = rng.normal(size=80)
        sys = LinearResidualSystem(A, A @ x)
        delta, _ = solve_displacements(sys, RefinementConfig(lm_max_inner=50))
        dense = np.linalg.lstsq(A.toarray(), A @ x, rcond=None)[0]
        np.testing.assert_allclose(dense, x, atol=1e-12)
        assert np.abs(delta - x).max() < 1e-9

    def test_costs_non_increasing(self, patch):
        mesh, views, _ = patch
        flat = compute_vertex_normals(mesh.with_vertices(mesh.vertices * [1, 1, 0.5]))
        state = frozen_state(flat, views)
        _, info = solve_displacements(ResidualSystem(flat, state, 1e3, 1e2))
        assert info.accepted >= 2
        assert np.all(np.diff(info.costs) <= 0)
        assert info.costs[-1] < info.costs[0]

    def test_dimension_equals_vertex_count(self, patch):
        mesh, _, state = patch
        system = ResidualSystem(mesh, state, 1.0, 1.0)
        r, J = system.evaluate(np.zeros(mesh.n_vertices))
        assert system.n_vars == mesh.n_vertices == J.shape[1]
        assert J.shape[0] == len(r)


class TestRefine:
    def test_truth_is_a_fixed_point(self, small_relief_scene):
        sc = small_relief_scene
        res = refine(sc.truth, sc.views, sc.albedo, sc.light, RefinementConfig(outer_iterations=2))
        assert np.abs(res.mesh.vertices - sc.truth.vertices).max() < 1e-6

    def test_improves_degraded_relief(self, small_relief_scene):
        sc = small_relief_scene
        before = mesh_distance(sc.degraded, sc.truth)[0]
        out = refine(sc.degraded, sc.views, sc.albedo, sc.light,
                     RefinementConfig(lambda1=0.3, outer_iterations=3)).mesh
        assert mesh_distance(out, sc.truth)[0] < 0.8 * before

    def test_huge_lambda2_freezes_mesh(self, small_relief_scene):
        sc = small_relief_scene
        moves = []
        for lam2 in (1e2, 1e4, 1e6):
            out = refine(sc.degraded, sc.views, sc.albedo, sc.light,
                         RefinementConfig(lambda2=lam2, outer_iterations=1)).mesh
            moves.append(np.abs(out.vertices - sc.degraded.vertices).max())
        assert moves[0] > moves[1] > moves[2]
        assert moves[2] < 1e-4

    def test_vertices_move_along_frozen_normals(self, small_relief_scene):
        sc = small_relief_scene
        snapshots = [compute_vertex_normals(sc.degraded)]

        def keep(t, mesh, rec):
            snapshots.append(mesh)

        refine(sc.degraded, sc.views, sc.albedo, sc.light, RefinementConfig(outer_iterations=2),
               callback=keep)
        for prev, cur in zip(snapshots, snapshots[1:]):
            step = cur.vertices - prev.vertices
            along = np.einsum("ij,ij->i", step, prev.normals)
            np.testing.assert_allclose(step, along[:, None] * prev.normals, rtol=0, atol=1e-12)

    def test_diagnostics_recorded(self, small_relief_scene):
        sc = small_relief_scene
        res = refine(sc.degraded, sc.views, sc.albedo, sc.light, RefinementConfig(outer_iterations=2))
        assert len(res.history) == 2
        for rec in res.history:
            assert rec.E_p <= rec.E_p0
            assert min(rec.E_s, rec.E_r) >= 0
            assert np.all(np.diff(rec.costs) <= 0)

    def test_view_without_image(self, small_relief_scene):
        sc = small_relief_scene
        with pytest.raises(RefinementError, match="no image"):
            refine(sc.degraded, [sc.views[0].with_image(None)], sc.albedo, sc.light)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            RefinementConfig(lambda1=-1.0)
        with pytest.raises(ValueError):
            RefinementConfig(outer_iterations=0)


class TestFlips:
    def test_flip_detection(self):
        tri = TriangleMesh([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        old = tri.face_cross()
        moved = tri.vertices.copy()
        moved[2, 1] = -1.0
        assert _flipped_faces(tri, old, moved).tolist() == [True]
        assert _flipped_faces(tri, old, tri.vertices * 2).tolist() == [False]

    def test_refined_meshes_never_flip(self, small_relief_scene):
        sc = small_relief_scene
        before = sc.degraded.face_cross()
        out = refine(sc.degraded, sc.views, sc.albedo, sc.light,
                     RefinementConfig(lambda1=1e-3, lambda2=0.0, outer_iterations=3)).mesh
        assert np.all(np.einsum("ij,ij->i", before, out.face_cross()) > 0)


class TestMeshRefiner:
    def test_fit_transform(self, small_relief_scene):
        sc = small_relief_scene
        est = MeshRefiner(outer_iterations=2)
        assert est.get_params()["lambda1"] == 1.0
        out = est.fit(sc.degraded, sc.views, sc.albedo, sc.light).transform()
        assert out.n_vertices == sc.degraded.n_vertices
        assert len(est.history_) == 2
