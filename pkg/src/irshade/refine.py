"""Shading-driven mesh refinement.

Every vertex moves along its (frozen) normal by a scalar displacement
``delta_i``. One outer iteration freezes normals, light directions and
light distances, then minimises

    sum_ik w_ik (I_ik d_ik^2 - c rho_i n_i(delta) . l_ik)^2      (shading)
  + sum_i sum_{j in N(i)} lambda1 (delta_i - delta_j)^2           (smoothness)
  + sum_i lambda2 delta_i^2                                       (regularisation)

with a sparse Levenberg-Marquardt solver and analytic Jacobians. The
shading term is evaluated on depth-multiplied intensities ``I * d^2`` so
that the frozen distances enter as constants. ``n_i(delta)`` is the
normalised sum of the cross products of the displaced faces around
vertex ``i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .camera import compute_visibility, default_visibility_bias, project_points, rasterize
from .mesh import compute_vertex_normals
from .shading import (LightModel, albedo_per_vertex, linear_intensity, render_radiance,
                      sample_bilinear)

log = logging.getLogger(__name__)


class RefinementError(RuntimeError):
    pass


@dataclass
class RefinementConfig:
    """Weights and solver settings.

    ``lambda1``/``lambda2`` are relative: at the first outer iteration they
    are multiplied by the mean squared column norm of the shading Jacobian,
    so the defaults do not depend on mesh or intensity scale. Set
    ``normalize_weights=False`` to use them as absolute weights.
    ``convergence_tol`` and ``displacement_cap`` default to 1e-3 and 5
    mean edge lengths.

    With ``render_correction`` the observed sample at a vertex is compared
    against a render of the current mesh sampled the same way, so that
    interpolation error common to both cancels (see
    :func:`collect_observations`).
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    outer_iterations: int = 10
    lm_initial_damping: float = 1e-3
    lm_max_inner: int = 10
    nl_floor: float = 0.05
    convergence_tol: float | None = None
    displacement_cap: float | None = None
    low: float = 0.02
    high: float = 0.98
    visibility_bias: float | None = None
    normalize_weights: bool = True
    max_flip_retries: int = 8
    render_correction: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.outer_iterations < 1 or self.lm_max_inner < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.lm_initial_damping <= 0:
            raise ValueError("lm_initial_damping must be positive")


# observations ------------------------------------------------------------


@dataclass
class RefinementState:
    """Quantities frozen for one outer iteration.

    ``obs_vertex``/``obs_view`` index the vertex-view pairs that enter the
    shading term; ``light_dir`` and ``distance`` are taken at the frozen
    vertex position, ``target`` is the depth-multiplied observation
    ``(I - ambient) * d**2`` and ``weight`` the confidence ``n . l``.
    """

    positions: np.ndarray
    normals: np.ndarray
    obs_vertex: np.ndarray
    obs_view: np.ndarray
    light_dir: np.ndarray
    distance: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    albedo: np.ndarray
    delta: np.ndarray = None
    history: list = field(default_factory=list)

    @property
    def n_obs(self):
        return len(self.obs_vertex)


def collect_observations(mesh, views, visibility, albedo, light=LightModel(),
                         config=None, images=None, rendered=None):
    """Gather the vertex-view shading observations for a frozen mesh.

    An observation is kept when the vertex is visible, its bilinear sample
    does not touch background, the linear intensity lies in
    ``(low, high)`` and ``n . l`` reaches ``nl_floor``.

    ``rendered`` optionally holds, per view, the linear radiance image of
    ``mesh`` itself and its coverage mask. The target then becomes
    ``(I_obs(u) - I_ren(u)) d^2 + c rho n . l``: the vertex model plus the
    observed-minus-rendered difference, both sampled identically. A mesh
    whose renders reproduce the images therefore has zero residual.
    """
    config = config or RefinementConfig()
    if mesh.normals is None:
        mesh = compute_vertex_normals(mesh)
    if images is None:
        images = [linear_intensity(v.image) for v in views]
    rho = albedo_per_vertex(albedo, mesh.n_vertices) * light.brightness_c
    valence = mesh.adjacency.valence
    usable = valence >= 2
    if not usable.all():
        log.warning("%d vertices with fewer than 2 neighbours excluded from the shading term",
                    int((~usable).sum()))
    parts = []
    for k, (view, img) in enumerate(zip(views, images)):
        idx = np.flatnonzero(visibility.visible[k] & usable)
        if not len(idx):
            continue
        uv, _, _ = project_points(mesh.vertices[idx], view)
        inten, ok = sample_bilinear(img, uv, low=0.0)
        ok &= (inten > config.low) & (inten < config.high)
        to_light = view.light_position - mesh.vertices[idx]
        dist = np.linalg.norm(to_light, axis=1)
        ldir = to_light / dist[:, None]
        nl = np.einsum("ij,ij->i", mesh.normals[idx], ldir)
        ok &= nl >= max(config.nl_floor, 1e-12)
        if rendered is not None:
            ren_img, ren_mask = rendered[k]
            ren, _ = sample_bilinear(ren_img, uv)
            _, covered = sample_bilinear(ren_mask.astype(np.float64), uv, low=0.5)
            ok &= covered
        sel = np.flatnonzero(ok)
        if rendered is not None:
            target = (inten[sel] - ren[sel]) * dist[sel] ** 2 + rho[idx[sel]] * nl[sel]
        else:
            target = (inten[sel] - light.ambient) * dist[sel] ** 2
        parts.append((idx[sel], np.full(len(sel), k), ldir[sel], dist[sel], target, nl[sel]))
    if parts:
        cat = [np.concatenate(p) for p in zip(*parts)]
    else:
        cat = [np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)),
               np.zeros(0), np.zeros(0), np.zeros(0)]
    ov, ok_view, ldir, dist, target, weight = cat
    return RefinementState(mesh.vertices.copy(), mesh.normals.copy(), ov.astype(np.int64),
                           ok_view.astype(np.int64), ldir, dist, target, weight, rho[ov])


# residual blocks -------------------------------------------------------


def _vertex_face_incidence(mesh):
    key = "vf_incidence"
    if key not in mesh._cache:
        F = mesh.n_faces
        rows = mesh.faces.ravel()
        cols = np.repeat(np.arange(F), 3)
        mesh._cache[key] = sp.csr_matrix((np.ones(3 * F), (rows, cols)),
                                         shape=(mesh.n_vertices, F))
    return mesh._cache[key]


def displaced_normals(mesh, state, delta, with_jacobian=False):
    """Vertex normals of the mesh displaced by ``delta`` along frozen normals.

    Returns ``(n, length)`` and, with ``with_jacobian``, the sparse
    (3N x N) derivative of the unnormalised normal sum ``m`` with respect
    to ``delta``.
    """
    P = state.positions + delta[:, None] * state.normals
    f = mesh.faces
    p0, p1, p2 = P[f[:, 0]], P[f[:, 1]], P[f[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    A = _vertex_face_incidence(mesh)
    m = A @ cross
    length = np.linalg.norm(m, axis=1)
    n = m / np.where(length > 0, length, 1.0)[:, None]
    if not with_jacobian:
        return n, length
    # d cross_f / d delta_{v_c} = n_{v_c} x (p_{c+1} - p_{c+2})
    nf = state.normals[f]
    D = np.stack([np.cross(nf[:, 0], p1 - p2), np.cross(nf[:, 1], p2 - p0),
                  np.cross(nf[:, 2], p0 - p1)], axis=1)          # (F, 3 corners, 3 xyz)
    # scatter to every vertex i of face f: row block i, column v_c
    F = len(f)
    owner = np.repeat(f, 9, axis=1).reshape(F, 3, 3, 3)          # [f, i-corner, c, xyz]
    col = np.broadcast_to(f[:, None, :, None], (F, 3, 3, 3))
    xyz = np.broadcast_to(np.arange(3)[None, None, None, :], (F, 3, 3, 3))
    val = np.broadcast_to(D[:, None, :, :], (F, 3, 3, 3))
    rows = (3 * owner + xyz).ravel()
    G = sp.csr_matrix((val.ravel(), (rows, col.ravel())), shape=(3 * mesh.n_vertices, mesh.n_vertices))
    return n, length, G


def build_data_residuals(mesh, state, delta, with_jacobian=True):
    """Shading residuals ``sqrt(w) * (I d^2 - c rho n(delta) . l)`` and J_p."""
    delta = np.asarray(delta, dtype=np.float64)
    sw = np.sqrt(state.weight)
    if with_jacobian:
        n, length, G = displaced_normals(mesh, state, delta, True)
    else:
        n, length = displaced_normals(mesh, state, delta, False)
    i = state.obs_vertex
    pred = state.albedo * np.einsum("ij,ij->i", n[i], state.light_dir)
    r = sw * (state.target - pred)
    if not with_jacobian:
        return r
    # d n / d m = (I - n n^T) / |m|
    ni = n[i]
    l = state.light_dir
    proj = l - ni * np.einsum("ij,ij->i", ni, l)[:, None]
    g = -(sw * state.albedo / np.where(length[i] > 0, length[i], 1.0))[:, None] * proj
    nobs = len(i)
    S = sp.csr_matrix((g.ravel(), (np.repeat(np.arange(nobs), 3), (3 * i[:, None] + np.arange(3)).ravel())),
                      shape=(nobs, 3 * mesh.n_vertices))
    J = (S @ G).tocsr()
    return r, J


def smoothness_operator(mesh):
    """Directed-edge difference operator: row (i, j) is ``e_i - e_j``."""
    key = "smooth_op"
    if key not in mesh._cache:
        e = mesh.edges
        d = np.concatenate([e, e[:, ::-1]])
        m = len(d)
        rows = np.repeat(np.arange(m), 2)
        cols = d.ravel()
        vals = np.tile([1.0, -1.0], m)
        mesh._cache[key] = sp.csr_matrix((vals, (rows, cols)), shape=(m, mesh.n_vertices))
    return mesh._cache[key]


def build_smoothness_residuals(mesh, delta, lambda1):
    """``sqrt(lambda1) * (delta_i - delta_j)`` for every directed edge, and J_s."""
    D = smoothness_operator(mesh) * np.sqrt(lambda1)
    return D @ np.asarray(delta, float), D


def build_regularization_residuals(delta, lambda2):
    """``sqrt(lambda2) * delta_i`` and the scaled identity J_r."""
    delta = np.asarray(delta, float)
    s = np.sqrt(lambda2)
    return s * delta, sp.identity(len(delta), format="csr") * s


class ResidualSystem:
    """Stacked residual ``[r_p; r_s; r_r]`` of one outer iteration."""

    def __init__(self, mesh, state, lambda1, lambda2):
        self.mesh = mesh
        self.state = state
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)

    @property
    def n_vars(self):
        return self.mesh.n_vertices

    def blocks(self, delta):
        rp, Jp = build_data_residuals(self.mesh, self.state, delta)
        rs, Js = build_smoothness_residuals(self.mesh, delta, self.lambda1)
        rr, Jr = build_regularization_residuals(delta, self.lambda2)
        return (rp, Jp), (rs, Js), (rr, Jr)

    def energies(self, delta):
        rp = build_data_residuals(self.mesh, self.state, delta, with_jacobian=False)
        rs, _ = build_smoothness_residuals(self.mesh, delta, self.lambda1)
        rr, _ = build_regularization_residuals(delta, self.lambda2)
        return float(rp @ rp), float(rs @ rs), float(rr @ rr)

    def residual(self, delta):
        rp = build_data_residuals(self.mesh, self.state, delta, with_jacobian=False)
        rs, _ = build_smoothness_residuals(self.mesh, delta, self.lambda1)
        rr, _ = build_regularization_residuals(delta, self.lambda2)
        return np.concatenate([rp, rs, rr])

    def evaluate(self, delta):
        (rp, Jp), (rs, Js), (rr, Jr) = self.blocks(delta)
        return np.concatenate([rp, rs, rr]), sp.vstack([Jp, Js, Jr], format="csr")


class LinearResidualSystem:
    """``r(delta) = A delta - b``; handy for exercising the solver."""

    def __init__(self, A, b):
        self.A = sp.csr_matrix(A)
        self.b = np.asarray(b, float)

    @property
    def n_vars(self):
        return self.A.shape[1]

    def residual(self, delta):
        return self.A @ delta - self.b

    def evaluate(self, delta):
        return self.residual(delta), self.A


# solver -------------------------------------------------------------------


@dataclass
class SolveInfo:
    costs: list
    accepted: int
    rejected: int
    damping: float
    status: str


def solve_displacements(system, config=None, delta0=None, cap=None):
    """Levenberg-Marquardt on the stacked system.

    Steps solve ``(J^T J + mu diag(J^T J)) s = -J^T r``; ``mu`` shrinks
    after a cost decrease and grows after a rejected step, so the accepted
    cost sequence is non-increasing. ``cap`` bounds ``|delta_i|``.
    """
    config = config or RefinementConfig()
    n = system.n_vars
    delta = np.zeros(n) if delta0 is None else np.array(delta0, dtype=np.float64)
    r, J = system.evaluate(delta)
    cost = float(r @ r)
    costs = [cost]
    mu = config.lm_initial_damping
    accepted = rejected = 0
    status = "max_inner"
    mu_max = 1e16
    it = 0
    while it < config.lm_max_inner:
        JtJ = (J.T @ J).tocsc()
        g = J.T @ r
        diag = JtJ.diagonal()
        dscale = np.maximum(diag, 1e-12 * max(diag.max(initial=0.0), 1e-300))
        if np.sqrt(g @ g) <= 1e-14 * max(1.0, np.sqrt(cost)) * max(1.0, np.sqrt(diag.max(initial=0.0))):
            status = "gradient"
            break
        while True:
            A = JtJ + sp.diags(mu * dscale, format="csc")
            with np.errstate(all="ignore"):
                step = -spsolve(A, g, permc_spec="MMD_AT_PLUS_A")
            if not np.all(np.isfinite(step)):
                mu *= 10.0
                if mu > mu_max:
                    log.warning("normal equations singular at maximum damping; returning zero")
                    return np.zeros(n), SolveInfo(costs, accepted, rejected, mu, "singular")
                continue
            trial = delta + step
            if cap is not None:
                trial = np.clip(trial, -cap, cap)
            r_new = system.residual(trial)
            new_cost = float(r_new @ r_new)
            if new_cost <= cost:
                break
            rejected += 1
            mu *= 4.0
            if mu > mu_max:
                status = "damping"
                return delta, SolveInfo(costs, accepted, rejected, mu, status)
        accepted += 1
        it += 1
        reduction = cost - new_cost
        step_norm = np.abs(trial - delta).max()
        delta = trial
        cost = new_cost
        costs.append(cost)
        mu = max(mu / 3.0, 1e-12)
        if reduction <= 1e-15 * max(cost, 1e-300) or step_norm <= 1e-15 * max(1.0, np.abs(delta).max()):
            status = "converged"
            break
        r, J = system.evaluate(delta)
    return delta, SolveInfo(costs, accepted, rejected, mu, status)


# outer loop ---------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    n_obs: int
    E_p: float
    E_s: float
    E_r: float
    E_p0: float
    max_delta: float
    costs: list
    flip_retries: int


@dataclass
class RefinementResult:
    mesh: object
    history: list
    lambda1: float
    lambda2: float
    converged: bool


def data_jacobian_scale(mesh, state):
    """Mean squared column norm of J_p over the vertices that carry data."""
    if state.n_obs == 0:
        return 1.0
    _, Jp = build_data_residuals(mesh, state, np.zeros(mesh.n_vertices))
    col = np.asarray(Jp.multiply(Jp).sum(axis=0)).ravel()
    col = col[col > 0]
    return float(col.mean()) if len(col) else 1.0


def _flipped_faces(mesh, old_cross, new_vertices):
    new_cross = mesh.face_cross(new_vertices)
    return np.einsum("ij,ij->i", old_cross, new_cross) <= 0


def refine(mesh, views, albedo, light=LightModel(), config=None, callback=None):
    """Refine ``mesh`` against the shading images carried by ``views``.

    Each outer iteration recomputes normals and visibility, freezes them,
    solves for displacements and moves ``x_i <- x_i + delta_i n_i``. It
    stops once ``max |delta| < convergence_tol`` or after
    ``outer_iterations``.
    """
    config = config or RefinementConfig()
    views = list(views)
    mesh = compute_vertex_normals(mesh)
    edge = mesh.mean_edge_length()
    tol = config.convergence_tol if config.convergence_tol is not None else 1e-3 * edge
    cap = config.displacement_cap if config.displacement_cap is not None else 5.0 * edge
    bias = config.visibility_bias if config.visibility_bias is not None else default_visibility_bias(mesh)
    images = []
    for v in views:
        if v.image is None:
            raise RefinementError(f"view {v.name!r} carries no image")
        img = v.image
        if img.gamma_applied:
            img_lin = img.intensity ** (1.0 / light.gamma)
        else:
            img_lin = img.intensity
        images.append(img_lin)

    lam1 = lam2 = None
    history = []
    converged = False
    for t in range(config.outer_iterations):
        rasters = [rasterize(mesh, v) for v in views]
        vis = compute_visibility(mesh, views, bias, rasters)
        rendered = None
        if config.render_correction:
            rendered = []
            for v, ras in zip(views, rasters):
                lin, mask = render_radiance(mesh, v, albedo, light, ras)
                # saturate like the camera so clipped pixels agree with the images
                rendered.append((np.minimum(lin, 1.0), mask))
        state = collect_observations(mesh, views, vis, albedo, light, config, images, rendered)
        if lam1 is None:
            scale = data_jacobian_scale(mesh, state) if config.normalize_weights else 1.0
            lam1, lam2 = config.lambda1 * scale, config.lambda2 * scale
        system = ResidualSystem(mesh, state, lam1, lam2)
        zero = np.zeros(mesh.n_vertices)
        e0 = system.energies(zero)
        delta, info = solve_displacements(system, config, cap=cap)
        state.delta = delta

        old_cross = mesh.face_cross()
        retries = 0
        while True:
            new_v = mesh.vertices + delta[:, None] * mesh.normals
            flipped = _flipped_faces(mesh, old_cross, new_v)
            if not flipped.any():
                break
            if retries >= config.max_flip_retries:
                raise RefinementError(
                    f"outer iteration {t}: {int(flipped.sum())} faces keep flipping after "
                    f"{retries} step halvings")
            bad = np.unique(mesh.faces[flipped])
            delta[bad] *= 0.5
            retries += 1
        ep, es, er = system.energies(delta)
        rec = IterationRecord(t, state.n_obs, ep, es, er, e0[0], float(np.abs(delta).max(initial=0.0)),
                              info.costs, retries)
        history.append(rec)
        log.info("iter %d: obs=%d E_p %.4g -> %.4g  E_s=%.3g E_r=%.3g max|d|=%.4g",
                 t, state.n_obs, e0[0], ep, es, er, rec.max_delta)
        mesh = compute_vertex_normals(mesh.with_vertices(new_v))
        if callback is not None:
            callback(t, mesh, rec)
        if rec.max_delta < tol:
            converged = True
            break
    return RefinementResult(mesh, history, lam1, lam2, converged)


class MeshRefiner(BaseEstimator):
    """Estimator front end for :func:`refine`.

    ``fit(mesh, views, albedo, light)`` runs the refinement; the refined
    mesh is ``mesh_`` and ``transform()`` returns it. Constructor
    parameters mirror :class:`RefinementConfig`.
    """

    def __init__(self, lambda1=1.0, lambda2=0.1, outer_iterations=10, lm_initial_damping=1e-3,
                 lm_max_inner=10, nl_floor=0.05, convergence_tol=None, displacement_cap=None,
                 low=0.02, high=0.98, visibility_bias=None, normalize_weights=True,
                 render_correction=True):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.outer_iterations = outer_iterations
        self.lm_initial_damping = lm_initial_damping
        self.lm_max_inner = lm_max_inner
        self.nl_floor = nl_floor
        self.convergence_tol = convergence_tol
        self.displacement_cap = displacement_cap
        self.low = low
        self.high = high
        self.visibility_bias = visibility_bias
        self.normalize_weights = normalize_weights
        self.render_correction = render_correction

    def _config(self):
        return RefinementConfig(**self.get_params())

    def fit(self, mesh, views, albedo, light=LightModel()):
        result = refine(mesh, views, albedo, light, self._config())
        self.result_ = result
        self.mesh_ = result.mesh
        self.history_ = result.history
        self.converged_ = result.converged
        return self

    def transform(self, mesh=None):
        check_is_fitted(self, "mesh_")
        return self.mesh_
