"""Albedo estimation and grouping.

Albedo is carried as the product ``c * rho`` of global brightness and
surface reflectance. Inverting the shading model for one observation gives
``c rho = d**2 * I / (n . l)``; the global estimate averages this over all
usable vertex-view observations, the per-vertex estimate over each
vertex's own views. Per-vertex values are grouped by K-means in the
feature space ``(kappa * x, c rho)`` and the labels are cleaned with a
Potts model on mesh edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .camera import compute_visibility, project_points
from .mesh import compute_vertex_normals
from .shading import LightModel, linear_intensity, sample_bilinear

log = logging.getLogger(__name__)

MAX_GROUPS = 8


class AlbedoError(ValueError):
    pass


@dataclass(frozen=True)
class AlbedoModel:
    """Either one global ``c rho`` or per-vertex labels with per-group values."""

    mode: str
    global_value: float | None = None
    labels: np.ndarray | None = None
    group_values: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == "global":
            if not (self.global_value is not None and self.global_value > 0):
                raise AlbedoError("global albedo must be positive")
        elif self.mode == "grouped":
            labels = np.asarray(self.labels, dtype=np.int64)
            values = np.asarray(self.group_values, dtype=np.float64)
            if values.ndim != 1 or not len(values) or np.any(values <= 0):
                raise AlbedoError("group values must be a non-empty positive vector")
            if labels.min() < 0 or labels.max() >= len(values):
                raise AlbedoError("labels must index group_values")
            object.__setattr__(self, "labels", labels)
            object.__setattr__(self, "group_values", values)
        else:
            raise AlbedoError(f"unknown albedo mode {self.mode!r}")

    @classmethod
    def global_(cls, value):
        return cls("global", global_value=float(value))

    @classmethod
    def grouped(cls, labels, values):
        return cls("grouped", labels=labels, group_values=values)

    @property
    def n_groups(self):
        return 1 if self.mode == "global" else len(self.group_values)

    def vertex_values(self, n_vertices):
        if self.mode == "global":
            return np.full(n_vertices, self.global_value)
        if len(self.labels) != n_vertices:
            raise AlbedoError(f"albedo labels cover {len(self.labels)} vertices, mesh has {n_vertices}")
        return self.group_values[self.labels]


# inversion -------------------------------------------------------------


@dataclass
class AlbedoObservations:
    vertex: np.ndarray
    view: np.ndarray
    value: np.ndarray


def albedo_observations(mesh, views, visibility=None, light=LightModel(), low=0.02, high=0.98,
                        nl_floor=0.1, images=None):
    """Per vertex-view inversions ``d**2 (I - ambient) / (c n . l)``.

    Intensities outside ``(low, high)`` (shadows, saturation), samples
    touching background and grazing observations with ``n . l < nl_floor``
    are dropped.
    """
    if mesh.normals is None:
        mesh = compute_vertex_normals(mesh)
    if visibility is None:
        visibility = compute_visibility(mesh, views)
    if images is None:
        images = []
        for v in views:
            img = v.image
            images.append(img.intensity ** (1.0 / light.gamma) if img.gamma_applied
                          else linear_intensity(img))
    vid, kid, val = [], [], []
    for k, (view, img) in enumerate(zip(views, images)):
        idx = np.flatnonzero(visibility.visible[k])
        if not len(idx):
            continue
        uv, _, _ = project_points(mesh.vertices[idx], view)
        inten, ok = sample_bilinear(img, uv, low=0.0)
        to_light = view.light_position - mesh.vertices[idx]
        d = np.linalg.norm(to_light, axis=1)
        nl = np.einsum("ij,ij->i", mesh.normals[idx], to_light / d[:, None])
        ok &= (inten > low) & (inten < high) & (nl >= nl_floor)
        sel = np.flatnonzero(ok)
        vid.append(idx[sel])
        kid.append(np.full(len(sel), k))
        val.append(d[sel] ** 2 * (inten[sel] - light.ambient) / (light.brightness_c * nl[sel]))
    if not vid:
        return AlbedoObservations(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    return AlbedoObservations(np.concatenate(vid), np.concatenate(kid), np.concatenate(val))


def estimate_global_albedo(mesh, views, visibility=None, light=LightModel(), **kw):
    """Single ``c rho`` averaged over every usable observation."""
    obs = albedo_observations(mesh, views, visibility, light, **kw)
    if not len(obs.value):
        raise AlbedoError("no usable observation for global albedo estimation")
    return float(obs.value.mean())


def fill_from_neighbors(mesh, values, missing):
    """Fill ``missing`` vertices with the median of filled one-ring values,
    sweeping until nothing more can be filled."""
    values = np.array(values, dtype=np.float64)
    missing = np.array(missing, dtype=bool)
    adj = mesh.adjacency
    while missing.any():
        progress = False
        for i in np.flatnonzero(missing):
            nb = adj.neighbors_of(i)
            nb = nb[~missing[nb]]
            if len(nb):
                values[i] = np.median(values[nb])
                missing[i] = False
                progress = True
        if not progress:
            break
    return values, missing


def estimate_vertex_albedo(mesh, views, visibility=None, light=LightModel(), **kw):
    """Per-vertex ``c rho`` averaged over each vertex's own observations.

    Returns ``(values, flagged)``; flagged vertices had no usable
    observation and were filled with the median of their one-ring.
    """
    obs = albedo_observations(mesh, views, visibility, light, **kw)
    n = mesh.n_vertices
    count = np.bincount(obs.vertex, minlength=n)
    total = np.bincount(obs.vertex, weights=obs.value, minlength=n)
    values = np.divide(total, count, out=np.zeros(n), where=count > 0)
    flagged = np.flatnonzero(count == 0)
    if len(flagged) == n:
        raise AlbedoError("no vertex has a usable observation")
    if len(flagged):
        values, still = fill_from_neighbors(mesh, values, count == 0)
        if still.any():
            values[still] = np.median(values[count > 0])
    return values, flagged


# grouping --------------------------------------------------------------


@dataclass(frozen=True)
class AlbedoFeatures:
    features: np.ndarray
    kappa: float


def default_kappa(positions, albedos):
    """Scale making the albedo spread equal the pooled position spread."""
    pooled = np.sqrt(np.mean(np.var(positions, axis=0)))
    sa = np.std(albedos)
    if pooled <= 0:
        return 1.0
    if sa <= 0:
        return 1.0 / pooled
    return float(sa / pooled)


def albedo_features(positions, albedos, kappa=None):
    positions = np.asarray(positions, float)
    albedos = np.asarray(albedos, float)
    if kappa is None:
        kappa = default_kappa(positions, albedos)
    if not kappa > 0:
        raise AlbedoError("kappa must be positive")
    return AlbedoFeatures(np.column_stack([kappa * positions, albedos]), float(kappa))


def explained_variance_ratio(features):
    X = np.asarray(getattr(features, "features", features), float)
    cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
    ev = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = ev.sum()
    if total <= 0:
        return np.r_[1.0, np.zeros(len(ev) - 1)]
    return ev / total


def select_group_count(features, variance_target=0.95, max_groups=MAX_GROUPS):
    """Smallest number of principal components reaching ``variance_target``."""
    ratio = explained_variance_ratio(features)
    cum = np.cumsum(ratio)
    k = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    return int(np.clip(k, 1, max_groups))


def kmeans_cluster(features, K, seed=0, max_iter=100, tol=1e-9, return_centroids=False):
    """Lloyd's algorithm with k-means++ seeding.

    Rows are sorted before seeding so the resulting partition does not
    depend on input order. An emptied cluster is re-seeded with the point
    farthest from its current centroid.
    """
    X = np.asarray(getattr(features, "features", features), float)
    n = len(X)
    if K < 1:
        raise AlbedoError("K must be >= 1")
    K = min(int(K), n)
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    rng = np.random.default_rng(seed)
    centers = np.empty((K, X.shape[1]))
    centers[0] = Xs[rng.integers(n)]
    d2 = np.sum((Xs - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        tot = d2.sum()
        if tot <= 0:
            centers[k] = Xs[rng.integers(n)]
        else:
            centers[k] = Xs[rng.choice(n, p=d2 / tot)]
        d2 = np.minimum(d2, np.sum((Xs - centers[k]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((Xs[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new = centers.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = Xs[members].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(n), labels]))
                new[k] = Xs[far]
                labels[far] = k
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    dist = ((Xs[:, None, :] - centers[None]) ** 2).sum(axis=2)
    labels = dist.argmin(axis=1)
    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    if return_centroids:
        return out, centers
    return out


def label_centroids(features, labels, K=None):
    X = np.asarray(getattr(features, "features", features), float)
    K = int(labels.max()) + 1 if K is None else K
    cent = np.zeros((K, X.shape[1]))
    for k in range(K):
        m = labels == k
        if m.any():
            cent[k] = X[m].mean(axis=0)
    return cent


def potts_energy(mesh, labels, data_cost, lambda_pairwise):
    """``sum_p D_p(L_p) + sum_p sum_{q in N(p)} lambda [L_p != L_q]``."""
    e = mesh.edges
    cut = np.count_nonzero(labels[e[:, 0]] != labels[e[:, 1]])
    # each undirected edge appears twice in the double sum
    return float(data_cost[np.arange(len(labels)), labels].sum() + 2.0 * lambda_pairwise * cut)


def _greedy_coloring(mesh):
    key = "vertex_coloring"
    if key in mesh._cache:
        return mesh._cache[key]
    adj = mesh.adjacency
    color = np.full(mesh.n_vertices, -1, dtype=np.int64)
    for i in range(mesh.n_vertices):
        used = set(color[adj.neighbors_of(i)].tolist())
        c = 0
        while c in used:
            c += 1
        color[i] = c
    mesh._cache[key] = color
    return color


def smooth_labels_mrf(mesh, labels, features, lambda_pairwise=None, centroids=None,
                      max_sweeps=50, return_energies=False):
    """Potts-model label cleanup by iterated conditional modes.

    The data cost of label ``L`` at vertex ``p`` is the squared feature
    distance to the centroid of ``L`` (centroids of the input labelling
    unless given). Vertices of one colour class of a greedy graph colouring
    share no edge, so each class is updated at once without ever raising
    the energy. ``lambda_pairwise=None`` uses the mean data cost of the
    input labelling.
    """
    X = np.asarray(getattr(features, "features", features), float)
    labels = np.asarray(labels, dtype=np.int64).copy()
    K = int(labels.max()) + 1
    cent = label_centroids(X, labels, K) if centroids is None else np.asarray(centroids, float)
    K = len(cent)
    D = ((X[:, None, :] - cent[None]) ** 2).sum(axis=2)
    if lambda_pairwise is None:
        lambda_pairwise = float(D[np.arange(len(labels)), labels].mean())
    lam = float(lambda_pairwise)
    adj = mesh.adjacency
    owner = np.repeat(np.arange(mesh.n_vertices), adj.valence)
    color = _greedy_coloring(mesh)
    classes = [np.flatnonzero(color == c) for c in range(int(color.max()) + 1)]
    energies = [potts_energy(mesh, labels, D, lam)]
    for _ in range(max_sweeps):
        changed = 0
        for cls in classes:
            # disagreement counts for every label at every vertex
            nb_lab = labels[adj.neighbors]
            counts = np.zeros((mesh.n_vertices, K))
            np.add.at(counts, (owner, nb_lab), 1.0)
            disagree = adj.valence[:, None] - counts
            local = D[cls] + 2.0 * lam * disagree[cls]
            cur = local[np.arange(len(cls)), labels[cls]]
            best = local.argmin(axis=1)
            better = local[np.arange(len(cls)), best] < cur - 1e-12 * np.maximum(np.abs(cur), 1.0)
            labels[cls[better]] = best[better]
            changed += int(better.sum())
        energies.append(potts_energy(mesh, labels, D, lam))
        if not changed:
            break
    if return_energies:
        return labels, energies
    return labels


def group_values(labels, vertex_albedos):
    """Median albedo per group; empty groups are dropped and labels compacted."""
    labels = np.asarray(labels, dtype=np.int64)
    used = np.unique(labels)
    remap = np.full(int(labels.max()) + 1, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    new = remap[labels]
    vals = np.array([np.median(np.asarray(vertex_albedos)[new == k]) for k in range(len(used))])
    return new, vals


# estimator -------------------------------------------------------------


class AlbedoEstimator(BaseEstimator):
    """Estimate an :class:`AlbedoModel` from a mesh and its shading views.

    ``mode="global"`` inverts the shading model over every observation;
    ``mode="grouped"`` estimates per-vertex albedo, picks the group count
    by PCA, clusters with K-means and smooths the labels.

    Attributes after ``fit``: ``model_``, ``vertex_albedo_``,
    ``flagged_vertices_``, ``n_groups_``, ``labels_``, ``features_``.
    """

    def __init__(self, mode="global", variance_target=0.95, kappa=None, n_groups=None,
                 lambda_pairwise=None, low=0.02, high=0.98, nl_floor=0.1, seed=0):
        self.mode = mode
        self.variance_target = variance_target
        self.kappa = kappa
        self.n_groups = n_groups
        self.lambda_pairwise = lambda_pairwise
        self.low = low
        self.high = high
        self.nl_floor = nl_floor
        self.seed = seed

    def fit(self, mesh, views, light=LightModel(), visibility=None):
        if self.mode not in ("global", "grouped"):
            raise AlbedoError(f"unknown mode {self.mode!r}")
        mesh = compute_vertex_normals(mesh)
        if visibility is None:
            visibility = compute_visibility(mesh, views)
        kw = dict(low=self.low, high=self.high, nl_floor=self.nl_floor)
        if self.mode == "global":
            value = estimate_global_albedo(mesh, views, visibility, light, **kw)
            self.model_ = AlbedoModel.global_(value)
            self.n_groups_ = 1
            self.labels_ = np.zeros(mesh.n_vertices, dtype=np.int64)
            return self
        va, flagged = estimate_vertex_albedo(mesh, views, visibility, light, **kw)
        self.vertex_albedo_ = va
        self.flagged_vertices_ = flagged
        feats = albedo_features(mesh.vertices, va, self.kappa)
        self.features_ = feats
        K = self.n_groups or select_group_count(feats, self.variance_target)
        labels, cent = kmeans_cluster(feats, K, seed=self.seed, return_centroids=True)
        if K > 1:
            labels = smooth_labels_mrf(mesh, labels, feats, self.lambda_pairwise, centroids=cent)
        labels, values = group_values(labels, va)
        self.n_groups_ = len(values)
        self.labels_ = labels
        self.model_ = AlbedoModel.grouped(labels, values)
        return self

    def predict(self, n_vertices=None):
        """Per-vertex ``c rho`` of the fitted model."""
        n = len(self.labels_) if n_vertices is None else n_vertices
        return self.model_.vertex_values(n)
