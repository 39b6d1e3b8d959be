"""Triangle mesh container, connectivity and normal computation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


class NonManifoldError(MeshError):
    def __init__(self, edges):
        self.edges = [tuple(int(v) for v in e) for e in edges]
        shown = ", ".join(f"({a}, {b})" for a, b in self.edges[:10])
        more = "" if len(self.edges) <= 10 else f" ... (+{len(self.edges) - 10})"
        super().__init__(f"non-manifold edges: {shown}{more}")


@dataclass(frozen=True)
class Adjacency:
    """CSR-style vertex connectivity.

    ``neighbors[nbr_ptr[i]:nbr_ptr[i+1]]`` are the vertices sharing an edge
    with ``i`` (sorted), ``faces[face_ptr[i]:face_ptr[i+1]]`` the incident
    faces and ``corner`` the position of ``i`` inside each of those faces.
    """

    nbr_ptr: np.ndarray
    neighbors: np.ndarray
    face_ptr: np.ndarray
    faces: np.ndarray
    corner: np.ndarray

    def neighbors_of(self, i):
        return self.neighbors[self.nbr_ptr[i]:self.nbr_ptr[i + 1]]

    def faces_of(self, i):
        return self.faces[self.face_ptr[i]:self.face_ptr[i + 1]]

    @property
    def valence(self):
        return np.diff(self.nbr_ptr)


@dataclass(eq=False)
class TriangleMesh:
    """Indexed triangle mesh in millimetres.

    Faces are counter-clockwise seen from outside. ``normals`` may be left
    as ``None``; use :func:`compute_vertex_normals` to fill them.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise MeshError("normals and vertices differ in length")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = self.faces
            bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if bad.any():
                raise MeshError(f"{int(bad.sum())} faces repeat a vertex index")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def copy(self):
        return TriangleMesh(self.vertices.copy(), self.faces.copy(),
                            None if self.normals is None else self.normals.copy())

    def with_vertices(self, vertices, normals=None):
        """Same topology, new positions (connectivity cache is shared)."""
        out = TriangleMesh.__new__(TriangleMesh)
        out.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        out.faces = self.faces
        out.normals = normals
        out._cache = {k: v for k, v in self._cache.items() if k in _TOPOLOGY_KEYS}
        return out

    # topology ---------------------------------------------------------

    @property
    def edges(self):
        """Unique undirected edges, shape (E, 2), ``e[:, 0] < e[:, 1]``."""
        if "edges" not in self._cache:
            self._build_edges()
        return self._cache["edges"]

    @property
    def edge_face_count(self):
        if "edges" not in self._cache:
            self._build_edges()
        return self._cache["edge_face_count"]

    def _build_edges(self):
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        n = max(self.n_vertices, 1)
        keys, counts = np.unique(e[:, 0] * n + e[:, 1], return_counts=True)
        self._cache["edges"] = np.column_stack([keys // n, keys % n])
        self._cache["edge_face_count"] = counts

    @property
    def adjacency(self) -> Adjacency:
        if "adjacency" not in self._cache:
            self._cache["adjacency"] = _build_adjacency(self.n_vertices, self.faces, self.edges)
        return self._cache["adjacency"]

    def boundary_vertices(self):
        """Boolean mask of vertices on an edge used by a single face."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.edge_face_count == 1].ravel()] = True
        return mask

    def non_manifold_edges(self):
        return self.edges[self.edge_face_count > 2]

    def check_manifold(self):
        bad = self.non_manifold_edges()
        if len(bad):
            raise NonManifoldError(bad)

    def one_ring(self, i):
        """Neighbours of ``i`` ordered counter-clockwise about the outward normal.

        For a boundary vertex the ring is an open fan starting at the
        boundary. The order follows face winding: each consecutive pair
        ``(a, b)`` closes a face ``(i, a, b)``.
        """
        adj = self.adjacency
        fids = adj.faces_of(i)
        cs = adj.corner[adj.face_ptr[i]:adj.face_ptr[i + 1]]
        nxt = {}
        for fi, c in zip(fids, cs):
            f = self.faces[fi]
            nxt[int(f[(c + 1) % 3])] = int(f[(c + 2) % 3])
        if not nxt:
            return []
        targets = set(nxt.values())
        starts = [a for a in nxt if a not in targets]
        start = starts[0] if starts else min(nxt)
        ring = [start]
        cur = start
        while cur in nxt and len(ring) <= len(nxt):
            cur = nxt[cur]
            if cur == start:
                break
            ring.append(cur)
        return ring

    # geometry ---------------------------------------------------------

    def face_cross(self, vertices=None):
        """Unnormalised face normals ``(p1 - p0) x (p2 - p0)`` (twice the area)."""
        v = self.vertices if vertices is None else vertices
        p0, p1, p2 = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return np.cross(p1 - p0, p2 - p0)

    def face_normals(self):
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return np.divide(c, n, out=np.zeros_like(c), where=n > 0)

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def surface_area(self):
        return float(self.face_areas().sum())

    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def mean_edge_length(self):
        return float(self.edge_lengths().mean()) if len(self.faces) else 0.0

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def vertex_sum(self, per_face):
        """Scatter-add a per-face array onto its three corner vertices."""
        out = np.zeros((self.n_vertices,) + per_face.shape[1:])
        for c in range(3):
            np.add.at(out, self.faces[:, c], per_face)
        return out


_TOPOLOGY_KEYS = ("edges", "edge_face_count", "adjacency")


def _build_adjacency(n, faces, edges):
    both = np.concatenate([edges, edges[:, ::-1]])
    both = both[np.argsort(both[:, 0] * max(n, 1) + both[:, 1])]
    nbr_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(nbr_ptr, both[:, 0] + 1, 1)
    nbr_ptr = np.cumsum(nbr_ptr)

    flat = faces.ravel()
    order = np.argsort(flat, kind="stable")
    face_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(face_ptr, flat + 1, 1)
    face_ptr = np.cumsum(face_ptr)
    return Adjacency(nbr_ptr, both[:, 1].copy(), face_ptr, order // 3, order % 3)


def compute_vertex_normals(mesh, return_flagged=False):
    """Area-weighted vertex normals.

    Each vertex normal is the normalised sum of the cross products of its
    incident faces, which weights every face by twice its area. Vertices
    whose whole umbrella is degenerate are flagged and borrow the mean
    normal of their neighbours (``+z`` as a last resort).
    """
    acc = np.zeros((mesh.n_vertices, 3))
    fc = mesh.face_cross()
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], fc)
    norm = np.linalg.norm(acc, axis=1)
    flagged = np.flatnonzero(norm <= 1e-300)
    normals = np.zeros_like(acc)
    ok = norm > 1e-300
    normals[ok] = acc[ok] / norm[ok, None]
    if len(flagged):
        adj = mesh.adjacency
        for i in flagged:
            nb = adj.neighbors_of(i)
            s = normals[nb].sum(axis=0) if len(nb) else np.zeros(3)
            ln = np.linalg.norm(s)
            normals[i] = s / ln if ln > 0 else (0.0, 0.0, 1.0)
    out = mesh.with_vertices(mesh.vertices, normals)
    if return_flagged:
        return out, flagged
    return out


def with_normals(mesh):
    return mesh if mesh.normals is not None else compute_vertex_normals(mesh)


def neighbor_mean(mesh, values):
    """Uniform average of ``values`` over each vertex's one-ring."""
    adj = mesh.adjacency
    owner = np.repeat(np.arange(mesh.n_vertices), adj.valence)
    acc = np.zeros((mesh.n_vertices,) + values.shape[1:])
    np.add.at(acc, owner, values[adj.neighbors])
    val = np.maximum(adj.valence, 1).reshape((-1,) + (1,) * (values.ndim - 1))
    return acc / val


def laplacian_smooth(mesh, iterations, step=0.5, fixed=None):
    """Uniform-weight (umbrella) Laplacian smoothing of vertex positions."""
    v = mesh.vertices.copy()
    keep = np.zeros(mesh.n_vertices, bool) if fixed is None else np.asarray(fixed, bool)
    for _ in range(int(iterations)):
        upd = step * (neighbor_mean(mesh, v) - v)
        upd[keep] = 0.0
        v += upd
    return compute_vertex_normals(mesh.with_vertices(v))


def laplacian_smooth_field(mesh, values, iterations, step=0.5, fixed=None):
    """Umbrella smoothing of a per-vertex field over mesh connectivity."""
    x = np.array(values, dtype=np.float64)
    keep = np.zeros(mesh.n_vertices, bool) if fixed is None else np.asarray(fixed, bool)
    for _ in range(int(iterations)):
        upd = step * (neighbor_mean(mesh, x) - x)
        upd[keep] = 0.0
        x = x + upd
    return x


# primitives -----------------------------------------------------------


_ICO_V = None


def _icosahedron():
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v, f


def icosphere(frequency=8, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere: every icosahedron face split into ``frequency**2`` triangles.

    Produces ``10 * frequency**2 + 2`` vertices.
    """
    n = int(frequency)
    if n < 1:
        raise ValueError("frequency must be >= 1")
    base_v, base_f = _icosahedron()
    # barycentric lattice on one face: (i, j) with i + j <= n
    ij = [(i, j) for i in range(n + 1) for j in range(n + 1 - i)]
    index = {p: k for k, p in enumerate(ij)}
    ij = np.array(ij, dtype=np.float64)
    tris = []
    for i in range(n):
        for j in range(n - i):
            a, b, c = index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]
            tris.append((a, b, c))
            if i + j < n - 1:
                d = index[(i + 1, j + 1)]
                tris.append((b, d, c))
    tris = np.array(tris)
    w1, w2 = ij[:, 0] / n, ij[:, 1] / n
    w0 = 1.0 - w1 - w2
    pts, faces = [], []
    offset = 0
    for f in base_f:
        a, b, c = base_v[f[0]], base_v[f[1]], base_v[f[2]]
        p = w0[:, None] * a + w1[:, None] * b + w2[:, None] * c
        pts.append(p)
        faces.append(tris + offset)
        offset += len(p)
    pts = np.concatenate(pts)
    faces = np.concatenate(faces)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    # weld duplicated lattice points along icosahedron edges
    key = np.round(pts * 1e9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    verts = pts[first[order]]
    faces = remap[inverse[faces]]
    # the lattice triangles follow the icosahedron winding, which is outward
    verts = verts * float(radius) + np.asarray(center, dtype=np.float64)
    return compute_vertex_normals(TriangleMesh(verts, faces))


def grid_mesh(nx, ny, size=(1.0, 1.0), origin=(0.0, 0.0), z=0.0):
    """Regular ``nx`` x ``ny`` vertex grid in a z = const plane, normals +z."""
    xs = np.linspace(origin[0], origin[0] + size[0], nx)
    ys = np.linspace(origin[1], origin[1] + size[1], ny)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, float(z))])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return compute_vertex_normals(TriangleMesh(verts, faces))


# closest points -------------------------------------------------------


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to points ``p`` (all (n, 3)).

    Region-based test from Ericson, *Real-Time Collision Detection* 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def closest_points_on_mesh(mesh, points, k=8):
    """Closest surface points, their distances and face ids.

    Candidate faces are those incident to the ``k`` nearest mesh vertices,
    which is exact for well-shaped meshes whose faces are small compared
    with the query distance scale.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tree = mesh._cache.get("vertex_tree")
    if tree is None:
        tree = cKDTree(mesh.vertices)
        mesh._cache["vertex_tree"] = tree
    k = min(k, mesh.n_vertices)
    _, nn = tree.query(points, k=k)
    nn = nn.reshape(len(points), k)
    adj = mesh.adjacency
    best_d = np.full(len(points), np.inf)
    best_p = np.zeros_like(points)
    best_f = np.full(len(points), -1, dtype=np.int64)
    val = np.diff(adj.face_ptr)
    max_val = int(val.max()) if len(val) else 0
    f = mesh.faces
    v = mesh.vertices
    for col in range(k):
        vid = nn[:, col]
        for slot in range(max_val):
            has = val[vid] > slot
            if not has.any():
                break
            q = np.flatnonzero(has)
            fid = adj.faces[adj.face_ptr[vid[q]] + slot]
            cp = closest_point_on_triangles(points[q], v[f[fid, 0]], v[f[fid, 1]], v[f[fid, 2]])
            d = np.linalg.norm(points[q] - cp, axis=1)
            better = d < best_d[q]
            qq = q[better]
            best_d[qq] = d[better]
            best_p[qq] = cp[better]
            best_f[qq] = fid[better]
    return best_p, best_d, best_f
