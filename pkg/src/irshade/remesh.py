"""Incremental isotropic remeshing.

Each iteration splits edges longer than 4/3 L, collapses edges shorter
than 4/5 L, flips edges to pull valences towards 6 (4 on the boundary),
relaxes vertices tangentially and projects them back onto the input
surface. ``L`` follows from the requested vertex count and is corrected
by feedback on the running count.

Batches of operations are chosen greedily so that no two touch the same
faces; each batch is then applied with array operations.
"""

from __future__ import annotations

import logging

import numpy as np
from numba import njit, types
from numba.typed import Dict

from .mesh import MeshError, TriangleMesh, closest_points_on_mesh, compute_vertex_normals

log = logging.getLogger(__name__)


def _edge_topology(faces):
    """Unique edges, the (up to) two faces of each and every face's edge ids."""
    he = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    he.sort(axis=1)
    n = int(faces.max(initial=0)) + 1
    keys, inv = np.unique(he[:, 0] * n + he[:, 1], return_inverse=True)
    edges = np.column_stack([keys // n, keys % n])
    F = len(faces)
    fid = np.tile(np.arange(F), 3)
    order = np.argsort(inv, kind="stable")
    counts = np.bincount(inv, minlength=len(edges))
    if counts.max(initial=0) > 2:
        from .mesh import NonManifoldError
        raise NonManifoldError(edges[counts > 2])
    ef = np.full((len(edges), 2), -1, dtype=np.int64)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ef[:, 0] = fid[order[start]]
    two = counts == 2
    ef[two, 1] = fid[order[start[two] + 1]]
    face_edges = inv.reshape(3, F).T.copy()
    return edges, ef, face_edges


def _csr(n, pairs):
    """Sorted neighbour lists from an (E, 2) array of undirected pairs."""
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both = both[np.argsort(both[:, 0] * n + both[:, 1])]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, both[:, 0] + 1, 1)
    return np.cumsum(ptr), both[:, 1].copy()


def _vertex_faces(n, faces):
    flat = faces.ravel()
    order = np.argsort(flat, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, flat + 1, 1)
    return np.cumsum(ptr), (order // 3).astype(np.int64)


# split ------------------------------------------------------------------


@njit(cache=True)
def _select_splits(order, ef, n_faces):
    used = np.zeros(n_faces, dtype=np.bool_)
    out = np.empty(len(order), dtype=np.int64)
    k = 0
    for e in order:
        f0, f1 = ef[e, 0], ef[e, 1]
        if used[f0] or (f1 >= 0 and used[f1]):
            continue
        used[f0] = True
        if f1 >= 0:
            used[f1] = True
        out[k] = e
        k += 1
    return out[:k]


def _split_long_edges(V, F, high):
    n_split = 0
    while True:
        edges, ef, _ = _edge_topology(F)
        length = np.linalg.norm(V[edges[:, 0]] - V[edges[:, 1]], axis=1)
        cand = np.flatnonzero(length > high)
        if not len(cand):
            return V, F, n_split
        cand = cand[np.argsort(-length[cand], kind="stable")]
        chosen = _select_splits(cand, ef, len(F))
        a, b = edges[chosen, 0], edges[chosen, 1]
        mid = np.arange(len(V), len(V) + len(chosen))
        V = np.concatenate([V, 0.5 * (V[a] + V[b])])
        keep = np.ones(len(F), dtype=bool)
        new_faces = []
        for side in range(2):
            fs = ef[chosen, side]
            has = fs >= 0
            fs, aa, bb, mm = fs[has], a[has], b[has], mid[has]
            tri = F[fs]
            # rotate each face so the split edge is its (0, 1) edge
            pos_a = np.argmax(tri == aa[:, None], axis=1)
            pos_b = np.argmax(tri == bb[:, None], axis=1)
            forward = (pos_a + 1) % 3 == pos_b
            first = np.where(forward, pos_a, pos_b)
            rows = np.arange(len(fs))[:, None]
            rot = tri[rows, (first[:, None] + np.arange(3)) % 3]
            p, q, r = rot[:, 0], rot[:, 1], rot[:, 2]
            new_faces.append(np.column_stack([p, mm, r]))
            new_faces.append(np.column_stack([mm, q, r]))
            keep[fs] = False
        F = np.concatenate([F[keep]] + new_faces)
        n_split += len(chosen)


# collapse -----------------------------------------------------------------


@njit(cache=True)
def _select_collapses(order, ea, eb, V, F, fnormal, nptr, nbrs, fptr, vfaces, boundary,
                      boundary_edge, corner, high, n_verts):
    locked = np.zeros(n_verts, dtype=np.bool_)
    keep_v = np.empty(len(order), dtype=np.int64)
    drop_v = np.empty(len(order), dtype=np.int64)
    newpos = np.empty((len(order), 3))
    k = 0
    for e in order:
        a, b = ea[e], eb[e]
        if locked[a] or locked[b]:
            continue
        # where the merged vertex goes
        if boundary_edge[e]:
            if corner[a] and corner[b]:
                continue
            if corner[a]:
                p = V[a].copy()
            elif corner[b]:
                p = V[b].copy()
            else:
                p = 0.5 * (V[a] + V[b])
        elif boundary[a] and boundary[b]:
            continue
        elif boundary[a]:
            p = V[a].copy()
        elif boundary[b]:
            p = V[b].copy()
        else:
            p = 0.5 * (V[a] + V[b])
        # link condition: shared neighbours are exactly the opposite vertices
        common = 0
        low_valence = False
        for ia in range(nptr[a], nptr[a + 1]):
            w = nbrs[ia]
            for ib in range(nptr[b], nptr[b + 1]):
                if nbrs[ib] == w:
                    common += 1
                    if not boundary[w] and nptr[w + 1] - nptr[w] <= 3:
                        low_valence = True
        if common != (1 if boundary_edge[e] else 2) or low_valence:
            continue
        # merged vertex keeps valence >= 3
        if (nptr[a + 1] - nptr[a]) + (nptr[b + 1] - nptr[b]) - 2 - common < 3:
            continue
        # no new long edge
        ok = True
        for v in (a, b):
            for ii in range(nptr[v], nptr[v + 1]):
                w = nbrs[ii]
                if w == a or w == b:
                    continue
                d = p - V[w]
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > high * high:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        # surviving faces must not flip or degenerate
        for v in (a, b):
            for ii in range(fptr[v], fptr[v + 1]):
                f = vfaces[ii]
                has_a = F[f, 0] == a or F[f, 1] == a or F[f, 2] == a
                has_b = F[f, 0] == b or F[f, 1] == b or F[f, 2] == b
                if has_a and has_b:
                    continue
                q0 = V[F[f, 0]].copy()
                q1 = V[F[f, 1]].copy()
                q2 = V[F[f, 2]].copy()
                for c in range(3):
                    if F[f, c] == v:
                        if c == 0:
                            q0 = p
                        elif c == 1:
                            q1 = p
                        else:
                            q2 = p
                u = q1 - q0
                t = q2 - q0
                cx = u[1] * t[2] - u[2] * t[1]
                cy = u[2] * t[0] - u[0] * t[2]
                cz = u[0] * t[1] - u[1] * t[0]
                norm = np.sqrt(cx * cx + cy * cy + cz * cz)
                dot = cx * fnormal[f, 0] + cy * fnormal[f, 1] + cz * fnormal[f, 2]
                if norm <= 1e-12 or dot < 0.2 * norm:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        for v in (a, b):
            locked[v] = True
            for ii in range(nptr[v], nptr[v + 1]):
                locked[nbrs[ii]] = True
        keep_v[k] = a
        drop_v[k] = b
        newpos[k] = p
        k += 1
    return keep_v[:k], drop_v[:k], newpos[:k]


def _boundary_corners(V, edges, boundary_edge, n, angle_deg=30.0):
    """Boundary vertices whose boundary turns by more than ``angle_deg``."""
    corner = np.zeros(n, dtype=bool)
    be = edges[boundary_edge]
    if not len(be):
        return corner
    ptr, nbrs = _csr(n, be)
    deg = np.diff(ptr)
    corner[deg > 2] = True
    two = np.flatnonzero(deg == 2)
    u = V[nbrs[ptr[two]]] - V[two]
    w = V[nbrs[ptr[two] + 1]] - V[two]
    cosang = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
    # a straight boundary has an angle of 180 degrees between the two edges
    corner[two[cosang > -np.cos(np.deg2rad(angle_deg))]] = True
    return corner


def _compact(V, F):
    used = np.zeros(len(V), dtype=bool)
    used[F.ravel()] = True
    remap = np.full(len(V), -1, dtype=np.int64)
    remap[used] = np.arange(used.sum())
    return V[used], remap[F]


def _unit_face_normals(V, F):
    c = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    return c / np.maximum(np.linalg.norm(c, axis=1), 1e-300)[:, None]


def _collapse_short_edges(V, F, low, high, max_passes=20):
    n_total = 0
    for _ in range(max_passes):
        edges, ef, _ = _edge_topology(F)
        length = np.linalg.norm(V[edges[:, 0]] - V[edges[:, 1]], axis=1)
        cand = np.flatnonzero(length < low)
        if not len(cand):
            break
        cand = cand[np.argsort(length[cand], kind="stable")]
        n = len(V)
        boundary_edge = ef[:, 1] < 0
        boundary = np.zeros(n, dtype=bool)
        boundary[edges[boundary_edge].ravel()] = True
        corner = _boundary_corners(V, edges, boundary_edge, n)
        nptr, nbrs = _csr(n, edges)
        fptr, vfaces = _vertex_faces(n, F)
        ka, kb, pos = _select_collapses(cand, edges[:, 0].copy(), edges[:, 1].copy(), V, F,
                                        _unit_face_normals(V, F), nptr, nbrs, fptr, vfaces, boundary,
                                        boundary_edge, corner, high, n)
        if not len(ka):
            break
        V = V.copy()
        V[ka] = pos
        remap = np.arange(n)
        remap[kb] = ka
        F = remap[F]
        degenerate = (F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 2] == F[:, 0])
        V, F = _compact(V, F[~degenerate])
        n_total += len(ka)
    return V, F, n_total


# flip ---------------------------------------------------------------------


@njit(cache=True)
def _select_flips(cand, ea, eb, ef, V, F, nptr, nbrs, valence, target, n_faces):
    used = np.zeros(n_faces, dtype=np.bool_)
    added = Dict.empty(key_type=types.int64, value_type=types.boolean)
    n = len(valence)
    out = np.empty(len(cand), dtype=np.int64)
    opp = np.empty((len(cand), 2), dtype=np.int64)
    k = 0
    for e in cand:
        f0, f1 = ef[e, 0], ef[e, 1]
        if used[f0] or used[f1]:
            continue
        a, b = ea[e], eb[e]
        c = -1
        d = -1
        for j in range(3):
            if F[f0, j] != a and F[f0, j] != b:
                c = F[f0, j]
            if F[f1, j] != a and F[f1, j] != b:
                d = F[f1, j]
        before = (abs(valence[a] - target[a]) + abs(valence[b] - target[b])
                  + abs(valence[c] - target[c]) + abs(valence[d] - target[d]))
        after = (abs(valence[a] - 1 - target[a]) + abs(valence[b] - 1 - target[b])
                 + abs(valence[c] + 1 - target[c]) + abs(valence[d] + 1 - target[d]))
        if after >= before or valence[a] <= 3 or valence[b] <= 3:
            continue
        # edge c-d must not already exist
        exists = False
        for ii in range(nptr[c], nptr[c + 1]):
            if nbrs[ii] == d:
                exists = True
                break
        lo, hi = min(c, d), max(c, d)
        if exists or (lo * n + hi) in added:
            continue
        # orient: make f0 = (a, b, c) in cyclic order
        pa = 0
        for j in range(3):
            if F[f0, j] == a:
                pa = j
        if F[f0, (pa + 1) % 3] != b:
            a, b = b, a
        # new faces (d, b, c) and (a, d, c) keep the orientation of the quad
        n_old = np.cross(V[b] - V[a], V[c] - V[a]) + np.cross(V[a] - V[b], V[d] - V[b])
        n1 = np.cross(V[b] - V[d], V[c] - V[d])
        n2 = np.cross(V[d] - V[a], V[c] - V[a])
        l_old = np.sqrt(np.sum(n_old * n_old))
        l1 = np.sqrt(np.sum(n1 * n1))
        l2 = np.sqrt(np.sum(n2 * n2))
        if l1 <= 1e-12 or l2 <= 1e-12:
            continue
        if np.sum(n1 * n_old) < 0.5 * l1 * l_old or np.sum(n2 * n_old) < 0.5 * l2 * l_old:
            continue
        used[f0] = True
        used[f1] = True
        added[lo * n + hi] = True
        valence[a] -= 1
        valence[b] -= 1
        valence[c] += 1
        valence[d] += 1
        out[k] = e
        opp[k, 0] = c
        opp[k, 1] = d
        k += 1
    return out[:k], opp[:k]


def _flip_edges(V, F):
    edges, ef, _ = _edge_topology(F)
    n = len(V)
    interior = np.flatnonzero(ef[:, 1] >= 0)
    boundary = np.zeros(n, dtype=bool)
    boundary[edges[ef[:, 1] < 0].ravel()] = True
    target = np.where(boundary, 4, 6).astype(np.int64)
    nptr, nbrs = _csr(n, edges)
    valence = np.diff(nptr).astype(np.int64)
    chosen, opp = _select_flips(interior, edges[:, 0].copy(), edges[:, 1].copy(), ef, V, F,
                                nptr, nbrs, valence, target, len(F))
    if not len(chosen):
        return F, 0
    F = F.copy()
    f0, f1 = ef[chosen, 0], ef[chosen, 1]
    a, b = edges[chosen, 0], edges[chosen, 1]
    c, d = opp[:, 0], opp[:, 1]
    # orientation: a -> b must run forward inside f0
    tri = F[f0]
    pos_a = np.argmax(tri == a[:, None], axis=1)
    fwd = tri[np.arange(len(f0)), (pos_a + 1) % 3] == b
    a2 = np.where(fwd, a, b)
    b2 = np.where(fwd, b, a)
    F[f0] = np.column_stack([d, b2, c])
    F[f1] = np.column_stack([a2, d, c])
    return F, len(chosen)


# relaxation ---------------------------------------------------------------


def _tangential_relax(V, F, fixed):
    m = compute_vertex_normals(TriangleMesh(V, F))
    edges = m.edges
    nptr, nbrs = _csr(len(V), edges)
    deg = np.diff(nptr)
    owner = np.repeat(np.arange(len(V)), deg)
    centroid = np.zeros_like(V)
    np.add.at(centroid, owner, V[nbrs])
    centroid /= np.maximum(deg, 1)[:, None]
    move = centroid - V
    n = m.normals
    move -= n * np.einsum("ij,ij->i", move, n)[:, None]
    move[fixed] = 0.0
    return V + move


def target_edge_length(mesh, target_vertex_count):
    """Edge length of an equilateral tessellation with the requested count."""
    return float(np.sqrt(2.0 * mesh.surface_area() / (np.sqrt(3.0) * target_vertex_count)))


def edge_length_cv(mesh):
    """Coefficient of variation of the edge lengths."""
    length = mesh.edge_lengths()
    return float(length.std() / length.mean())


def isotropic_remesh(mesh, target_vertex_count, iterations=10, edge_length=None, project=True,
                     feedback_iterations=None):
    """Remesh towards uniform edges and roughly ``target_vertex_count`` vertices.

    ``edge_length`` overrides the length derived from the count; while
    ``feedback_iterations`` (default: all but the last two) remain, the
    length is rescaled by ``sqrt(n / target)`` after each iteration so the
    count settles near the target. Vertices are projected back onto the
    input surface after each relaxation; boundary vertices stay on the
    input boundary.

    Raises :class:`~irshade.mesh.NonManifoldError` listing the offending
    edges when the input is not manifold.
    """
    if target_vertex_count < 4:
        raise MeshError("target_vertex_count must be at least 4")
    mesh.check_manifold()
    reference = compute_vertex_normals(mesh)
    L = float(edge_length) if edge_length is not None else target_edge_length(mesh, target_vertex_count)
    if feedback_iterations is None:
        feedback_iterations = max(iterations - 2, 0) if edge_length is None else 0
    V = mesh.vertices.copy()
    F = mesh.faces.copy()
    for it in range(iterations):
        V, F, ns = _split_long_edges(V, F, 4.0 / 3.0 * L)
        V, F, nc = _collapse_short_edges(V, F, 0.8 * L, 4.0 / 3.0 * L)
        nf = 0
        for _ in range(3):
            F, k = _flip_edges(V, F)
            nf += k
            if not k:
                break
        edges, ef, _ = _edge_topology(F)
        fixed = np.zeros(len(V), dtype=bool)
        fixed[edges[ef[:, 1] < 0].ravel()] = True
        V = _tangential_relax(V, F, fixed)
        if project:
            free = ~fixed
            V[free] = closest_points_on_mesh(reference, V[free])[0]
        log.debug("remesh iteration %d: L=%.4g split=%d collapse=%d flip=%d n=%d",
                  it, L, ns, nc, nf, len(V))
        if it < feedback_iterations:
            L *= np.sqrt(len(V) / target_vertex_count)
    return compute_vertex_normals(TriangleMesh(V, F))
