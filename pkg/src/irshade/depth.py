"""Single-view depth maps: joint-bilateral smoothing and meshing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import MeshError, TriangleMesh, compute_vertex_normals


class DepthError(ValueError):
    pass


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel planar depth ``z`` in millimetres; 0 marks invalid pixels."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise DepthError("depth maps are 2D arrays")
        if not np.all(np.isfinite(d)):
            raise DepthError("non-finite depth values")
        if np.any(d < 0):
            raise DepthError("negative depth values")
        object.__setattr__(self, "depth", d)

    @property
    def valid(self):
        return self.depth > 0

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def shape(self):
        return self.depth.shape


def _shift(a, dy, dx, fill):
    """``out[y, x] = a[y + dy, x + dx]`` with ``fill`` outside the array."""
    H, W = a.shape
    out = np.full_like(a, fill)
    ys = slice(max(0, -dy), min(H, H - dy))
    xs = slice(max(0, -dx), min(W, W - dx))
    yd = slice(max(0, dy), min(H, H + dy))
    xd = slice(max(0, dx), min(W, W + dx))
    out[ys, xs] = a[yd, xd]
    return out


def joint_bilateral_depth_filter(depth, guide, spatial_sigma=2.0, range_sigma=0.05,
                                 depth_sigma=30.0, radius=None):
    """Edge-aware depth smoothing guided by an intensity image.

    Each valid pixel becomes the weighted mean of the valid depths in a
    ``(2 radius + 1)^2`` window, with weights

        exp(-|dp|^2 / 2 s^2) * exp(-(I_p - I_q)^2 / 2 r^2) * exp(-(D_p - D_q)^2 / 2 t^2)

    for ``s = spatial_sigma`` (pixels), ``r = range_sigma`` (intensity) and
    ``t = depth_sigma`` (mm). Infinite sigmas switch the term off. Invalid
    pixels stay invalid. ``radius`` defaults to ``ceil(3 s)``.
    """
    if not isinstance(depth, DepthMap):
        depth = DepthMap(depth)
    g = np.asarray(getattr(guide, "intensity", guide), dtype=np.float64)
    if g.shape != depth.shape:
        raise DepthError(f"guide shape {g.shape} differs from depth shape {depth.shape}")
    if not spatial_sigma > 0 or not range_sigma > 0 or not depth_sigma > 0:
        raise DepthError("filter sigmas must be positive")
    r = int(np.ceil(3.0 * spatial_sigma)) if radius is None else int(radius)
    D = depth.depth
    valid = depth.valid
    num = np.zeros_like(D)
    den = np.zeros_like(D)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            w = np.exp(-(dx * dx + dy * dy) / (2.0 * spatial_sigma ** 2))
            Dq = _shift(D, dy, dx, 0.0)
            Vq = _shift(valid, dy, dx, False)
            wq = np.where(Vq, w, 0.0)
            if np.isfinite(range_sigma):
                Iq = _shift(g, dy, dx, 0.0)
                wq = wq * np.exp(-((g - Iq) ** 2) / (2.0 * range_sigma ** 2))
            if np.isfinite(depth_sigma):
                wq = wq * np.exp(-((D - Dq) ** 2) / (2.0 * depth_sigma ** 2))
            num += wq * Dq
            den += wq
    out = np.zeros_like(D)
    ok = valid & (den > 0)
    out[ok] = num[ok] / den[ok]
    return DepthMap(out)


def depth_map_to_mesh(depth, intrinsics, threshold=50.0):
    """Back-project valid pixels and connect 4-neighbourhoods into triangles.

    Each pixel quad yields up to two triangles; a triangle is kept when its
    three pixels are valid and their depths differ by at most
    ``threshold`` mm. Faces wind towards the camera.
    """
    if not isinstance(depth, DepthMap):
        depth = DepthMap(depth)
    if depth.shape != intrinsics.shape:
        raise DepthError(f"depth shape {depth.shape} differs from intrinsics {intrinsics.shape}")
    valid = depth.valid
    if valid.sum() < 3:
        raise MeshError("depth map has fewer than 3 valid pixels; mesh would be empty")
    H, W = depth.shape
    z = depth.depth
    index = np.full((H, W), -1, dtype=np.int64)
    index[valid] = np.arange(valid.sum())
    v, u = np.nonzero(valid)
    zz = z[valid]
    verts = np.column_stack([(u - intrinsics.cx) / intrinsics.fx * zz,
                             (v - intrinsics.cy) / intrinsics.fy * zz, zz])
    p00, p10 = index[:-1, :-1], index[:-1, 1:]
    p01, p11 = index[1:, :-1], index[1:, 1:]
    z00, z10, z01, z11 = z[:-1, :-1], z[:-1, 1:], z[1:, :-1], z[1:, 1:]
    faces = []
    for tri, zs in (((p00, p01, p10), (z00, z01, z10)), ((p10, p01, p11), (z10, z01, z11))):
        ok = (tri[0] >= 0) & (tri[1] >= 0) & (tri[2] >= 0)
        span = np.maximum(np.maximum(zs[0], zs[1]), zs[2]) - np.minimum(np.minimum(zs[0], zs[1]), zs[2])
        ok &= span <= threshold
        faces.append(np.column_stack([t[ok] for t in tri]))
    mesh = TriangleMesh(verts, np.concatenate(faces))
    return compute_vertex_normals(mesh) if mesh.n_faces else mesh
