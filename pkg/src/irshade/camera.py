"""Pinhole cameras, vertex projection, z-buffer rasterisation and visibility.

Conventions: world-to-camera ``x_c = R x + t``; the camera looks down +z
with +x right and +y down; pixel ``(col, row)`` has its centre at integer
coordinates ``(u, v) = (col, row)``. Depths reported by this module are
Euclidean distances from the camera centre, not planar z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .mesh import TriangleMesh


class CameraError(ValueError):
    pass


class BehindCameraError(CameraError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise CameraError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError("principal point outside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-9:
            raise CameraError(f"rotation is not orthonormal (max |RR^T - I| = {err:.3g})")
        det = np.linalg.det(R)
        if det < 0:
            raise CameraError(f"rotation has determinant {det:.6f}; reflections are not poses")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)):
        """Camera at ``eye`` looking at ``target``; image rows run against ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, -up)
        if np.linalg.norm(x) < 1e-12:
            x = np.cross(z, [1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.cross(z, [0.0, 0.0, 1.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        # re-orthonormalise to machine precision
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(R, -R @ eye)

    @property
    def matrix(self):
        """3x4 extrinsic matrix ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_camera(self, x):
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def to_world(self, xc):
        return (np.asarray(xc, dtype=np.float64) - self.translation) @ self.rotation


@dataclass(frozen=True)
class View:
    """One capture: camera, attached light and (optionally) its image."""

    intrinsics: CameraIntrinsics
    pose: CameraPose
    light_offset: np.ndarray = None
    image: object = None
    name: str = ""

    def __post_init__(self):
        lo = np.zeros(3) if self.light_offset is None else np.asarray(self.light_offset, float)
        object.__setattr__(self, "light_offset", lo.reshape(3))
        if self.image is not None:
            shp = np.shape(self.image.intensity)
            if shp != self.intrinsics.shape:
                raise CameraError(f"image shape {shp} does not match intrinsics {self.intrinsics.shape}")

    @property
    def light_position(self):
        """Light position in world coordinates."""
        return self.pose.to_world(self.light_offset)

    @property
    def camera_center(self):
        return self.pose.center

    def with_image(self, image):
        return View(self.intrinsics, self.pose, self.light_offset, image, self.name)


def project_points(points, view):
    """Project world points; returns ``(uv, distance, z)``.

    Points with ``z <= 0`` get NaN pixel coordinates.
    """
    pc = view.pose.to_camera(points)
    z = pc[..., 2]
    k = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, k.fx * pc[..., 0] / z + k.cx, np.nan)
        v = np.where(z > 0, k.fy * pc[..., 1] / z + k.cy, np.nan)
    return np.stack([u, v], axis=-1), np.linalg.norm(pc, axis=-1), z


def project_vertex(x, view):
    """Pixel position and camera distance of one world point."""
    uv, dist, z = project_points(np.asarray(x, dtype=np.float64).reshape(1, 3), view)
    if not z[0] > 0:
        raise BehindCameraError(f"point {tuple(np.ravel(x))} is behind the camera (z = {z[0]:.6g})")
    return uv[0], float(dist[0])


def backproject(uv, distance, view):
    """Inverse of :func:`project_points` for points in front of the camera."""
    uv = np.asarray(uv, dtype=np.float64)
    k = view.intrinsics
    ray = np.stack([(uv[..., 0] - k.cx) / k.fx, (uv[..., 1] - k.cy) / k.fy,
                    np.ones(uv.shape[:-1])], axis=-1)
    ray /= np.linalg.norm(ray, axis=-1, keepdims=True)
    return view.pose.to_world(ray * np.asarray(distance, dtype=np.float64)[..., None])


def pixel_rays(intrinsics):
    """Unit camera-frame ray through every pixel centre, shape (H, W, 3)."""
    k = intrinsics
    u, v = np.meshgrid(np.arange(k.width, dtype=np.float64), np.arange(k.height, dtype=np.float64))
    ray = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True)


# rasterisation --------------------------------------------------------


@numba.njit(cache=True)
def _raster_kernel(px, py, pz, faces, width, height, near, zbuf, fid, bary):
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        z0 = pz[i0]
        z1 = pz[i1]
        z2 = pz[i2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0 = px[i0]
        y0 = py[i0]
        x1 = px[i1]
        y1 = py[i1]
        x2 = px[i2]
        y2 = py[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), width - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        inv = 1.0 / area
        eps = -1e-9
        for y in range(ymin, ymax + 1):
            for x in range(xmin, xmax + 1):
                w0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) * inv
                w1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) * inv
                w2 = 1.0 - w0 - w1
                if w0 < eps or w1 < eps or w2 < eps:
                    continue
                q0 = w0 / z0
                q1 = w1 / z1
                q2 = w2 / z2
                s = q0 + q1 + q2
                z = 1.0 / s
                if z < zbuf[y, x]:
                    zbuf[y, x] = z
                    fid[y, x] = f
                    bary[y, x, 0] = q0 * z
                    bary[y, x, 1] = q1 * z
                    bary[y, x, 2] = q2 * z


@dataclass(frozen=True)
class Raster:
    """Per-pixel rasterisation result.

    ``face_id`` is -1 on background; ``bary`` holds perspective-correct
    barycentric weights of the hit face; ``depth`` the Euclidean camera
    distance of the hit (0 on background).
    """

    face_id: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    @property
    def mask(self):
        return self.face_id >= 0

    def interpolate(self, mesh_faces, per_vertex):
        """Barycentric interpolation of a per-vertex array at covered pixels."""
        m = self.mask
        f = mesh_faces[self.face_id[m]]
        b = self.bary[m]
        vals = per_vertex[f]
        if vals.ndim == 2:
            return np.einsum("pk,pk->p", b, vals)
        return np.einsum("pk,pkc->pc", b, vals)


def rasterize(mesh: TriangleMesh, view: View, near=1e-6) -> Raster:
    """Z-buffered rasterisation of ``mesh`` into ``view``'s image grid."""
    k = view.intrinsics
    H, W = k.height, k.width
    zbuf = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    if mesh.n_faces:
        pc = view.pose.to_camera(mesh.vertices)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = np.where(z > 0, k.fx * pc[:, 0] / z + k.cx, 0.0)
            py = np.where(z > 0, k.fy * pc[:, 1] / z + k.cy, 0.0)
        _raster_kernel(px, py, z, mesh.faces, W, H, near, zbuf, fid, bary)
    depth = np.zeros((H, W))
    m = fid >= 0
    if m.any():
        pc = view.pose.to_camera(mesh.vertices)
        hit = np.einsum("pk,pkc->pc", bary[m], pc[mesh.faces[fid[m]]])
        depth[m] = np.linalg.norm(hit, axis=1)
    return Raster(fid, bary, depth)


def rasterize_depth(mesh, view):
    """Depth buffer of camera-ray distances (0 where nothing is hit)."""
    return rasterize(mesh, view).depth


# visibility -----------------------------------------------------------


@dataclass(frozen=True)
class VisibilityMap:
    """``visible[m, i]`` tells whether vertex ``i`` is seen in view ``m``."""

    visible: np.ndarray
    depth: tuple

    @property
    def n_views(self):
        return self.visible.shape[0]

    def counts(self):
        return self.visible.sum(axis=0)


def default_visibility_bias(mesh):
    return 2.0 * mesh.mean_edge_length()


def _buffer_lookup(depth, uv):
    """Depth at the nearest pixel, or the largest valid depth in the 3x3
    neighbourhood when that pixel is background."""
    H, W = depth.shape
    col = np.rint(uv[:, 0]).astype(np.int64)
    row = np.rint(uv[:, 1]).astype(np.int64)
    out = np.zeros(len(uv))
    inside = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    out[inside] = depth[row[inside], col[inside]]
    miss = inside & (out <= 0)
    if miss.any():
        best = np.zeros(int(miss.sum()))
        r0, c0 = row[miss], col[miss]
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r = np.clip(r0 + dr, 0, H - 1)
                c = np.clip(c0 + dc, 0, W - 1)
                best = np.maximum(best, depth[r, c])
        out[miss] = best
    return out


def vertex_visibility(mesh, view, depth, bias, normals=None):
    """Visibility of every vertex of ``mesh`` against a depth buffer."""
    normals = mesh.normals if normals is None else normals
    uv, dist, z = project_points(mesh.vertices, view)
    k = view.intrinsics
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (uv[:, 0] >= -0.5) & (uv[:, 0] < k.width - 0.5) \
            & (uv[:, 1] >= -0.5) & (uv[:, 1] < k.height - 0.5)
    to_cam = view.camera_center - mesh.vertices
    front = np.einsum("ij,ij->i", normals, to_cam) > 0
    vis = inside & front
    if vis.any():
        idx = np.flatnonzero(vis)
        buf = _buffer_lookup(depth, uv[idx])
        vis[idx] = (buf > 0) & (dist[idx] <= buf + bias)
    return vis


def compute_visibility(mesh, views, bias=None, rasters=None):
    """Visibility of all vertices in one view or a list of views.

    A vertex is visible when it projects inside the image, faces the
    camera (``n . (c - x) > 0``) and is not farther than the rasterised
    depth at its pixel plus ``bias`` millimetres. Precomputed ``rasters``
    (one per view) are reused when given.
    """
    if isinstance(views, View):
        views = [views]
    if mesh.normals is None:
        from .mesh import compute_vertex_normals
        mesh = compute_vertex_normals(mesh)
    if bias is None:
        bias = default_visibility_bias(mesh)
    vis, depths = [], []
    for k, view in enumerate(views):
        d = rasterize_depth(mesh, view) if rasters is None else rasters[k].depth
        depths.append(d)
        vis.append(vertex_visibility(mesh, view, d, bias))
    visible = np.array(vis, dtype=bool).reshape(len(views), mesh.n_vertices)
    visible.flags.writeable = False
    return VisibilityMap(visible, tuple(depths))
