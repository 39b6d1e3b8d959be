"""Near point-light Lambertian shading with inverse-square falloff and gamma.

The intensity recorded for a surface point is::

    I = (c * rho * max(n . l, 0) / d**2 + ambient) ** gamma

with ``l`` the unit vector from the point to the light and ``d`` their
distance in millimetres. Albedo is always carried as the product
``c * rho``; :class:`LightModel.brightness_c` is an extra multiplier that
defaults to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import rasterize


class ShadingError(ValueError):
    pass


@dataclass(frozen=True)
class ShadingImage:
    """Single-channel radiance image in [0, 1].

    ``gamma_applied`` tells whether ``intensity`` still carries the camera
    response ``gamma``; ``mask`` marks pixels covered by geometry (rendered
    images only) and ``saturated`` pixels that were clipped at 1.
    """

    intensity: np.ndarray
    gamma_applied: bool = False
    gamma: float = 1.0
    mask: np.ndarray | None = field(default=None, compare=False)
    saturated: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        a = np.asarray(self.intensity, dtype=np.float64)
        if a.ndim != 2:
            raise ShadingError("shading images are single-channel 2D arrays")
        if not np.all(np.isfinite(a)):
            raise ShadingError("non-finite intensities")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise ShadingError(f"intensities outside [0, 1]: [{a.min():.4g}, {a.max():.4g}]")
        if not self.gamma > 0:
            raise ShadingError("gamma must be positive")
        object.__setattr__(self, "intensity", a)

    @property
    def shape(self):
        return self.intensity.shape

    @property
    def height(self):
        return self.intensity.shape[0]

    @property
    def width(self):
        return self.intensity.shape[1]


@dataclass(frozen=True)
class LightModel:
    """Photometric parameters shared by all views.

    The light position itself is per view (``View.light_offset``, given in
    the camera frame).
    """

    brightness_c: float = 1.0
    ambient: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.brightness_c > 0:
            raise ShadingError("brightness_c must be positive")
        if self.ambient < 0:
            raise ShadingError("ambient must be non-negative")
        if not 0 < self.gamma <= 3:
            raise ShadingError("gamma must lie in (0, 3]")

    def with_gamma(self, gamma):
        return replace(self, gamma=float(gamma))


def albedo_per_vertex(albedo, n_vertices):
    """Broadcast an albedo description (scalar, array or model) per vertex."""
    if hasattr(albedo, "vertex_values"):
        return np.asarray(albedo.vertex_values(n_vertices), dtype=np.float64)
    a = np.asarray(albedo, dtype=np.float64)
    if a.ndim == 0:
        return np.full(n_vertices, float(a))
    if a.shape != (n_vertices,):
        raise ShadingError(f"albedo has shape {a.shape}, expected ({n_vertices},)")
    return a


def radiance(normal, light_dir, distance, albedo, light=LightModel()):
    """Linear (pre-gamma, unclipped) radiance; vectorised over leading axes."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0):
        raise ShadingError("distance must be positive")
    nl = np.sum(np.asarray(normal, float) * np.asarray(light_dir, float), axis=-1)
    return light.brightness_c * np.asarray(albedo, float) * np.maximum(nl, 0.0) / d ** 2 + light.ambient


def predict_intensity(normal, light_dir, distance, albedo, light=LightModel()):
    """Observed intensity for unit ``normal``/``light_dir`` at ``distance`` mm.

    Back-facing configurations (``n . l < 0``) give 0 and values above 1
    saturate at 1 before the gamma curve is applied.
    """
    r = radiance(normal, light_dir, distance, albedo, light)
    out = np.clip(r, 0.0, 1.0) ** light.gamma
    return float(out) if np.ndim(out) == 0 else out


def gamma_apply(image, gamma):
    if image.gamma_applied:
        raise ShadingError("image already carries a gamma curve")
    if not gamma > 0:
        raise ShadingError("gamma must be positive")
    return replace(image, intensity=image.intensity ** gamma, gamma_applied=True, gamma=float(gamma))


def linearize(image, gamma=None):
    """Undo the camera response: ``I ** (1 / gamma)``.

    ``gamma`` defaults to the value recorded on the image.
    """
    if not image.gamma_applied:
        raise ShadingError("image is already linear")
    g = image.gamma if gamma is None else float(gamma)
    if not g > 0:
        raise ShadingError("gamma must be positive")
    return replace(image, intensity=image.intensity ** (1.0 / g), gamma_applied=False, gamma=1.0)


def linear_intensity(image):
    return linearize(image).intensity if image.gamma_applied else image.intensity


@dataclass(frozen=True)
class SurfaceSamples:
    """Geometry seen through the pixels of one view (covered pixels only)."""

    mask: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    light_dir: np.ndarray
    distance: np.ndarray


def surface_samples(mesh, view, albedo, raster=None):
    """Phong-interpolated surface point, normal and albedo per covered pixel."""
    ras = rasterize(mesh, view) if raster is None else raster
    m = ras.mask
    pts = ras.interpolate(mesh.faces, mesh.vertices)
    nrm = ras.interpolate(mesh.faces, mesh.normals)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    alb = ras.interpolate(mesh.faces, albedo_per_vertex(albedo, mesh.n_vertices))
    to_light = view.light_position - pts
    dist = np.linalg.norm(to_light, axis=1)
    return SurfaceSamples(m, pts, nrm, alb, to_light / dist[:, None], dist)


def render_radiance(mesh, view, albedo, light=LightModel(), raster=None):
    """Linear, unclipped radiance per pixel (0 on background)."""
    s = surface_samples(mesh, view, albedo, raster)
    H, W = view.intrinsics.shape
    lin = np.zeros((H, W))
    lin[s.mask] = radiance(s.normals, s.light_dir, s.distance, s.albedo, light)
    return lin, s.mask


def render_shading_image(mesh, view, albedo, light=LightModel(), raster=None):
    """Synthesize the image ``view`` would record of ``mesh``.

    Background pixels are 0. Attached shadows follow from clamping
    ``n . l``; cast shadows are not modelled.
    """
    if mesh.normals is None:
        from .mesh import compute_vertex_normals
        mesh = compute_vertex_normals(mesh)
    lin, mask = render_radiance(mesh, view, albedo, light, raster)
    saturated = lin > 1.0
    img = np.clip(lin, 0.0, 1.0)
    if light.gamma != 1.0:
        img = img ** light.gamma
    return ShadingImage(img, gamma_applied=light.gamma != 1.0, gamma=light.gamma,
                        mask=mask, saturated=saturated)


def sample_bilinear(image, uv, low=None):
    """Bilinearly sample a 2D array at subpixel positions.

    Returns ``(values, valid)``; a sample is valid when all four
    contributing pixels lie inside the image and, if ``low`` is given,
    are all strictly above it (so silhouette samples that would blend
    with the background are rejected).
    """
    H, W = image.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    finite = np.isfinite(u) & np.isfinite(v)
    u0 = np.floor(np.where(finite, u, -10)).astype(np.int64)
    v0 = np.floor(np.where(finite, v, -10)).astype(np.int64)
    valid = finite & (u0 >= 0) & (v0 >= 0) & (u0 + 1 < W) & (v0 + 1 < H)
    # pixels sitting exactly on the last row/column are still samplable
    edge_u = finite & (u == W - 1)
    edge_v = finite & (v == H - 1)
    u0 = np.where(edge_u, W - 2, u0)
    v0 = np.where(edge_v, H - 2, v0)
    valid |= finite & (u0 >= 0) & (v0 >= 0) & (u0 + 1 < W) & (v0 + 1 < H) & (edge_u | edge_v) \
        & (u <= W - 1) & (v <= H - 1)
    out = np.zeros(len(uv))
    if not valid.any():
        return out, valid
    i = np.flatnonzero(valid)
    a, b = u[i] - u0[i], v[i] - v0[i]
    c00 = image[v0[i], u0[i]]
    c01 = image[v0[i], u0[i] + 1]
    c10 = image[v0[i] + 1, u0[i]]
    c11 = image[v0[i] + 1, u0[i] + 1]
    out[i] = (1 - b) * ((1 - a) * c00 + a * c01) + b * ((1 - a) * c10 + a * c11)
    if low is not None:
        ok = (np.minimum(np.minimum(c00, c01), np.minimum(c10, c11)) > low)
        valid[i[~ok]] = False
    return out, valid
