"""Image and geometry error metrics, ICP alignment and leave-one-out evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial.transform import Rotation

from .mesh import closest_points_on_mesh, compute_vertex_normals
from .refine import RefinementConfig, RefinementError, refine
from .shading import render_shading_image

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def _as_array(img):
    return np.asarray(getattr(img, "intensity", img), dtype=np.float64)


def _default_mask(a, b):
    ma = getattr(a, "mask", None)
    mb = getattr(b, "mask", None)
    shape = _as_array(a).shape
    m = np.ones(shape, dtype=bool)
    if ma is not None:
        m &= ma
    if mb is not None:
        m &= mb
    return m


def image_rmse(a, b, mask=None):
    """Root mean squared intensity difference over ``mask``.

    ``mask`` defaults to the pixels covered in both images (their ``mask``
    attribute when present, else every pixel).
    """
    A, B = _as_array(a), _as_array(b)
    if A.shape != B.shape:
        raise EvaluationError(f"image shapes differ: {A.shape} vs {B.shape}")
    m = _default_mask(a, b) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EvaluationError("empty mask")
    d = A[m] - B[m]
    return float(np.sqrt(np.mean(d * d)))


def gradient_magnitude(img):
    """Forward-difference gradient magnitude; the last row/column get 0."""
    A = _as_array(img)
    gx = np.zeros_like(A)
    gy = np.zeros_like(A)
    gx[:, :-1] = A[:, 1:] - A[:, :-1]
    gy[:-1, :] = A[1:, :] - A[:-1, :]
    return np.hypot(gx, gy)


def gradient_rmse(a, b, mask=None):
    """RMSE between forward-difference gradient magnitudes.

    The mask is eroded by one pixel (3x3, image border counts as outside)
    so that no difference straddles its boundary.
    """
    A, B = _as_array(a), _as_array(b)
    if A.shape != B.shape:
        raise EvaluationError(f"image shapes differ: {A.shape} vs {B.shape}")
    m = _default_mask(a, b) if mask is None else np.asarray(mask, dtype=bool)
    m = binary_erosion(m, structure=np.ones((3, 3), bool), border_value=0)
    if not m.any():
        raise EvaluationError("empty mask after erosion")
    d = gradient_magnitude(A)[m] - gradient_magnitude(B)[m]
    return float(np.sqrt(np.mean(d * d)))


# alignment ----------------------------------------------------------------


@dataclass(frozen=True)
class Alignment:
    """Rigid transform ``x -> R x + t`` and the per-iteration mean squared distance."""

    rotation: np.ndarray
    translation: np.ndarray
    history: tuple = ()

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        return np.asarray(points, float) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), ())


def _correspondences(points, target, max_distance):
    q, d, fid = closest_points_on_mesh(target, points)
    keep = d <= max_distance if max_distance is not None else np.ones(len(d), bool)
    return q, d, fid, keep


def _msd(points, target, max_distance):
    _, d, _, keep = _correspondences(points, target, max_distance)
    if not keep.any():
        raise EvaluationError("no correspondences within the search radius")
    return float(np.mean(d[keep] ** 2))


def align_icp(source, target, max_iterations=50, max_distance=None, tol=1e-12, max_halvings=20):
    """Point-to-plane ICP taking ``source`` vertices onto the ``target`` surface.

    Each iteration pairs every source vertex with its closest point on the
    target (dropping pairs beyond ``max_distance``), solves the linearised
    point-to-plane problem for a small rotation and translation and applies
    it. If the mean squared closest-point distance would grow, the
    increment is halved until it does not, so the recorded sequence is
    non-increasing.
    """
    P0 = np.asarray(source.vertices, dtype=np.float64)
    fn = target.face_normals()
    R = np.eye(3)
    t = np.zeros(3)
    cur = _msd(P0, target, max_distance)
    history = [cur]
    for _ in range(max_iterations):
        P = P0 @ R.T + t
        q, _, fid, keep = _correspondences(P, target, max_distance)
        if not keep.any():
            raise EvaluationError("no correspondences within the search radius")
        p, q, n = P[keep], q[keep], fn[fid[keep]]
        A = np.column_stack([np.cross(p, n), n])
        b = np.einsum("ij,ij->i", q - p, n)
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
        accepted = False
        scale = 1.0
        for _ in range(max_halvings + 1):
            dR = Rotation.from_rotvec(scale * x[:3]).as_matrix()
            R_new = dR @ R
            t_new = dR @ t + scale * x[3:]
            new = _msd(P0 @ R_new.T + t_new, target, max_distance)
            if new <= cur:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        R, t = R_new, t_new
        improvement = cur - new
        cur = new
        history.append(cur)
        if improvement <= tol * max(cur, 1e-300) or np.abs(scale * x).max() < 1e-14:
            break
    return Alignment(R, t, tuple(history))


def mesh_distance(source, target):
    """Mean and max distance from ``source`` vertices to the ``target`` surface."""
    _, d, _ = closest_points_on_mesh(target, np.asarray(source.vertices, float))
    return float(d.mean()), float(d.max())


# leave-one-out --------------------------------------------------------------


@dataclass(frozen=True)
class ErrorReport:
    """Errors for one held-out view.

    ``image_rmse``/``gradient_rmse`` map ``"input"`` and ``"refined"`` to
    the held-out view's error for the mesh before and after refinement.
    Distances are to the ground truth (``nan`` when none is available);
    ``transform`` is the alignment applied before measuring them.
    """

    view: str
    image_rmse: dict
    gradient_rmse: dict
    mean_distance: float = float("nan")
    max_distance: float = float("nan")
    transform: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        for v in list(self.image_rmse.values()) + list(self.gradient_rmse.values()):
            if not (np.isfinite(v) and v >= 0):
                raise EvaluationError("error values must be finite and non-negative")

    @property
    def improved(self):
        return self.image_rmse["refined"] < self.image_rmse["input"]

    def as_row(self):
        return {"view": self.view,
                "rmse_input": self.image_rmse["input"], "rmse_refined": self.image_rmse["refined"],
                "grad_rmse_input": self.gradient_rmse["input"],
                "grad_rmse_refined": self.gradient_rmse["refined"],
                "mean_distance": self.mean_distance, "max_distance": self.max_distance}


def held_out_errors(observed, meshes, view, albedo, light):
    """Image and gradient RMSE of each mesh's render against ``observed``.

    All meshes are scored on the same pixels: those covered in the
    observation and in every render.
    """
    renders = [render_shading_image(compute_vertex_normals(m), view, albedo, light) for m in meshes]
    obs = _as_array(observed)
    mask = obs > 0
    for r in renders:
        mask &= r.mask
    return ([image_rmse(r.intensity, obs, mask) for r in renders],
            [gradient_rmse(r.intensity, obs, mask) for r in renders])


def leave_one_out_eval(scene, config=None, folds=None):
    """Hold out each view in turn, refine on the rest and score the held-out view.

    ``scene`` provides ``degraded`` (the input mesh), ``views``, ``albedo``
    and ``light``; when it also has a ``truth`` mesh the refined surface
    distance to it is reported. ``folds`` restricts the held-out indices.
    A fold whose refinement fails is skipped with a warning.
    """
    views = list(scene.views)
    if len(views) < 3:
        raise EvaluationError("leave-one-out needs at least 3 views")
    config = config or RefinementConfig()
    truth = getattr(scene, "truth", None)
    reports = []
    for k in (range(len(views)) if folds is None else folds):
        held = views[k]
        rest = views[:k] + views[k + 1:]
        try:
            result = refine(scene.degraded, rest, scene.albedo, scene.light, config)
        except RefinementError as exc:
            log.warning("fold %d (%s) skipped: %s", k, held.name, exc)
            continue
        img, grad = held_out_errors(held.image, [scene.degraded, result.mesh], held, scene.albedo,
                                    scene.light)
        mean_d = max_d = float("nan")
        if truth is not None:
            mean_d, max_d = mesh_distance(result.mesh, truth)
        reports.append(ErrorReport(held.name or f"view{k}", {"input": img[0], "refined": img[1]},
                                   {"input": grad[0], "refined": grad[1]}, mean_d, max_d))
        log.info("fold %d: rmse %.5f -> %.5f", k, img[0], img[1])
    return reports
