"""Radiometric calibration: gamma response and light falloff.

The camera response is modelled as ``I_obs = I_ren ** gamma`` and fitted
robustly by RANSAC against intensities predicted for a known Lambertian
sphere. The falloff check fits ``log I = log a + p log d`` to median wall
intensities captured at several distances; an ideal point light gives
``p = -2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .camera import rasterize
from .mesh import compute_vertex_normals
from .shading import LightModel, render_shading_image

MIN_CALIBRATION_PAIRS = 100
HYPOTHESIS_RANGE = (0.02, 0.98)


class CalibrationError(ValueError):
    pass


class UnidentifiableError(CalibrationError):
    pass


@dataclass(frozen=True)
class CalibrationSamples:
    rendered: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        r = column_or_1d(np.asarray(self.rendered, dtype=np.float64))
        o = column_or_1d(np.asarray(self.observed, dtype=np.float64))
        if len(r) != len(o):
            raise CalibrationError("rendered and observed differ in length")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(o))):
            raise CalibrationError("non-finite calibration sample")
        object.__setattr__(self, "rendered", r)
        object.__setattr__(self, "observed", o)

    def __len__(self):
        return len(self.rendered)


@dataclass(frozen=True)
class FalloffSamples:
    distance: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        d = column_or_1d(np.asarray(self.distance, dtype=np.float64))
        i = column_or_1d(np.asarray(self.intensity, dtype=np.float64))
        if len(d) != len(i):
            raise CalibrationError("distance and intensity differ in length")
        if np.any(d <= 0):
            raise CalibrationError("distances must be positive")
        object.__setattr__(self, "distance", d)
        object.__setattr__(self, "intensity", i)


@dataclass(frozen=True)
class GammaFit:
    gamma: float
    inlier_ratio: float
    inliers: np.ndarray
    rmse: float


@dataclass(frozen=True)
class FalloffFit:
    exponent: float
    scale: float


# gamma -----------------------------------------------------------------


def _refine_gamma(x, y, gamma0):
    def res(g):
        return x ** g[0] - y

    def jac(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)
        return (x ** g[0] * lx)[:, None]

    sol = least_squares(res, [gamma0], jac=jac, bounds=([1e-3], [10.0]), xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, method="trf")
    return float(sol.x[0])


def fit_gamma_ransac(samples, n_samples=1000, n_iterations=1000, inlier_threshold=0.05, seed=0):
    """Robust fit of ``observed = rendered ** gamma``.

    Each hypothesis averages the closed-form ``log(I_obs) / log(I_ren)`` of
    two random pairs whose rendered value lies in (0.02, 0.98); it is
    scored on a random pool of ``n_samples`` pairs. The hypothesis with the
    most inliers (ties: lower gamma) is refined by least squares over all
    inliers, re-selecting inliers until the set is stable.
    """
    if not isinstance(samples, CalibrationSamples):
        samples = CalibrationSamples(*samples)
    n = len(samples)
    if n < MIN_CALIBRATION_PAIRS:
        raise CalibrationError(f"need at least {MIN_CALIBRATION_PAIRS} pairs, got {n}")
    if n_samples > n:
        raise CalibrationError(f"n_samples={n_samples} exceeds the {n} available pairs")
    x, y = samples.rendered, samples.observed
    if np.ptp(x) == 0:
        raise UnidentifiableError("all rendered intensities are equal; gamma is unidentifiable")
    lo, hi = HYPOTHESIS_RANGE
    eligible = np.flatnonzero((x > lo) & (x < hi) & (y > 0) & (y < 1))
    if len(eligible) < 2 or np.ptp(x[eligible]) == 0:
        raise UnidentifiableError("not enough distinct pairs inside (0.02, 0.98)")

    rng = np.random.default_rng(seed)
    pool = rng.choice(n, size=n_samples, replace=False)
    pick = eligible[rng.integers(len(eligible), size=(n_iterations, 2))]
    gammas = np.mean(np.log(y[pick]) / np.log(x[pick]), axis=1)
    xp, yp = x[pool], y[pool]
    # inlier counts for all hypotheses at once, chunked to bound memory
    counts = np.empty(n_iterations, dtype=np.int64)
    step = max(1, 2_000_000 // max(n_samples, 1))
    for s in range(0, n_iterations, step):
        g = gammas[s:s + step, None]
        counts[s:s + step] = (np.abs(yp[None, :] - xp[None, :] ** g) < inlier_threshold).sum(axis=1)
    best = np.flatnonzero(counts == counts.max())
    gamma = float(gammas[best[np.argmin(gammas[best])]])

    inl = np.abs(y - x ** gamma) < inlier_threshold
    for _ in range(10):
        if inl.sum() < 2:
            break
        gamma = _refine_gamma(x[inl], y[inl], gamma)
        new = np.abs(y - x ** gamma) < inlier_threshold
        if np.array_equal(new, inl):
            break
        inl = new
    resid = y[inl] - x[inl] ** gamma
    rmse = float(np.sqrt(np.mean(resid ** 2))) if inl.any() else float("nan")
    return GammaFit(gamma, float(inl.mean()), inl, rmse)


def build_sphere_samples(mesh, views, light=LightModel(), albedo=1.0, high=0.98, erode=1):
    """Pair predicted linear intensity with the observed pixel value.

    Prediction renders ``mesh`` with ``gamma = 1``. Pixels are kept when
    covered by the mesh (eroded by ``erode`` pixels to avoid silhouette
    mixing), lit (prediction > 0), unsaturated in the prediction and with an
    observed value not above ``high``.
    """
    from scipy.ndimage import binary_erosion

    mesh = compute_vertex_normals(mesh)
    lin = LightModel(light.brightness_c, light.ambient, 1.0)
    ren, obs = [], []
    for view in views:
        if view.image is None:
            raise CalibrationError(f"view {view.name!r} carries no image")
        pred = render_shading_image(mesh, view, albedo, lin)
        mask = pred.mask
        if erode:
            mask = binary_erosion(mask, iterations=int(erode))
        keep = mask & ~pred.saturated & (pred.intensity > 0) & (view.image.intensity <= high)
        ren.append(pred.intensity[keep])
        obs.append(view.image.intensity[keep])
    ren = np.concatenate(ren) if ren else np.zeros(0)
    if not len(ren):
        raise CalibrationError("no usable sphere pixel in any view")
    return CalibrationSamples(ren, np.concatenate(obs))


# falloff ---------------------------------------------------------------


def roi_median(image, roi):
    """Median intensity inside ``roi = (col, row, width, height)``."""
    a = np.asarray(getattr(image, "intensity", image), float)
    c, r, w, h = (int(v) for v in roi)
    patch = a[r:r + h, c:c + w]
    if not patch.size:
        raise CalibrationError("empty region of interest")
    return float(np.median(patch))


def fit_falloff_exponent(samples):
    """Least-squares fit of ``log I = log a + p log d``; returns ``(p, a)``."""
    if not isinstance(samples, FalloffSamples):
        samples = FalloffSamples(*samples)
    d, i = samples.distance, samples.intensity
    keep = i > 0
    d, i = d[keep], i[keep]
    if len(np.unique(d)) < 3:
        raise CalibrationError("need at least 3 distinct distances with positive intensity")
    A = np.column_stack([np.ones_like(d), np.log(d)])
    coef, *_ = np.linalg.lstsq(A, np.log(i), rcond=None)
    return FalloffFit(float(coef[1]), float(np.exp(coef[0])))


# estimators ------------------------------------------------------------


class GammaCalibrator(TransformerMixin, RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_gamma_ransac`.

    ``fit(rendered, observed)``; ``predict`` maps linear to observed
    intensity and ``transform`` linearises observed intensities.
    """

    def __init__(self, n_samples=1000, n_iterations=1000, inlier_threshold=0.05, seed=0):
        self.n_samples = n_samples
        self.n_iterations = n_iterations
        self.inlier_threshold = inlier_threshold
        self.seed = seed

    def fit(self, X, y):
        x = column_or_1d(np.asarray(X, float).ravel())
        samples = CalibrationSamples(x, y)
        fit = fit_gamma_ransac(samples, min(self.n_samples, len(samples)), self.n_iterations,
                               self.inlier_threshold, self.seed)
        self.gamma_ = fit.gamma
        self.inlier_mask_ = fit.inliers
        self.inlier_ratio_ = fit.inlier_ratio
        self.rmse_ = fit.rmse
        return self

    def predict(self, X):
        check_is_fitted(self, "gamma_")
        return np.clip(np.asarray(X, float).ravel(), 0.0, None) ** self.gamma_

    def transform(self, X):
        check_is_fitted(self, "gamma_")
        return np.clip(np.asarray(X, float), 0.0, None) ** (1.0 / self.gamma_)


class FalloffRegressor(RegressorMixin, BaseEstimator):
    """Power-law fit ``I = scale * d ** exponent``."""

    def fit(self, X, y):
        fit = fit_falloff_exponent(FalloffSamples(np.asarray(X, float).ravel(), y))
        self.exponent_ = fit.exponent
        self.scale_ = fit.scale
        return self

    def predict(self, X):
        check_is_fitted(self, "exponent_")
        return self.scale_ * np.asarray(X, float).ravel() ** self.exponent_
