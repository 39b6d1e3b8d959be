"""Small argument checks shared by the estimators and the config loader."""

from __future__ import annotations

import numbers

import numpy as np


def check_scalar(value, name, low=None, high=None, low_inclusive=True, high_inclusive=True,
                 integer=False, allow_none=False):
    """Validate a numeric parameter and return it as float (or int)."""
    if value is None:
        if allow_none:
            return None
        raise ValueError(f"{name} is required")
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {value!r}")
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    if low is not None and (value < low or (value == low and not low_inclusive)):
        raise ValueError(f"{name} must be {'>=' if low_inclusive else '>'} {low}, got {value!r}")
    if high is not None and (value > high or (value == high and not high_inclusive)):
        raise ValueError(f"{name} must be {'<=' if high_inclusive else '<'} {high}, got {value!r}")
    return int(value) if integer else float(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value


def check_views(views, need_images=True):
    """Non-empty list of views, each carrying an image when required."""
    views = list(views)
    if not views:
        raise ValueError("at least one view is required")
    if need_images:
        missing = [v.name or str(k) for k, v in enumerate(views) if v.image is None]
        if missing:
            raise ValueError(f"views without an image: {missing}")
    return views
