"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np


def check_images(X, n_channels: int | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 array of shape ``(N, C, H, W)``.

    Accepts a single ``(H, W)`` or ``(C, H, W)`` image or a stack. A list of
    arrays is stacked, so all images must share one shape.
    """
    try:
        a = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as err:
        raise ValueError(f"{name} must be numeric image data of one common shape") from err
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[None] if n_channels is None or a.shape[0] == n_channels else a[:, None]
    if a.ndim != 4:
        raise ValueError(f"{name} must have 2 to 4 dimensions, got shape {np.shape(X)}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if n_channels is not None and a.shape[1] != n_channels:
        raise ValueError(f"{name} has {a.shape[1]} channels, expected {n_channels}")
    return a


def check_scalar(value, name: str, lo=None, hi=None, integer: bool = False, allow_none: bool = False):
    if value is None and allow_none:
        return None
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a real number'}, got {value!r}")
    if lo is not None and value < lo:
        raise ValueError(f"{name} must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ValueError(f"{name} must be <= {hi}, got {value}")
    return value
