"""Input validation helpers shared by the estimators and the CLI."""
from __future__ import annotations

import warnings

import numpy as np

from .autodiff import Tensor


class InvariantError(ValueError):
    """A documented data invariant does not hold."""


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def check_finite(x, name: str) -> np.ndarray:
    arr = as_array(x)
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} contains NaN or Inf")
    return arr


def check_pose(theta, name: str = "theta") -> np.ndarray:
    arr = check_finite(theta, name).reshape(-1)
    if arr.size != 72:
        raise InvariantError(f"{name} must have 72 entries (24 axis-angle joints), got {arr.size}")
    norms = np.linalg.norm(arr.reshape(24, 3), axis=1)
    if np.any(norms >= np.pi):
        warnings.warn(f"{name}: joint rotation magnitude >= pi at joints "
                      f"{np.nonzero(norms >= np.pi)[0].tolist()}", RuntimeWarning, stacklevel=3)
    return arr


def check_shape_params(beta, name: str = "beta") -> np.ndarray:
    arr = check_finite(beta, name).reshape(-1)
    if arr.size != 10:
        raise InvariantError(f"{name} must have 10 entries, got {arr.size}")
    return arr


def check_image(img, channels: int | None = None, name: str = "image") -> np.ndarray:
    """Validate a C×H×W image with values in [0, 1]."""
    arr = check_finite(img, name)
    if arr.ndim != 3:
        raise InvariantError(f"{name} must be C×H×W, got shape {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise InvariantError(f"{name} must have {channels} channels, got {arr.shape[0]}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvariantError(f"{name} values must lie in [0, 1]")
    return arr


def check_binary(mask, name: str = "mask") -> np.ndarray:
    arr = as_array(mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise InvariantError(f"{name} must be binary")
    return arr


def check_same_shape(a, b, what: str = "inputs") -> None:
    sa, sb = as_array(a).shape, as_array(b).shape
    if sa != sb:
        raise InvariantError(f"{what} have different shapes {sa} and {sb}")
