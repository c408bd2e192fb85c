"""Input validation helpers shared by the library and the estimator classes.

Two error families matter for exit-code mapping in the command line tool:
``DataError`` for malformed or out-of-contract inputs, ``NumericalError``
for computations that start from valid inputs but fail numerically.
"""

import numpy as np


class DataError(ValueError):
    """Raised when an input violates a documented contract."""


class NumericalError(ArithmeticError):
    """Raised when a computation diverges or degenerates."""


def as_float_image(image, name="image"):
    """Validate an H x W or H x W x 3 image and return it as float64.

    Values must be finite and inside [0, 1].
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise DataError(f"{name} must be HxW or HxWx3, got shape {arr.shape}")
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(f"{name} values must lie in [0, 1]")
    return arr


def as_depth_map(depth, min_depth_mm=0.0, name="depth"):
    """Validate an H x W metric depth map (mm) and return it as float64."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DataError(f"{name} must be a non-empty HxW array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    if arr.min() <= min_depth_mm:
        raise DataError(
            f"{name} must be > {min_depth_mm} mm everywhere, min is {arr.min()}"
        )
    return arr


def as_mask(mask, shape, name="mask"):
    """Validate a boolean mask against an expected HxW shape."""
    arr = np.asarray(mask)
    if arr.shape != tuple(shape):
        raise DataError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return arr.astype(bool)


def check_same_shape(a, b, name_a="a", name_b="b"):
    if np.shape(a) != np.shape(b):
        raise DataError(
            f"{name_a} shape {np.shape(a)} does not match {name_b} shape {np.shape(b)}"
        )


def to_gray(image):
    """Luminance of an RGB image (0.299, 0.587, 0.114); pass grayscale through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
