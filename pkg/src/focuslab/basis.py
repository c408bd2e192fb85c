"""Three-parameter warp model shared by the simulator, aligner, and calibrator.

A focal sweep misaligns slices in a very constrained way: a radial zoom about
the principal point plus a small translation.  That motion is written as a
flow over pixel coordinates G,

    D(G) = alpha * (G - center) + (beta, gamma)

and applied by inverse warping: output pixel G samples the input image at
G + D(G) with bilinear interpolation.  Positions landing outside the input
are marked invalid rather than extrapolated.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .validation import DataError

__all__ = [
    "ALPHA_BOUND",
    "BasisCoefficients",
    "basis_flow",
    "warp_basis",
    "compose_coefficients",
    "invert_coefficients",
    "mean_endpoint_error",
]

# Zooms beyond 20 percent never come from focus breathing; treat as divergence.
ALPHA_BOUND = 0.2


@dataclass(frozen=True)
class BasisCoefficients:
    """Coefficients (alpha, beta, gamma) of one basis warp.

    alpha scales the radial flow about the warp center, beta and gamma are
    the x and y translation in pixels.
    """

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        values = (self.alpha, self.beta, self.gamma)
        if not all(np.isfinite(v) for v in values):
            raise DataError(f"coefficients must be finite, got {values}")
        if abs(self.alpha) >= ALPHA_BOUND:
            raise DataError(
                f"|alpha| = {abs(self.alpha)} exceeds the sanity bound {ALPHA_BOUND}"
            )

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma)


def _coeff_tuple(coeffs):
    if isinstance(coeffs, BasisCoefficients):
        return coeffs.as_tuple()
    alpha, beta, gamma = (float(v) for v in coeffs)
    return alpha, beta, gamma


def basis_flow(shape, coeffs, center):
    """Flow field D(G) for an H x W grid; returns (dx, dy) arrays."""
    height, width = shape
    alpha, beta, gamma = _coeff_tuple(coeffs)
    cx, cy = center
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    dx = alpha * (xs - cx) + beta
    dy = alpha * (ys - cy) + gamma
    return np.broadcast_to(dx, (height, width)), np.broadcast_to(
        dy[:, None], (height, width)
    )


def warp_basis(image, coeffs, center, mask=None):
    """Resample an image under a basis warp.

    Output pixel G takes the input value at G + D(G) via bilinear
    interpolation.  Returns (warped, valid) where valid is False wherever the
    sample position leaves the input or, when a mask is given, touches
    invalid input pixels.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise DataError(f"image must be HxW or HxWxC, got shape {arr.shape}")
    height, width = arr.shape[:2]
    dx, dy = basis_flow((height, width), coeffs, center)
    grid_y, grid_x = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    sample_x = grid_x + dx
    sample_y = grid_y + dy
    valid = (
        (sample_x >= 0.0)
        & (sample_x <= width - 1.0)
        & (sample_y >= 0.0)
        & (sample_y <= height - 1.0)
    )
    coords = np.stack([sample_y.ravel(), sample_x.ravel()])
    if arr.ndim == 2:
        warped = ndimage.map_coordinates(
            arr, coords, order=1, mode="nearest"
        ).reshape(height, width)
    else:
        warped = np.stack(
            [
                ndimage.map_coordinates(
                    arr[..., c], coords, order=1, mode="nearest"
                ).reshape(height, width)
                for c in range(arr.shape[2])
            ],
            axis=-1,
        )
    if mask is not None:
        sampled_mask = ndimage.map_coordinates(
            np.asarray(mask, dtype=np.float64), coords, order=1, mode="constant"
        ).reshape(height, width)
        valid = valid & (sampled_mask >= 0.999)
    warped[~valid] = 0.0
    return warped, valid


def compose_coefficients(first, second, center=None):
    """Single warp equivalent to applying `first` then `second`.

    Resampling with coefficients a and then b is one resample with
    1 + alpha = (1 + a.alpha) * (1 + b.alpha) and translation
    (1 + a.alpha) * b.t + a.t, valid for any shared warp center.
    """
    a_alpha, a_beta, a_gamma = _coeff_tuple(first)
    b_alpha, b_beta, b_gamma = _coeff_tuple(second)
    alpha = (1.0 + a_alpha) * (1.0 + b_alpha) - 1.0
    beta = (1.0 + a_alpha) * b_beta + a_beta
    gamma = (1.0 + a_alpha) * b_gamma + a_gamma
    return BasisCoefficients(alpha, beta, gamma)


def invert_coefficients(coeffs):
    """Coefficients that undo a basis warp exactly."""
    alpha, beta, gamma = _coeff_tuple(coeffs)
    scale = 1.0 + alpha
    return BasisCoefficients(1.0 / scale - 1.0, -beta / scale, -gamma / scale)


def mean_endpoint_error(coeffs, shape, center, reference=None):
    """Mean flow magnitude of a warp, or of the discrepancy to a reference."""
    dx, dy = basis_flow(shape, coeffs, center)
    if reference is not None:
        rx, ry = basis_flow(shape, reference, center)
        dx = dx - rx
        dy = dy - ry
    return float(np.mean(np.hypot(dx, dy)))
