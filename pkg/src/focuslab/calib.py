"""Intrinsic error-range calibration from circle-pattern sweeps.

Photographing a flat circle pattern with a focus sweep exposes the hidden
per-slice deformation directly: after the metadata-driven FoV correction,
any circle-center motion left between a slice and the target slice is the
slice's residual basis warp.  Fitting that model to many sweeps yields the
uniform error ranges the simulator draws from.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from .basis import BasisCoefficients, invert_coefficients
from .simulator import ErrorModel
from .validation import DataError, as_float_image, to_gray

__all__ = [
    "CirclePattern",
    "ParameterStats",
    "ErrorRanges",
    "detect_circles",
    "fit_basis",
    "estimate_ranges",
    "error_ranges_to_text",
    "error_ranges_from_text",
    "error_model_from_ranges",
    "IntrinsicErrorCalibrator",
]

logger = logging.getLogger(__name__)

_MIN_CIRCLES = 3
# Centers whose vertical gap stays below this are one grid row.  Plain
# lexicographic (y, x) ordering is unstable because centroids of one row
# agree in y only to measurement noise.
_ROW_TOL_PX = 2.0


@dataclass(frozen=True)
class CirclePattern:
    """Detected circle centers, ordered row-major for stable correspondence."""

    centers_px: np.ndarray
    image_shape: tuple

    def __post_init__(self):
        centers = np.asarray(self.centers_px, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != 2:
            raise DataError("centers_px must be a (K, 2) array of (x, y)")
        if centers.shape[0] < _MIN_CIRCLES:
            raise DataError(
                f"at least {_MIN_CIRCLES} circle centers required, got {centers.shape[0]}"
            )
        height, width = self.image_shape
        if (
            centers[:, 0].min() < 0
            or centers[:, 0].max() > width - 1
            or centers[:, 1].min() < 0
            or centers[:, 1].max() > height - 1
        ):
            raise DataError("circle centers fall outside the image bounds")
        object.__setattr__(self, "centers_px", centers)
        object.__setattr__(self, "image_shape", (int(height), int(width)))

    @property
    def count(self):
        return self.centers_px.shape[0]


def _otsu_threshold(values):
    hist, edges = np.histogram(values, bins=256)
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (sum0[-1] - sum0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -np.inf
    if not np.any(between > 0):
        raise DataError("degenerate threshold: image has no bimodal contrast")
    return centers[int(np.argmax(between))]


def detect_circles(image, min_area_px=20, mask=None):
    """Detect dark circles on a light background.

    Otsu thresholding, 8-connected components, an area filter, then
    intensity-weighted centroids (weight = threshold - intensity).  Centers
    are ordered row-major: clusters closer than 2 px vertically form a row
    sorted by x, rows sorted by y.  The weighting and the histogram-relative
    threshold make the result invariant to a global brightness scale.

    An optional validity mask excludes resampling borders: the threshold is
    computed over valid pixels only, and components that touch an invalid
    pixel are dropped because a truncated circle has a biased centroid.
    """
    arr = as_float_image(image)
    gray = to_gray(arr)
    if mask is None:
        valid = np.ones(gray.shape, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != gray.shape:
            raise DataError("mask shape does not match the image")
        if not valid.any():
            raise DataError("mask leaves no valid pixels")
    threshold = _otsu_threshold(gray[valid])
    binary = (gray < threshold) & valid
    tainted = ndimage.binary_dilation(~valid, structure=np.ones((3, 3), dtype=bool))
    labels, count = ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))
    centers = []
    for lab in range(1, count + 1):
        component = labels == lab
        if component.sum() <= min_area_px:
            continue
        if np.any(component & tainted):
            continue
        weights = np.where(component, np.maximum(threshold - gray, 0.0), 0.0)
        wsum = weights.sum()
        if wsum <= 0:
            continue
        ys, xs = np.nonzero(component)
        w = weights[ys, xs]
        centers.append((float((xs * w).sum() / wsum), float((ys * w).sum() / wsum)))
    if len(centers) < _MIN_CIRCLES:
        raise DataError(
            f"found {len(centers)} circles, need at least {_MIN_CIRCLES}"
        )
    centers.sort(key=lambda c: c[1])
    ordered = []
    row = [centers[0]]
    for c in centers[1:]:
        if c[1] - row[-1][1] > _ROW_TOL_PX:
            ordered.extend(sorted(row))
            row = [c]
        else:
            row.append(c)
    ordered.extend(sorted(row))
    return CirclePattern(np.asarray(ordered), gray.shape)


def fit_basis(src_centers, dst_centers, center):
    """Least-squares basis warp explaining dst - src displacements.

    Solves d_i = alpha * (p_i - center) + (beta, gamma) for matched center
    lists via the closed-form normal equations.  Returns
    (BasisCoefficients, residual RMS in pixels).
    """
    src = np.asarray(src_centers, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_centers, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise DataError("source and destination center counts differ")
    if src.shape[0] < _MIN_CIRCLES:
        raise DataError(f"need at least {_MIN_CIRCLES} matched centers")
    cx, cy = center
    disp = (dst - src).ravel()
    n = src.shape[0]
    design = np.zeros((2 * n, 3))
    design[0::2, 0] = src[:, 0] - cx
    design[1::2, 0] = src[:, 1] - cy
    design[0::2, 1] = 1.0
    design[1::2, 2] = 1.0
    normal = design.T @ design
    if np.linalg.cond(normal) > 1e10:
        raise DataError("degenerate center geometry, cannot fit the basis warp")
    solution = np.linalg.solve(normal, design.T @ disp)
    residual = design @ solution - disp
    rms = float(np.sqrt(np.mean(residual**2)))
    return BasisCoefficients(*solution), rms


@dataclass(frozen=True)
class ParameterStats:
    mean: float
    std: float
    min: float
    max: float


@dataclass(frozen=True)
class ErrorRanges:
    """Aggregated per-parameter statistics of recovered error coefficients."""

    alpha: ParameterStats
    beta: ParameterStats
    gamma: ParameterStats
    sample_count: int


def _stats(values):
    # sorted so the aggregate is a function of the sample multiset, not of
    # the stack iteration order
    arr = np.sort(np.asarray(values, dtype=np.float64))
    return ParameterStats(
        mean=float(arr.mean()),
        std=float(arr.std()),
        min=float(arr.min()),
        max=float(arr.max()),
    )


def estimate_ranges(stacks, min_area_px=20):
    """Aggregate recovered error coefficients over calibration sweeps.

    Every stack must already be at uniform FoV (metadata-corrected).  For
    each non-target slice, circle centers are matched to the target's by
    sorted order and the fitted center motion is inverted into resampling
    convention, so the statistics are directly comparable to the simulator's
    injected coefficients.  Undetectable patterns are skipped with a warning.
    """
    alphas, betas, gammas = [], [], []
    for idx, stack in enumerate(stacks):
        fovs = stack.slice_relative_fovs()
        if not np.allclose(fovs, 1.0, atol=1e-12):
            raise DataError(
                "calibration stacks must be FoV-aligned before range estimation"
            )
        try:
            target = stack.slices[stack.target_index]
            target_pattern = detect_circles(
                target.pixels, min_area_px, mask=target.valid_mask
            )
        except DataError as exc:
            logger.warning("stack %d: target pattern not detected (%s)", idx, exc)
            continue
        for n, sl in enumerate(stack.slices):
            if n == stack.target_index:
                continue
            try:
                pattern = detect_circles(sl.pixels, min_area_px, mask=sl.valid_mask)
            except DataError as exc:
                logger.warning("stack %d slice %d: %s", idx, n, exc)
                continue
            if pattern.count != target_pattern.count:
                logger.warning(
                    "stack %d slice %d: %d circles vs %d in target, skipping",
                    idx,
                    n,
                    pattern.count,
                    target_pattern.count,
                )
                continue
            fitted, _ = fit_basis(
                target_pattern.centers_px, pattern.centers_px, sl.principal_point_px
            )
            coeffs = invert_coefficients(fitted)
            alphas.append(coeffs.alpha)
            betas.append(coeffs.beta)
            gammas.append(coeffs.gamma)
    if not alphas:
        raise DataError("no calibration pattern could be measured in any stack")
    return ErrorRanges(
        alpha=_stats(alphas),
        beta=_stats(betas),
        gamma=_stats(gammas),
        sample_count=len(alphas),
    )


def error_ranges_to_text(ranges):
    lines = []
    for name in ("alpha", "beta", "gamma"):
        stats = getattr(ranges, name)
        for stat in ("min", "max", "mean", "std"):
            lines.append(f"{name}_{stat} = {getattr(stats, stat)!r}")
    lines.append(f"sample_count = {ranges.sample_count}")
    return "\n".join(lines) + "\n"


def error_ranges_from_text(text):
    fields = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"malformed error-range line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value
    try:
        stats = {
            name: ParameterStats(
                mean=float(fields[f"{name}_mean"]),
                std=float(fields[f"{name}_std"]),
                min=float(fields[f"{name}_min"]),
                max=float(fields[f"{name}_max"]),
            )
            for name in ("alpha", "beta", "gamma")
        }
        count = int(fields["sample_count"])
    except KeyError as exc:
        raise DataError(f"error-range file missing key: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"error-range file has a malformed value: {exc}") from exc
    return ErrorRanges(
        alpha=stats["alpha"], beta=stats["beta"], gamma=stats["gamma"],
        sample_count=count,
    )


def error_model_from_ranges(ranges, seed=0):
    """Build a simulator ErrorModel from calibrated ranges.

    The two translation axes share one range (the conservative union), and
    ranges are widened to contain zero, which the ErrorModel requires.
    """
    scale = (min(ranges.alpha.min, 0.0), max(ranges.alpha.max, 0.0))
    t_low = min(ranges.beta.min, ranges.gamma.min, 0.0)
    t_high = max(ranges.beta.max, ranges.gamma.max, 0.0)
    return ErrorModel(
        scale_err_range=scale,
        translation_err_range_px=(t_low, t_high),
        seed=seed,
    )


class IntrinsicErrorCalibrator(BaseEstimator):
    """Estimator interface around estimate_ranges.

    fit accepts a list of calibration stacks, applies the metadata FoV
    correction where needed, and exposes the aggregated ranges_.
    """

    def __init__(self, min_area_px=20):
        self.min_area_px = min_area_px

    def fit(self, X, y=None):
        from .align import initial_fov_align

        staged = []
        for stack in X:
            fovs = stack.slice_relative_fovs()
            staged.append(
                stack if np.allclose(fovs, 1.0, atol=1e-12) else initial_fov_align(stack)
            )
        self.ranges_ = estimate_ranges(staged, self.min_area_px)
        return self

    def error_model(self, seed=0):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "ranges_")
        return error_model_from_ranges(self.ranges_, seed)
