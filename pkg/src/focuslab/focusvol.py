"""Focus measures and depth regression over an aligned focal stack.

Each slice gets a per-pixel sharpness score; stacking the scores gives a
focus volume.  Depth is read out either by a hard per-pixel argmax or by a
soft regression: scores are pushed through a temperature-scaled softplus,
normalized to a distribution over slices, and the expectation over the focus
distances is taken.  The soft route is differentiable in the scores and
degrades gracefully when no slice is clearly sharpest.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from .simulator import FocalStack
from .validation import DataError

__all__ = [
    "FocusVolume",
    "DepthMap",
    "focus_measure",
    "regress_depth",
    "winner_take_all",
    "all_in_focus",
    "DepthFromFocus",
]

_MEASURES = ("ring_difference", "modified_laplacian")


@dataclass
class FocusVolume:
    """Per-pixel, per-slice sharpness scores (H x W x N).

    Scores must be finite and non-negative wherever valid_mask holds;
    invalid pixels may carry anything.
    """

    scores: np.ndarray
    focus_distances_mm: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.focus_distances_mm = np.asarray(
            self.focus_distances_mm, dtype=np.float64
        )
        if self.scores.ndim != 3:
            raise DataError(f"scores must be HxWxN, got shape {self.scores.shape}")
        if self.focus_distances_mm.shape != (self.scores.shape[2],):
            raise DataError("focus_distances_mm must hold one distance per slice")
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != self.scores.shape[:2]:
            raise DataError("valid_mask shape must match the score planes")
        checked = self.scores[self.valid_mask]
        if checked.size and (
            not np.all(np.isfinite(checked)) or checked.min() < 0
        ):
            raise DataError("scores must be finite and non-negative on valid pixels")

    @property
    def num_slices(self):
        return self.scores.shape[2]


@dataclass
class DepthMap:
    """Metric depth per pixel with a [0, 1] confidence and validity mask."""

    depth_mm: np.ndarray
    confidence: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.depth_mm = np.asarray(self.depth_mm, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.depth_mm.ndim != 2:
            raise DataError("depth_mm must be HxW")
        if self.confidence.shape != self.depth_mm.shape:
            raise DataError("confidence shape must match depth")
        if self.valid_mask.shape != self.depth_mm.shape:
            raise DataError("valid_mask shape must match depth")
        if not np.all(np.isfinite(self.depth_mm[self.valid_mask])):
            raise DataError("depth must be finite on valid pixels")
        conf = self.confidence[self.valid_mask]
        if conf.size and (conf.min() < -1e-9 or conf.max() > 1.0 + 1e-9):
            raise DataError("confidence must lie in [0, 1] on valid pixels")


def _ring_kernel(radius):
    size = 2 * radius + 1
    kernel = np.ones((size, size))
    kernel[1:-1, 1:-1] = 0.0
    return kernel / kernel.sum()


def _ring_difference(plane, radius):
    ring_mean = ndimage.convolve(plane, _ring_kernel(radius), mode="reflect")
    return np.abs(plane - ring_mean)


def _modified_laplacian(plane, radius):
    k = np.zeros(2 * radius + 1)
    k[0] = -1.0
    k[radius] = 2.0
    k[-1] = -1.0
    lx = ndimage.convolve1d(plane, k, axis=1, mode="reflect")
    ly = ndimage.convolve1d(plane, k, axis=0, mode="reflect")
    return np.abs(lx) + np.abs(ly)


def focus_measure(stack, method="ring_difference", radius=2):
    """Score sharpness per pixel per slice and return the focus volume.

    Both measures run per channel, sum over channels, and aggregate with a
    (2*radius+1)^2 box mean.  Scores are valid only where every slice is
    valid over the whole measure support.
    """
    if method not in _MEASURES:
        raise DataError(f"unknown focus measure {method!r}, expected {_MEASURES}")
    radius = int(radius)
    if radius < 1:
        raise DataError("radius must be >= 1")
    height, width = stack.image_shape
    if min(height, width) < 2 * radius + 1:
        raise DataError("stack images are smaller than the measure support")

    measure = _ring_difference if method == "ring_difference" else _modified_laplacian
    size = 2 * radius + 1
    planes = []
    for sl in stack.slices:
        pixels = sl.pixels if sl.pixels.ndim == 3 else sl.pixels[..., None]
        raw = np.zeros((height, width))
        for c in range(pixels.shape[2]):
            raw += measure(pixels[..., c], radius)
        # the running-sum filter can undershoot zero by one epsilon over
        # exactly flat regions; the measure itself is non-negative
        smoothed = ndimage.uniform_filter(raw, size=size, mode="reflect")
        planes.append(np.maximum(smoothed, 0.0))
    scores = np.stack(planes, axis=-1)

    valid = np.ones((height, width), dtype=bool)
    for sl in stack.slices:
        valid &= sl.valid_mask
    support = 2 * radius
    valid = ndimage.binary_erosion(
        valid, structure=np.ones((2 * support + 1,) * 2, dtype=bool), border_value=1
    )
    return FocusVolume(
        scores=scores,
        focus_distances_mm=np.asarray(stack.config.focus_schedule_mm),
        valid_mask=valid,
    )


def regress_depth(volume, temperature=1.0, inverse_depth=False):
    """Soft depth readout from a focus volume.

    p_n = softplus(t * score_n) / sum_k softplus(t * score_k) and the depth
    is the expectation sum_n p_n * F_n over the focus distances (optionally
    over inverse distances, then inverted back).  Softplus keeps every
    weight positive, so the result is a proper distribution for any finite
    scores and the depth always lands inside the focus schedule's range.
    Confidence is the peak probability rescaled from [1/N, 1] to [0, 1].
    """
    if temperature <= 0 or not np.isfinite(temperature):
        raise DataError(f"temperature must be positive and finite, got {temperature}")
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        soft = np.logaddexp(0.0, temperature * volume.scores)
        p = soft / soft.sum(axis=-1, keepdims=True)
        f = volume.focus_distances_mm
        if inverse_depth:
            depth = 1.0 / (p / f).sum(axis=-1)
        else:
            depth = (p * f).sum(axis=-1)
        # invalid pixels may carry non-finite scores; pin them to something
        # writable
        depth = np.where(np.isfinite(depth), depth, f.min())
        depth = np.clip(depth, f.min(), f.max())
        n = volume.num_slices
        peak = p.max(axis=-1)
        if n > 1:
            confidence = (peak - 1.0 / n) / (1.0 - 1.0 / n)
        else:
            confidence = np.ones_like(peak)
        confidence = np.clip(
            np.where(np.isfinite(confidence), confidence, 0.0), 0.0, 1.0
        )
    return DepthMap(depth_mm=depth, confidence=confidence, valid_mask=volume.valid_mask)


def winner_take_all(volume):
    """Hard depth readout: the focus distance of the best-scoring slice.

    Ties resolve toward the smaller slice index.
    """
    best = np.argmax(volume.scores, axis=-1)
    depth = volume.focus_distances_mm[best]
    return DepthMap(
        depth_mm=depth,
        confidence=np.ones(depth.shape),
        valid_mask=volume.valid_mask,
    )


def all_in_focus(stack, volume):
    """Composite image taking each pixel from its sharpest slice."""
    if volume.scores.shape[:2] != stack.image_shape:
        raise DataError("volume and stack shapes do not match")
    if volume.num_slices != stack.num_slices:
        raise DataError("volume and stack slice counts do not match")
    best = np.argmax(volume.scores, axis=-1)
    pixels = np.stack([sl.pixels for sl in stack.slices], axis=2)
    idx = best[..., None, None]
    return np.take_along_axis(pixels, idx, axis=2)[:, :, 0, :]


class DepthFromFocus(BaseEstimator):
    """Estimator interface for the focus-volume depth pipeline."""

    def __init__(
        self,
        measure="ring_difference",
        radius=2,
        temperature=1.0,
        wta=False,
        inverse_depth=False,
    ):
        self.measure = measure
        self.radius = radius
        self.temperature = temperature
        self.wta = wta
        self.inverse_depth = inverse_depth

    def fit(self, X, y=None):
        if not isinstance(X, FocalStack):
            raise DataError("DepthFromFocus expects a FocalStack")
        self.focus_volume_ = focus_measure(X, self.measure, self.radius)
        if self.wta:
            self.depth_map_ = winner_take_all(self.focus_volume_)
        else:
            self.depth_map_ = regress_depth(
                self.focus_volume_, self.temperature, self.inverse_depth
            )
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X, y).depth_map_

    def predict(self, X):
        return self.fit_predict(X)
