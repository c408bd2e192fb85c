"""Focal stack simulator.

Renders a defocused slice per focus distance from an all-in-focus image and a
depth map, then applies the geometric deformations a real sweep would add:
focus breathing derived from the lens geometry plus a hidden per-slice basis
warp drawn from an error model.  The injected coefficients are returned so
round-trip tests can compare recovered against true warps.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from . import optics
from .basis import BasisCoefficients, compose_coefficients, warp_basis
from .validation import DataError, as_depth_map, as_float_image, as_mask

__all__ = [
    "FocalSlice",
    "FocalStack",
    "ErrorModel",
    "disc_kernel",
    "gaussian_kernel",
    "render_slice",
    "render_stack",
]


@dataclass
class FocalSlice:
    """One slice of a focal stack plus its capture metadata."""

    pixels: np.ndarray
    focus_distance_mm: float
    principal_point_px: tuple
    slice_index: int
    valid_mask: np.ndarray = None

    def __post_init__(self):
        self.pixels = as_float_image(self.pixels, name="slice pixels")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.pixels.shape[:2], dtype=bool)
        else:
            self.valid_mask = as_mask(
                self.valid_mask, self.pixels.shape[:2], name="valid_mask"
            )
        self.principal_point_px = (
            float(self.principal_point_px[0]),
            float(self.principal_point_px[1]),
        )


@dataclass
class FocalStack:
    """An ordered set of focal slices captured with one camera config.

    relative_fovs overrides the breathing metadata: None means "derive from
    the camera config", while an explicit array records the actual per-slice
    relative field of view (all ones for a stack already at uniform FoV).
    """

    slices: list
    config: optics.CameraConfig
    target_index: int = None
    relative_fovs: np.ndarray = None

    def __post_init__(self):
        if len(self.slices) == 0:
            raise DataError("a focal stack needs at least one slice")
        if len(self.slices) != self.config.num_slices:
            raise DataError(
                f"{len(self.slices)} slices but the schedule has "
                f"{self.config.num_slices} focus distances"
            )
        shape = self.slices[0].pixels.shape
        for n, sl in enumerate(self.slices):
            if sl.pixels.shape != shape:
                raise DataError("all slices must share one image shape")
            if sl.slice_index != n:
                raise DataError("slices must be ordered by slice_index")
            if not math.isclose(
                sl.focus_distance_mm, self.config.focus_schedule_mm[n]
            ):
                raise DataError(
                    "slice focus distances must match the camera schedule"
                )
        if self.target_index is None:
            self.target_index = optics.target_slice_index(self.config)
        if self.relative_fovs is not None:
            self.relative_fovs = np.asarray(self.relative_fovs, dtype=np.float64)
            if self.relative_fovs.shape != (len(self.slices),):
                raise DataError("relative_fovs must hold one value per slice")

    @property
    def num_slices(self):
        return len(self.slices)

    @property
    def image_shape(self):
        return self.slices[0].pixels.shape[:2]

    def slice_relative_fovs(self):
        """Per-slice relative FoV, from the override or the lens geometry."""
        if self.relative_fovs is not None:
            return self.relative_fovs.copy()
        return np.array([st.relative_fov for st in optics.lens_states(self.config)])


@dataclass(frozen=True)
class ErrorModel:
    """Uniform ranges for the hidden per-slice deformation of a sweep.

    scale_err_range is a multiplicative relative-FoV error (the alpha
    coefficient), translation_err_range_px bounds beta and gamma
    independently.  Both ranges must contain zero so an error-free sweep is
    representable.  Coefficients are drawn per slice from an RNG stream split
    off the seed, so evaluation order cannot change the draws.  Errors are
    expressed relative to the target slice, whose own deviation is
    unobservable from the stack; the target therefore receives the identity.
    """

    scale_err_range: tuple = (-0.005, 0.005)
    translation_err_range_px: tuple = (-2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_err_range", "translation_err_range_px"):
            low, high = getattr(self, name)
            if not (low <= 0.0 <= high):
                raise DataError(f"{name} must contain 0, got ({low}, {high})")
        object.__setattr__(self, "seed", int(self.seed))

    def sample(self, slice_index):
        rng = np.random.default_rng([self.seed, int(slice_index)])
        alpha = rng.uniform(*self.scale_err_range)
        beta = rng.uniform(*self.translation_err_range_px)
        gamma = rng.uniform(*self.translation_err_range_px)
        return BasisCoefficients(alpha, beta, gamma)


def disc_kernel(diameter_px, subsamples=5):
    """Normalized disc blur kernel of the given diameter in pixels.

    Cell weights are the area fraction inside the disc, estimated on a
    subsamples x subsamples grid per cell, so the kernel varies smoothly
    with diameter.
    """
    radius = float(diameter_px) / 2.0
    if radius <= 0:
        raise DataError("disc diameter must be positive")
    half = int(math.ceil(radius + 0.5))
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    sub = (np.arange(subsamples) + 0.5) / subsamples - 0.5
    x = offsets[None, :, None, None] + sub[None, None, None, :]
    y = offsets[:, None, None, None] + sub[None, None, :, None]
    coverage = (x * x + y * y <= radius * radius).mean(axis=(2, 3))
    total = coverage.sum()
    if total <= 0:
        coverage[half, half] = 1.0
        total = 1.0
    return coverage / total


def gaussian_kernel(diameter_px):
    """Gaussian substitute for the disc, sigma = diameter / 4."""
    sigma = float(diameter_px) / 4.0
    if sigma <= 0:
        raise DataError("gaussian diameter must be positive")
    half = max(1, int(math.ceil(3.0 * sigma)))
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _blur_kernel(diameter_px, psf):
    if psf == "disc":
        return disc_kernel(diameter_px)
    if psf == "gauss":
        return gaussian_kernel(diameter_px)
    raise DataError(f"unknown psf {psf!r}, expected 'disc' or 'gauss'")


def _layer_bins(depth, layers):
    """Assign pixels to inverse-depth bins; returns (bin index map, rep distances)."""
    d_min = float(depth.min())
    d_max = float(depth.max())
    if math.isclose(d_min, d_max, rel_tol=1e-12):
        return np.zeros(depth.shape, dtype=np.intp), np.array([d_min])
    edges = np.linspace(1.0 / d_max, 1.0 / d_min, layers + 1)
    inv = 1.0 / depth
    bins = np.clip(np.digitize(inv, edges[1:-1]), 0, layers - 1)
    reps = 2.0 / (edges[:-1] + edges[1:])
    return bins, reps


def render_slice(rgb, depth_mm, config, slice_index, layers=32, psf="disc"):
    """Render one defocused slice with a layered depth-of-field model.

    The depth range is discretized into `layers` bins spaced uniformly in
    inverse depth.  Each layer (premultiplied color plus alpha) is blurred by
    the point spread of its representative distance and the layers are
    composited back to front; the result is normalized by the accumulated
    alpha, which keeps a constant image constant.  Blur discs below one pixel
    across are passed through unblurred.
    """
    rgb = as_float_image(rgb, name="rgb")
    depth = as_depth_map(depth_mm, min_depth_mm=config.focal_length_mm)
    if rgb.shape[:2] != depth.shape:
        raise DataError(
            f"rgb shape {rgb.shape[:2]} does not match depth shape {depth.shape}"
        )
    if not 0 <= slice_index < config.num_slices:
        raise DataError(f"slice_index {slice_index} outside schedule")
    if layers < 1:
        raise DataError("layers must be >= 1")

    channels = rgb if rgb.ndim == 3 else rgb[..., None]
    bins, reps = _layer_bins(depth, layers)
    out = np.zeros_like(channels)
    acc = np.zeros(depth.shape, dtype=np.float64)
    # Far to near: bin 0 holds the largest distances by construction.
    for k in range(len(reps)):
        mask = bins == k
        if not mask.any():
            continue
        alpha = mask.astype(np.float64)
        premult = channels * alpha[..., None]
        coc = optics.coc_diameter_px(config, slice_index, float(reps[k]))
        if coc < 1.0:
            blurred_c, blurred_a = premult, alpha
        else:
            kernel = _blur_kernel(coc, psf)
            blurred_a = fftconvolve(alpha, kernel, mode="same")
            blurred_c = np.stack(
                [
                    fftconvolve(premult[..., c], kernel, mode="same")
                    for c in range(premult.shape[2])
                ],
                axis=-1,
            )
        out = blurred_c + (1.0 - blurred_a[..., None]) * out
        acc = blurred_a + (1.0 - blurred_a) * acc
    safe = acc > 1e-6
    result = np.where(safe[..., None], out / np.where(safe, acc, 1.0)[..., None], 0.0)
    result = np.clip(result, 0.0, 1.0)
    return result if rgb.ndim == 3 else result[..., 0]


def render_stack(
    rgb,
    depth_mm,
    config,
    error_model=None,
    layers=32,
    breathing=True,
    psf="disc",
):
    """Simulate a full focal sweep.

    Each slice is rendered at its focus distance and then resampled once
    under the composition of its hidden error warp and the breathing warp
    implied by the lens geometry (the breathing warp is the exact inverse of
    the metadata-driven correction, so an aligner knowing the metadata can
    undo it).  Returns (stack, injected) where injected is the list of
    ground-truth BasisCoefficients, zeros for the target slice.
    """
    rgb = as_float_image(rgb, name="rgb")
    states = optics.lens_states(config)
    target = optics.target_slice_index(config)
    height, width = np.asarray(depth_mm).shape
    center = ((width - 1) / 2.0, (height - 1) / 2.0)

    slices = []
    injected = []
    for n, state in enumerate(states):
        rendered = render_slice(rgb, depth_mm, config, n, layers=layers, psf=psf)
        if error_model is not None and n != target:
            err = error_model.sample(n)
        else:
            err = BasisCoefficients()
        if breathing:
            breath = BasisCoefficients(1.0 / state.relative_fov - 1.0, 0.0, 0.0)
        else:
            breath = BasisCoefficients()
        total = compose_coefficients(err, breath)
        if total.as_tuple() == (0.0, 0.0, 0.0):
            pixels, valid = rendered, np.ones((height, width), dtype=bool)
        else:
            pixels, valid = warp_basis(rendered, total, center)
            pixels = np.clip(pixels, 0.0, 1.0)
        slices.append(
            FocalSlice(
                pixels=pixels,
                focus_distance_mm=state.focus_distance_mm,
                principal_point_px=center,
                slice_index=n,
                valid_mask=valid,
            )
        )
        injected.append(err)
    stack = FocalStack(
        slices=slices,
        config=config,
        target_index=target,
        relative_fovs=None if breathing else np.ones(len(slices)),
    )
    return stack, injected
