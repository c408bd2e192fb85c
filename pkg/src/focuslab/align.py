"""Focal stack alignment.

Slices are aligned to the minimum field-of-view slice in two stages.  First
the deterministic part: every slice is warped by the relative field of view
computed from its metadata (focus breathing correction).  Second, the hidden
per-slice deviation is estimated photometrically by minimizing a robust
residual against the target slice,

    L = mean over valid pixels of (|I_ref(G + D(G)) - I_target(G)| + eps)^q

over the three coefficients of the basis warp D, with q = 0.4 and
eps = 0.01.  The minimization is a damped Gauss-Newton iteration with IRLS
weights, run coarse to fine over a Gaussian pyramid.  The final stack is
produced by resampling each original slice once under the composition of
both warps.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .basis import (
    ALPHA_BOUND,
    BasisCoefficients,
    compose_coefficients,
    warp_basis,
)
from .simulator import FocalSlice, FocalStack
from .validation import DataError, NumericalError, to_gray

__all__ = [
    "RobustLossParams",
    "AlignResult",
    "robust_loss",
    "initial_fov_align",
    "solve_slice",
    "align_stack",
    "StackAligner",
]

_MIN_OVERLAP = 16
_STEP_TOL = 1e-6
_MAX_ITERS = 50
_COND_LIMIT = 1e8
_RESIDUAL_CLAMP = 1e-6
# IRLS on the q = 0.4 penalty converges linearly with a rate close to one,
# so near the optimum the iteration keeps taking accepted micro-steps; treat
# a relative improvement at or below this as converged.
_LOSS_TOL = 1e-6


@dataclass(frozen=True)
class RobustLossParams:
    """Exponent q in (0, 1] and stabilizer eps > 0 of the robust penalty."""

    q: float = 0.4
    eps: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.q <= 1.0):
            raise DataError(f"q must lie in (0, 1], got {self.q}")
        if self.eps <= 0.0:
            raise DataError(f"eps must be positive, got {self.eps}")


@dataclass
class AlignResult:
    """Per-slice outcome of aligning a stack.

    coefficients holds the residual warp solved on top of the metadata-driven
    field-of-view correction; the target slice is exactly (0, 0, 0).
    loss_traces[n] is a list of per-pyramid-level loss sequences; within a
    level the sequence is the initial loss followed by accepted-step losses.
    """

    coefficients: list
    final_loss: list
    converged: list
    loss_traces: list = field(default_factory=list)
    target_index: int = 0


def robust_loss(residuals, mask=None, params=None):
    """Mean robust penalty (|r| + eps)^q over the valid pixels."""
    params = params or RobustLossParams()
    r = np.asarray(residuals, dtype=np.float64)
    if mask is None:
        values = r.ravel()
    else:
        values = r[np.asarray(mask, dtype=bool)]
    if values.size == 0:
        raise NumericalError("robust loss over an empty mask")
    return float(np.mean((np.abs(values) + params.eps) ** params.q))


def initial_fov_align(stack):
    """Undo focus breathing using only the stack metadata.

    Each slice is warped by alpha = relative_fov - 1 about its principal
    point; the target slice has relative_fov == 1 and is untouched.  The
    returned stack records uniform relative FoVs, so applying this again is
    the identity.
    """
    fovs = stack.slice_relative_fovs()
    slices = []
    for n, sl in enumerate(stack.slices):
        alpha = fovs[n] - 1.0
        if alpha == 0.0:
            slices.append(
                FocalSlice(
                    pixels=sl.pixels.copy(),
                    focus_distance_mm=sl.focus_distance_mm,
                    principal_point_px=sl.principal_point_px,
                    slice_index=sl.slice_index,
                    valid_mask=sl.valid_mask.copy(),
                )
            )
            continue
        warped, valid = warp_basis(
            sl.pixels,
            BasisCoefficients(alpha, 0.0, 0.0),
            sl.principal_point_px,
            mask=sl.valid_mask,
        )
        slices.append(
            FocalSlice(
                pixels=np.clip(warped, 0.0, 1.0),
                focus_distance_mm=sl.focus_distance_mm,
                principal_point_px=sl.principal_point_px,
                slice_index=sl.slice_index,
                valid_mask=valid,
            )
        )
    return FocalStack(
        slices=slices,
        config=stack.config,
        target_index=stack.target_index,
        relative_fovs=np.ones(stack.num_slices),
    )


def _gauss5():
    k = np.exp(-0.5 * np.arange(-2.0, 3.0) ** 2)
    return k / k.sum()


_PYR_KERNEL = _gauss5()


def _blur(image):
    out = ndimage.convolve1d(image, _PYR_KERNEL, axis=0, mode="mirror")
    return ndimage.convolve1d(out, _PYR_KERNEL, axis=1, mode="mirror")


def _pyr_down(image, mask):
    """Mask-normalized 5x5 Gaussian blur followed by factor-2 decimation."""
    m = mask.astype(np.float64)
    den = _blur(m)
    num = _blur(image * m)
    blurred = np.where(den > 1e-9, num / np.maximum(den, 1e-9), 0.0)
    return blurred[::2, ::2], (den >= 0.995)[::2, ::2]


def _build_pyramid(image, mask, levels):
    """Fine-to-coarse list of (image, mask); levels shrink if the image is tiny."""
    pyramid = [(image, mask)]
    while len(pyramid) < levels and min(pyramid[-1][0].shape) >= 16:
        pyramid.append(_pyr_down(*pyramid[-1]))
    return pyramid


def _sample(arr, ys, xs):
    return ndimage.map_coordinates(
        arr, np.stack([ys.ravel(), xs.ravel()]), order=1, mode="nearest"
    ).reshape(ys.shape)


def _mask_bounding_box(mask):
    """(y0, y1, x0, x1) when the mask is exactly an axis-aligned rectangle.

    Slice masks produced by basis warps of full frames are rectangles, so the
    solver can trade interpolated mask lookups for four comparisons.  Returns
    None for any other mask shape.
    """
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        return None
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    if mask[y0 : y1 + 1, x0 : x1 + 1].all() and mask.sum() == (y1 - y0 + 1) * (
        x1 - x0 + 1
    ):
        return float(y0), float(y1), float(x0), float(x1)
    return None


class _LevelData:
    """Precomputed per-level arrays for the Gauss-Newton iteration."""

    def __init__(self, ref, ref_mask, tgt, tgt_mask, center):
        self.ref = ref
        self.tgt = tgt
        self.tgt_mask = tgt_mask
        self.center = center
        eroded = ndimage.binary_erosion(
            ref_mask, structure=np.ones((3, 3), dtype=bool), border_value=0
        )
        self.ref_mask = eroded.astype(np.float64)
        self.mask_box = _mask_bounding_box(eroded)
        h, w = ref.shape
        self.grid_y, self.grid_x = np.meshgrid(
            np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
        )
        self.rad_x = self.grid_x - center[0]
        self.rad_y = self.grid_y - center[1]

    def residual(self, coeffs):
        alpha, beta, gamma = coeffs
        xs = self.grid_x + alpha * self.rad_x + beta
        ys = self.grid_y + alpha * self.rad_y + gamma
        h, w = self.ref.shape
        inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
        warped = _sample(self.ref, ys, xs)
        if self.mask_box is not None:
            y0, y1, x0, x1 = self.mask_box
            in_mask = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        else:
            in_mask = _sample(self.ref_mask, ys, xs) >= 0.999
        valid = inside & in_mask & self.tgt_mask
        return warped - self.tgt, valid, warped

    def gradients(self, warped, alpha):
        # The warp scales the grid by 1 + alpha, so gradients of the warped
        # image are the resampled reference gradients times that factor.
        gy, gx = np.gradient(warped)
        scale = 1.0 / (1.0 + alpha)
        return gx * scale, gy * scale


def _solve_level(data, coeffs, params, loss_trace):
    """Damped Gauss-Newton with IRLS weights on one pyramid level.

    Returns (coeffs, loss, converged, diverged).  Only steps that decrease
    the robust loss are accepted, so the recorded trace is non-increasing
    within the level.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    r, valid, warped = data.residual(coeffs)
    if valid.sum() < _MIN_OVERLAP:
        raise NumericalError("no overlapping valid pixels between slices")
    loss = robust_loss(r, valid, params)
    loss_trace.append(loss)
    lam = 1e-3
    converged = False

    for _ in range(_MAX_ITERS):
        rv = r[valid]
        absr = np.maximum(np.abs(rv), _RESIDUAL_CLAMP)
        weights = params.q * (np.abs(rv) + params.eps) ** (params.q - 1.0) / absr

        gx, gy = data.gradients(warped, coeffs[0])
        gxs = gx[valid]
        gys = gy[valid]
        j_alpha = gxs * data.rad_x[valid] + gys * data.rad_y[valid]
        jac = np.stack([j_alpha, gxs, gys], axis=1)

        a_mat = jac.T @ (jac * weights[:, None])
        g_vec = jac.T @ (weights * rv)

        frozen = False
        if np.linalg.cond(a_mat) > _COND_LIMIT:
            frozen = True
            a_sub = a_mat[1:, 1:]
            if np.linalg.cond(a_sub) > _COND_LIMIT:
                return tuple(coeffs), loss, False, False

        accepted = False
        while lam <= 1e8:
            damped = a_mat + lam * np.diag(np.maximum(np.diag(a_mat), 1e-12))
            if frozen:
                step = np.zeros(3)
                step[1:] = np.linalg.solve(damped[1:, 1:], -g_vec[1:])
            else:
                step = np.linalg.solve(damped, -g_vec)
            candidate = coeffs + step
            if abs(candidate[0]) >= ALPHA_BOUND:
                return tuple(coeffs), loss, False, True
            r_new, valid_new, warped_new = data.residual(candidate)
            if valid_new.sum() < _MIN_OVERLAP:
                lam *= 10.0
                continue
            loss_new = robust_loss(r_new, valid_new, params)
            if loss_new < loss:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # No descent direction left at maximum damping: a stationary point.
            converged = True
            break

        # Reweighting makes plain IRLS steps crawl along valleys, so extend
        # the accepted step geometrically while the loss keeps dropping.
        factor = 2.0
        while factor <= 16.0:
            extended = coeffs + factor * step
            if abs(extended[0]) >= ALPHA_BOUND:
                break
            r_ext, valid_ext, warped_ext = data.residual(extended)
            if valid_ext.sum() < _MIN_OVERLAP:
                break
            loss_ext = robust_loss(r_ext, valid_ext, params)
            if loss_ext >= loss_new:
                break
            candidate, r_new, valid_new, warped_new = (
                extended,
                r_ext,
                valid_ext,
                warped_ext,
            )
            loss_new = loss_ext
            factor *= 2.0

        improvement = loss - loss_new
        taken = candidate - coeffs
        coeffs, r, valid, warped = candidate, r_new, valid_new, warped_new
        loss = loss_new
        loss_trace.append(loss)
        lam = max(lam / 3.0, 1e-8)
        if np.linalg.norm(taken) < _STEP_TOL or improvement <= _LOSS_TOL * loss:
            converged = True
            break
    return tuple(coeffs), loss, converged, False


def solve_slice(reference, target, params=None, levels=3, loss_trace=None):
    """Estimate the basis warp that aligns `reference` onto `target`.

    Runs coarse to fine on a 5x5 Gaussian (sigma 1) pyramid with factor-2
    decimation; beta and gamma double between levels while alpha is scale
    free.  Returns (BasisCoefficients, final robust loss, converged flag).
    A caller-supplied loss_trace list collects one sub-list per pyramid
    level, each holding that level's initial loss followed by the losses of
    its accepted steps.
    """
    params = params or RobustLossParams()
    if levels < 1:
        raise DataError("levels must be >= 1")
    ref_gray = to_gray(reference.pixels)
    tgt_gray = to_gray(target.pixels)
    if ref_gray.shape != tgt_gray.shape:
        raise DataError("reference and target slices must share one shape")
    center = reference.principal_point_px
    trace = loss_trace if loss_trace is not None else []

    ref_pyr = _build_pyramid(ref_gray, reference.valid_mask, levels)
    tgt_pyr = _build_pyramid(tgt_gray, target.valid_mask, levels)
    depth = min(len(ref_pyr), len(tgt_pyr))

    coeffs = np.zeros(3)
    loss = np.inf
    converged = False
    for level in reversed(range(depth)):
        scale = 2.0 ** level
        data = _LevelData(
            ref_pyr[level][0],
            ref_pyr[level][1],
            tgt_pyr[level][0],
            tgt_pyr[level][1],
            (center[0] / scale, center[1] / scale),
        )
        level_trace = []
        coeffs_t, loss, converged, diverged = _solve_level(
            data, coeffs, params, level_trace
        )
        trace.append(level_trace)
        coeffs = np.asarray(coeffs_t)
        if diverged:
            return BasisCoefficients(*coeffs), loss, False
        if level > 0:
            coeffs[1:] *= 2.0
    return BasisCoefficients(*coeffs), float(loss), bool(converged)


def align_stack(stack, params=None, levels=3):
    """Align every slice of a stack to its minimum-FoV target slice.

    The metadata-driven FoV correction and the photometric residual warp are
    composed and applied to each original slice in a single resample.
    Returns (aligned stack, AlignResult).
    """
    if stack.num_slices < 2:
        raise DataError("alignment needs at least two slices")
    params = params or RobustLossParams()
    fovs = stack.slice_relative_fovs()
    staged = initial_fov_align(stack)
    target = staged.slices[stack.target_index]

    coefficients = []
    losses = []
    converged_flags = []
    traces = []
    slices = []
    for n, sl in enumerate(stack.slices):
        if n == stack.target_index:
            residual = BasisCoefficients()
            loss = robust_loss(np.zeros(1), None, params)
            ok = True
            trace = [[loss]]
        else:
            trace = []
            residual, loss, ok = solve_slice(
                staged.slices[n], target, params, levels, loss_trace=trace
            )
        coefficients.append(residual)
        losses.append(loss)
        converged_flags.append(ok)
        traces.append(trace)

        total = compose_coefficients(
            BasisCoefficients(fovs[n] - 1.0, 0.0, 0.0), residual
        )
        if total.as_tuple() == (0.0, 0.0, 0.0):
            pixels, valid = sl.pixels.copy(), sl.valid_mask.copy()
        else:
            pixels, valid = warp_basis(
                sl.pixels, total, sl.principal_point_px, mask=sl.valid_mask
            )
            pixels = np.clip(pixels, 0.0, 1.0)
        slices.append(
            FocalSlice(
                pixels=pixels,
                focus_distance_mm=sl.focus_distance_mm,
                principal_point_px=sl.principal_point_px,
                slice_index=sl.slice_index,
                valid_mask=valid,
            )
        )

    aligned = FocalStack(
        slices=slices,
        config=stack.config,
        target_index=stack.target_index,
        relative_fovs=np.ones(stack.num_slices),
    )
    result = AlignResult(
        coefficients=coefficients,
        final_loss=losses,
        converged=converged_flags,
        loss_traces=traces,
        target_index=stack.target_index,
    )
    return aligned, result


class StackAligner(BaseEstimator, TransformerMixin):
    """Estimator interface around align_stack.

    fit estimates per-slice residual coefficients on a stack; transform
    resamples a stack of the same geometry with the fitted warps.
    """

    def __init__(self, q=0.4, eps=0.01, levels=3):
        self.q = q
        self.eps = eps
        self.levels = levels

    def fit(self, X, y=None):
        if not isinstance(X, FocalStack):
            raise DataError("StackAligner expects a FocalStack")
        aligned, result = align_stack(
            X, RobustLossParams(self.q, self.eps), self.levels
        )
        self.result_ = result
        self.coefficients_ = result.coefficients
        self._fitted_stack = X
        self._aligned_stack = aligned
        return self

    def transform(self, X):
        check_is_fitted(self, "result_")
        if X is self._fitted_stack:
            return self._aligned_stack
        if not isinstance(X, FocalStack):
            raise DataError("StackAligner expects a FocalStack")
        if X.num_slices != len(self.coefficients_):
            raise DataError("stack slice count does not match the fitted stack")
        fovs = X.slice_relative_fovs()
        slices = []
        for n, sl in enumerate(X.slices):
            total = compose_coefficients(
                BasisCoefficients(fovs[n] - 1.0, 0.0, 0.0), self.coefficients_[n]
            )
            pixels, valid = warp_basis(
                sl.pixels, total, sl.principal_point_px, mask=sl.valid_mask
            )
            slices.append(
                FocalSlice(
                    pixels=np.clip(pixels, 0.0, 1.0),
                    focus_distance_mm=sl.focus_distance_mm,
                    principal_point_px=sl.principal_point_px,
                    slice_index=sl.slice_index,
                    valid_mask=valid,
                )
            )
        return FocalStack(
            slices=slices,
            config=X.config,
            target_index=X.target_index,
            relative_fovs=np.ones(X.num_slices),
        )
