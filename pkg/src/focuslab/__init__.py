"""Focal-stack simulation, alignment, and depth-from-focus toolkit."""

from ._version import __version__
from .align import (
    AlignResult,
    RobustLossParams,
    StackAligner,
    align_stack,
    initial_fov_align,
    robust_loss,
    solve_slice,
)
from .basis import (
    ALPHA_BOUND,
    BasisCoefficients,
    basis_flow,
    compose_coefficients,
    invert_coefficients,
    mean_endpoint_error,
    warp_basis,
)
from .calib import (
    CirclePattern,
    ErrorRanges,
    IntrinsicErrorCalibrator,
    detect_circles,
    error_model_from_ranges,
    error_ranges_from_text,
    error_ranges_to_text,
    estimate_ranges,
    fit_basis,
)
from .fileio import (
    RunManifest,
    load_stack,
    read_camera_file,
    read_pfm,
    read_png,
    save_stack,
    write_camera_file,
    write_pfm,
    write_png,
)
from .focusvol import (
    DepthFromFocus,
    DepthMap,
    FocusVolume,
    all_in_focus,
    focus_measure,
    regress_depth,
    winner_take_all,
)
from .metrics import MetricReport, evaluate, parse_report_table, report_table
from .optics import (
    CameraConfig,
    LensState,
    coc_diameter_px,
    lens_states,
    pixel_pitch_mm,
    sensor_distance,
    target_slice_index,
)
from .simulator import (
    ErrorModel,
    FocalSlice,
    FocalStack,
    disc_kernel,
    gaussian_kernel,
    render_slice,
    render_stack,
)
from .validation import DataError, NumericalError

__all__ = [
    "__version__",
    "ALPHA_BOUND",
    "AlignResult",
    "BasisCoefficients",
    "CameraConfig",
    "CirclePattern",
    "DataError",
    "DepthFromFocus",
    "DepthMap",
    "ErrorModel",
    "ErrorRanges",
    "FocalSlice",
    "FocalStack",
    "FocusVolume",
    "IntrinsicErrorCalibrator",
    "LensState",
    "MetricReport",
    "NumericalError",
    "RobustLossParams",
    "RunManifest",
    "StackAligner",
    "align_stack",
    "all_in_focus",
    "basis_flow",
    "coc_diameter_px",
    "compose_coefficients",
    "detect_circles",
    "disc_kernel",
    "error_model_from_ranges",
    "error_ranges_from_text",
    "error_ranges_to_text",
    "estimate_ranges",
    "evaluate",
    "fit_basis",
    "focus_measure",
    "gaussian_kernel",
    "initial_fov_align",
    "invert_coefficients",
    "lens_states",
    "load_stack",
    "mean_endpoint_error",
    "parse_report_table",
    "pixel_pitch_mm",
    "read_camera_file",
    "read_pfm",
    "read_png",
    "regress_depth",
    "render_slice",
    "render_stack",
    "report_table",
    "robust_loss",
    "save_stack",
    "sensor_distance",
    "solve_slice",
    "target_slice_index",
    "warp_basis",
    "winner_take_all",
    "write_camera_file",
    "write_pfm",
    "write_png",
]
