"""Thin-lens focal sweep geometry.

A camera sweeping focus moves its lens, so every slice of a focal stack is
captured at a slightly different sensor distance.  That changes the field of
view per slice (focus breathing) and sets the circle of confusion for any
object distance.  Everything here is derived from the thin-lens equation
1/f = 1/s + 1/F with focal length f, sensor distance s, and focus distance F.
"""

from dataclasses import dataclass, field

import numpy as np

from .validation import DataError

__all__ = [
    "CameraConfig",
    "LensState",
    "sensor_distance",
    "lens_states",
    "target_slice_index",
    "pixel_pitch_mm",
    "coc_diameter_px",
    "camera_config_to_text",
    "camera_config_from_text",
]

_CONFIG_KEYS = (
    "focal_length_mm",
    "sensor_width_mm",
    "f_number",
    "work_distance_mm",
    "image_width_px",
    "image_height_px",
    "focus_schedule_mm",
)


@dataclass(frozen=True)
class CameraConfig:
    """Intrinsics of a focus-sweeping camera.

    focus_schedule_mm holds the focus distances of the sweep, one per slice,
    and must be strictly monotonic with every entry beyond the focal length.
    """

    focal_length_mm: float
    sensor_width_mm: float
    f_number: float
    work_distance_mm: float
    image_width_px: int
    image_height_px: int
    focus_schedule_mm: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(
            self, "focus_schedule_mm", tuple(float(v) for v in self.focus_schedule_mm)
        )
        for key in (
            "focal_length_mm",
            "sensor_width_mm",
            "f_number",
            "work_distance_mm",
        ):
            value = getattr(self, key)
            if not np.isfinite(value) or value <= 0:
                raise DataError(f"{key} must be positive and finite, got {value}")
        for key in ("image_width_px", "image_height_px"):
            value = getattr(self, key)
            if int(value) != value or value <= 0:
                raise DataError(f"{key} must be a positive integer, got {value}")
            object.__setattr__(self, key, int(value))
        schedule = self.focus_schedule_mm
        if len(schedule) == 0:
            raise DataError("focus_schedule_mm must contain at least one distance")
        if any(not np.isfinite(v) for v in schedule):
            raise DataError("focus_schedule_mm contains non-finite values")
        if any(v <= self.focal_length_mm for v in schedule):
            raise DataError("every focus distance must exceed the focal length")
        diffs = np.diff(schedule)
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise DataError("focus_schedule_mm must be strictly monotonic")

    @property
    def num_slices(self):
        return len(self.focus_schedule_mm)


@dataclass(frozen=True)
class LensState:
    """Per-slice lens geometry: where the sensor sits and what it sees."""

    slice_index: int
    focus_distance_mm: float
    sensor_distance_mm: float
    fov_mm: float
    relative_fov: float


def sensor_distance(config, slice_index):
    """Sensor distance s = F*f / (F - f) for the given slice (mm)."""
    focus = config.focus_schedule_mm[slice_index]
    f = config.focal_length_mm
    return focus * f / (focus - f)


def lens_states(config):
    """Lens state for every slice of the sweep.

    The field of view at the working distance is fov = W * A / s, so the
    slice with the largest sensor distance sees the smallest field of view.
    Relative fields of view are expressed against that slice, which makes it
    the natural alignment target: exactly one slice has relative_fov == 1
    and every other slice is >= 1.
    """
    s = np.array([sensor_distance(config, n) for n in range(config.num_slices)])
    fov = config.work_distance_mm * config.sensor_width_mm / s
    s_min_fov = s.max()
    return [
        LensState(
            slice_index=n,
            focus_distance_mm=config.focus_schedule_mm[n],
            sensor_distance_mm=s[n],
            fov_mm=fov[n],
            relative_fov=s_min_fov / s[n],
        )
        for n in range(config.num_slices)
    ]


def target_slice_index(config):
    """Index of the minimum field-of-view slice (the alignment target)."""
    return int(np.argmin(np.asarray(config.focus_schedule_mm)))


def pixel_pitch_mm(config):
    return config.sensor_width_mm / config.image_width_px


def coc_diameter_px(config, slice_index, object_distance_mm):
    """Circle-of-confusion diameter in pixels.

    For an object at distance F_p seen by a slice focused at F_n, the blur
    disc on the sensor has diameter D * |s_p - s_n| / s_p with aperture
    D = f / f_number and s the thin-lens sensor distances.  Supports scalar
    or array object distances; every distance must exceed the focal length.
    """
    distance = np.asarray(object_distance_mm, dtype=np.float64)
    f = config.focal_length_mm
    if np.any(distance <= f):
        raise DataError("object distance must exceed the focal length")
    aperture = f / config.f_number
    s_obj = distance * f / (distance - f)
    s_slice = sensor_distance(config, slice_index)
    diameter_mm = aperture * np.abs(s_obj - s_slice) / s_obj
    result = diameter_mm / pixel_pitch_mm(config)
    return float(result) if np.isscalar(object_distance_mm) else result


def camera_config_to_text(config):
    """Serialize a config to flat key = value lines."""
    lines = []
    for key in _CONFIG_KEYS:
        value = getattr(config, key)
        if key == "focus_schedule_mm":
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def camera_config_from_text(text):
    """Parse the key = value form written by camera_config_to_text."""
    fields = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"malformed camera config line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value
    missing = [k for k in _CONFIG_KEYS if k not in fields]
    if missing:
        raise DataError(f"camera config missing keys: {missing}")
    extra = [k for k in fields if k not in _CONFIG_KEYS]
    if extra:
        raise DataError(f"camera config has unknown keys: {extra}")
    try:
        return CameraConfig(
            focal_length_mm=float(fields["focal_length_mm"]),
            sensor_width_mm=float(fields["sensor_width_mm"]),
            f_number=float(fields["f_number"]),
            work_distance_mm=float(fields["work_distance_mm"]),
            image_width_px=int(fields["image_width_px"]),
            image_height_px=int(fields["image_height_px"]),
            focus_schedule_mm=tuple(
                float(v) for v in fields["focus_schedule_mm"].split(",") if v.strip()
            ),
        )
    except ValueError as exc:
        raise DataError(f"camera config has a malformed value: {exc}") from exc
