"""Procedural test scenes.

The bundled scene is a strongly textured depth gradient with two occluders,
enough structure to exercise rendering, alignment, and depth recovery
without shipping any image data.  A flat circle-grid scene supports the
calibration path.
"""

import numpy as np
from scipy import ndimage

from .optics import CameraConfig

__all__ = ["make_test_scene", "make_circle_scene", "default_camera"]


def _texture(rng, shape):
    base = rng.uniform(0.0, 1.0, size=shape + (3,))
    tex = 0.40 * base
    tex += 0.30 * ndimage.gaussian_filter(base, (1.5, 1.5, 0.0))
    tex += 0.30 * ndimage.gaussian_filter(base, (4.0, 4.0, 0.0))
    lo, hi = tex.min(), tex.max()
    return 0.08 + 0.84 * (tex - lo) / (hi - lo)


def make_test_scene(seed=0, size=(160, 160), depth_range_mm=(900.0, 2600.0)):
    """Textured gradient plus occluders; returns (rgb, depth_mm).

    The background depth ramps top to bottom through the far half of the
    range; a disc and a rectangle occlude it at two near depths.  All depths
    stay strictly inside depth_range_mm.
    """
    rng = np.random.default_rng(seed)
    height, width = size
    d0, d1 = (float(v) for v in depth_range_mm)
    span = d1 - d0

    rgb = _texture(rng, (height, width))
    ramp = np.linspace(d1 - 0.02 * span, d0 + 0.45 * span, height)
    depth = np.tile(ramp[:, None], (1, width))

    yy, xx = np.mgrid[0:height, 0:width]
    disc_c = (0.36 * height, 0.30 * width)
    disc_r = 0.16 * min(height, width)
    disc = (yy - disc_c[0]) ** 2 + (xx - disc_c[1]) ** 2 <= disc_r**2
    depth[disc] = d0 + 0.12 * span

    ry0, ry1 = int(0.55 * height), int(0.85 * height)
    rx0, rx1 = int(0.52 * width), int(0.88 * width)
    depth[ry0:ry1, rx0:rx1] = d0 + 0.26 * span

    # Distinct texture statistics on the occluders help focus separation.
    occ = disc.copy()
    occ[ry0:ry1, rx0:rx1] = True
    rgb[occ] = 1.0 - rgb[occ]
    return rgb, depth


def make_circle_scene(
    size=(160, 160), grid=(3, 3), radius_px=9.0, depth_mm=1500.0, margin_px=30,
    rim_px=4.0,
):
    """Flat calibration target: dark circle grid on a light background.

    Circles fade over rim_px so the pattern is band limited.  Hard rims
    alias; when the stack is later resampled, aliased rims pick up a
    coherent sub-pixel drift that looks like a false scale error, which
    would poison calibration statistics.
    """
    height, width = size
    rows, cols = grid
    ys = np.linspace(margin_px, height - 1 - margin_px, rows)
    xs = np.linspace(margin_px, width - 1 - margin_px, cols)
    yy, xx = np.mgrid[0:height, 0:width]
    coverage = np.zeros((height, width))
    for cy in ys:
        for cx in xs:
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            local = np.clip((radius_px - dist) / rim_px + 0.5, 0.0, 1.0)
            coverage = np.maximum(coverage, local)
    rgb = np.full((height, width, 3), 0.88)
    rgb = rgb * (1.0 - coverage[..., None]) + 0.10 * coverage[..., None]
    depth = np.full((height, width), float(depth_mm))
    centers = [(float(cx), float(cy)) for cy in ys for cx in xs]
    return rgb, depth, centers


def default_camera(size=(160, 160), depth_range_mm=(900.0, 2600.0), num_slices=10,
                   f_number=1.4):
    """Camera used by the bundled pipeline: 85 mm lens on a 36 mm sensor.

    The fast aperture keeps blur differences between neighbouring focus
    settings above a pixel over most of the depth range, which is what makes
    focus measures informative.
    """
    height, width = size
    d0, d1 = depth_range_mm
    schedule = tuple(np.linspace(d0, d1, num_slices))
    return CameraConfig(
        focal_length_mm=85.0,
        sensor_width_mm=36.0,
        f_number=f_number,
        work_distance_mm=2000.0,
        image_width_px=width,
        image_height_px=height,
        focus_schedule_mm=schedule,
    )
