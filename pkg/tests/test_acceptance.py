"""Acceptance suite: every shipped claim checked end to end.

Each criterion prints one PASS/FAIL line (run with -s to see them on
success).  Tolerances are part of the contract; do not loosen them here.
"""

import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from focuslab import align, calib, focusvol, metrics, nnops, optics, scenes, simulator
from focuslab.basis import BasisCoefficients, compose_coefficients, invert_coefficients


@contextmanager
def criterion(num, label):
    try:
        yield
    except Exception:
        print(f"FAIL criterion {num}: {label}")
        raise
    print(f"PASS criterion {num}: {label}")


def test_criterion_1_optics_hand_values():
    with criterion(1, "thin-lens hand values and FoV product"):
        start = time.perf_counter()
        config = optics.CameraConfig(50.0, 36.0, 2.0, 2000.0, 1024, 768,
                                     (1000.0, 2000.0))
        s_near = optics.sensor_distance(config, 0)
        s_far = optics.sensor_distance(config, 1)
        assert abs(s_near - 50000.0 / 950.0) < 1e-6 * (50000.0 / 950.0)
        assert abs(s_far - 100000.0 / 1950.0) < 1e-6 * (100000.0 / 1950.0)
        states = optics.lens_states(config)
        assert states[0].relative_fov == 1.0
        expected_fov = (50000.0 / 950.0) / (100000.0 / 1950.0)
        assert abs(states[1].relative_fov - expected_fov) < 1e-6 * expected_fov

        sweep = optics.CameraConfig(35.0, 24.0, 2.8, 1500.0, 640, 480,
                                    tuple(np.linspace(600.0, 3000.0, 9)))
        product = sweep.work_distance_mm * sweep.sensor_width_mm
        for state in optics.lens_states(sweep):
            assert abs(state.fov_mm * state.sensor_distance_mm - product) \
                < 1e-9 * product
        assert time.perf_counter() - start < 1.0


def test_criterion_2_simulator_fidelity():
    with criterion(2, "PSF matches dense disc convolution, invariances hold"):
        size = 64
        camera = scenes.default_camera(size=(size, size), num_slices=5)
        target = optics.target_slice_index(camera)

        # an isolated unit point against a constant focus plane
        rgb = np.zeros((size, size, 3))
        rgb[size // 2, size // 2] = 1.0
        depth = np.full((size, size), 2600.0)
        rendered = simulator.render_slice(rgb, depth, camera, target, layers=8)
        coc = optics.coc_diameter_px(camera, target, 2600.0)
        kernel = simulator.disc_kernel(coc)
        chan = rgb[..., 0]
        dense = convolve2d(chan, kernel, mode="same") / convolve2d(
            np.ones_like(chan), kernel, mode="same"
        )
        assert np.abs(rendered[..., 0] - dense).sum() < 1e-4

        flat = np.full((size, size, 3), 0.4)
        _, vary_depth = scenes.make_test_scene(seed=3, size=(size, size))
        stack, _ = simulator.render_stack(flat, vary_depth, camera, None, layers=8)
        for sl in stack.slices:
            assert np.abs(sl.pixels[sl.valid_mask] - 0.4).max() < 1e-6

        model = simulator.ErrorModel(seed=11)
        first, inj1 = simulator.render_stack(rgb, depth, camera, model, layers=8)
        second, inj2 = simulator.render_stack(rgb, depth, camera, model, layers=8)
        assert inj1 == inj2
        for a, b in zip(first.slices, second.slices):
            assert np.array_equal(a.pixels, b.pixels)
            assert np.array_equal(a.valid_mask, b.valid_mask)


def test_criterion_3_alignment_round_trip():
    with criterion(3, "warp recovery: mean EPE < 0.25 px, alpha < 1e-3, < 60 s"):
        size = 256
        camera = scenes.default_camera(size=(size, size), num_slices=5,
                                       f_number=8.0)
        center = ((size - 1) / 2.0, (size - 1) / 2.0)
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        dx, dy = xs - center[0], ys - center[1]

        start = time.perf_counter()
        epes, dalphas = [], []
        for i in range(20):
            rgb, depth = scenes.make_test_scene(seed=i, size=(size, size))
            stack, injected = simulator.render_stack(
                rgb, depth, camera, simulator.ErrorModel(seed=1000 + i), layers=16
            )
            fovs = stack.slice_relative_fovs()
            _, result = align.align_stack(stack)
            for n in range(stack.num_slices):
                if n == stack.target_index:
                    continue
                # the solved coefficients are correction warps; their inverse
                # estimates the hidden error, composed with breathing it
                # estimates the full injected warp
                breath = BasisCoefficients(1.0 / fovs[n] - 1.0, 0.0, 0.0)
                recovered = compose_coefficients(
                    invert_coefficients(result.coefficients[n]), breath
                )
                truth = compose_coefficients(injected[n], breath)
                da = recovered.alpha - truth.alpha
                db = recovered.beta - truth.beta
                dg = recovered.gamma - truth.gamma
                epes.append(
                    np.sqrt((da * dx + db) ** 2 + (da * dy + dg) ** 2).mean()
                )
                dalphas.append(abs(da))
                for level in result.loss_traces[n]:
                    for prev, cur in zip(level, level[1:]):
                        assert cur <= prev
        elapsed = time.perf_counter() - start
        assert len(epes) == 80
        assert np.mean(epes) < 0.25
        assert np.mean(dalphas) < 1e-3
        assert elapsed < 60.0


def test_criterion_4_calibration_recovery():
    with criterion(4, "uniform +-2 px errors recovered from circle sweeps"):
        rgb, depth, _ = scenes.make_circle_scene(size=(160, 160))
        camera = scenes.default_camera(size=(160, 160), num_slices=6,
                                       f_number=8.0)
        model_kwargs = dict(scale_err_range=(0.0, 0.0),
                            translation_err_range_px=(-2.0, 2.0))
        stacks = []
        for i in range(40):
            model = simulator.ErrorModel(seed=100 + i, **model_kwargs)
            stack, _ = simulator.render_stack(rgb, depth, camera, model,
                                              layers=4, breathing=False)
            stacks.append(stack)
        ranges = calib.estimate_ranges(stacks)
        assert ranges.sample_count >= 200
        uniform_std = 2.0 / np.sqrt(3.0)
        for stats in (ranges.beta, ranges.gamma):
            assert -2.2 <= stats.min <= stats.max <= 2.2
            assert abs(stats.std - uniform_std) < 0.2 * uniform_std


def _dot_scene(seed, plane_mm, occ_mm, size=256, grid=3, block=36, dots=220):
    rng = np.random.default_rng(seed)
    rgb = np.full((size, size, 3), 0.5)
    yy, xx = np.mgrid[0:size, 0:size]
    textured = np.zeros((size, size), dtype=bool)
    for _ in range(dots):
        cy, cx = rng.uniform(6, size - 6, size=2)
        radius = rng.uniform(1.6, 2.6)
        color = rng.uniform(0.0, 1.0, size=3)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        cover = np.clip((radius - dist) / 2.0 + 0.5, 0.0, 1.0)
        rgb = rgb * (1 - cover[..., None]) + color * cover[..., None]
        textured |= dist <= radius + 1.5
    depth = np.full((size, size), float(plane_mm))
    step = size // (grid + 1)
    for r in range(grid):
        for c in range(grid):
            cy, cx = (r + 1) * step, (c + 1) * step
            depth[cy - block // 2 : cy + block // 2,
                  cx - block // 2 : cx + block // 2] = float(occ_mm)
    return rgb, depth, textured


def _depth_mae(stack, gt_depth, textured):
    volume = focusvol.focus_measure(stack)
    estimate = focusvol.regress_depth(volume, temperature=200.0)
    gt = focusvol.DepthMap(gt_depth, np.ones_like(gt_depth), textured)
    report = metrics.evaluate(estimate, gt, (900.0, 2600.0))
    return report.mae, estimate


def test_criterion_5_depth_accuracy():
    with criterion(5, "depth MAE under slice spacing, alignment helps"):
        size = 256
        camera = scenes.default_camera(size=(size, size), num_slices=10)
        schedule = np.asarray(camera.focus_schedule_mm)
        spacing = (schedule.max() - schedule.min()) / (len(schedule) - 1)
        scene_params = [(1900.0, 1000.0), (1950.0, 1050.0), (2050.0, 1100.0),
                       (2150.0, 950.0), (2200.0, 1150.0)]
        for i, (plane, occ) in enumerate(scene_params):
            rgb, depth, textured = _dot_scene(i, plane, occ, size=size)
            model = simulator.ErrorModel(seed=70 + i)
            stack, _ = simulator.render_stack(rgb, depth, camera, model,
                                              layers=24)
            mae_raw, est_raw = _depth_mae(stack, depth, textured)
            aligned, _ = align.align_stack(stack)
            mae_aligned, est_aligned = _depth_mae(aligned, depth, textured)
            for est in (est_raw, est_aligned):
                assert est.depth_mm.min() >= schedule.min()
                assert est.depth_mm.max() <= schedule.max()
            assert mae_aligned < spacing
            assert mae_aligned < mae_raw


def test_criterion_6_gradients_and_pyramid():
    with criterion(6, "finite-difference gradients < 1e-4, pyramid shapes"):
        for name, err in nnops.gradient_check_suite(seed=0):
            assert err < 1e-4, f"{name}: {err}"
        x = np.random.default_rng(0).standard_normal((16, 16, 5, 4))
        levels = nnops.feature_pyramid(x, nnops.init_pyramid_weights(4, seed=0))
        h, w, n, c = 16, 16, 5, 4
        for lv, tensor in enumerate(levels):
            assert tensor.data.shape == (h // 2**lv, w // 2**lv, n, c * 2**lv)
            assert tensor.level == lv


def test_criterion_7_metric_oracles():
    with criterion(7, "hand-computed metrics, MAE <= RMSE, delta order"):
        ones = np.ones((8, 8))
        gt = focusvol.DepthMap(10.0 * ones, ones, ones.astype(bool))
        pred = focusvol.DepthMap(11.0 * ones, ones, ones.astype(bool))
        report = metrics.evaluate(pred, gt, (5.0, 20.0))
        assert report.mae == 1.0
        assert report.mse == 1.0
        assert report.rmse == 1.0
        assert abs(report.abs_rel - 0.1) < 1e-12
        assert abs(report.sq_rel - 0.1) < 1e-12
        assert abs(report.rmse_log - np.log(1.1)) < 1e-12
        assert report.delta1 == report.delta2 == report.delta3 == 1.0

        rng = np.random.default_rng(7)
        for _ in range(100):
            g = rng.uniform(600.0, 2900.0, size=(12, 12))
            p = np.clip(g + rng.normal(0.0, 200.0, size=(12, 12)), 1.0, None)
            mask = np.ones((12, 12), dtype=bool)
            unit = np.ones((12, 12))
            rep = metrics.evaluate(
                focusvol.DepthMap(p, unit, mask),
                focusvol.DepthMap(g, unit, mask),
                (500.0, 3000.0),
            )
            assert rep.mae <= rep.rmse + 1e-12
            assert rep.delta1 <= rep.delta2 <= rep.delta3


def _run_pipeline(cwd):
    steps = [
        ["scene", "--out", "scene", "--seed", "5", "--size", "48",
         "--slices", "3"],
        ["simulate", "--rgb", "scene/rgb.png", "--depth", "scene/depth.pfm",
         "--camera", "scene/camera.txt", "--out", "stack", "--seed", "5",
         "--layers", "6"],
        ["align", "--stack", "stack", "--out", "aligned"],
        ["depth", "--stack", "aligned", "--out", "depth", "--temp", "200"],
        ["eval", "--pred", "depth/depth.pfm", "--gt", "scene/depth.pfm",
         "--fmin", "900", "--fmax", "2600", "--csv", "report.csv"],
    ]
    for step in steps:
        proc = subprocess.run(
            [sys.executable, "-m", "focuslab.cli"] + step,
            cwd=cwd, capture_output=True, text=True,
        )
        assert proc.returncode == 0, (step, proc.stderr)


def test_criterion_8_end_to_end_determinism(tmp_path):
    with criterion(8, "bundled pipeline byte-identical across two runs"):
        root_a, root_b = tmp_path / "a", tmp_path / "b"
        root_a.mkdir()
        root_b.mkdir()
        _run_pipeline(root_a)
        _run_pipeline(root_b)

        files_a = sorted(p.relative_to(root_a)
                         for p in root_a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(root_b)
                         for p in root_b.rglob("*") if p.is_file())
        assert files_a == files_b
        manifests = [rel for rel in files_a if rel.name.endswith("manifest.json")]
        assert manifests
        for rel in manifests:
            assert (root_a / rel).read_bytes() == (root_b / rel).read_bytes()
        for rel in files_a:
            assert (root_a / rel).read_bytes() == (root_b / rel).read_bytes(), rel
