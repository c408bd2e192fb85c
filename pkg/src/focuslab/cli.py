"""Command line interface.

Subcommands cover the full pipeline: scene (write the bundled procedural
test scene), simulate, calibrate, align, depth, eval, selftest.  Every
command that produces an output directory also writes a manifest.json
recording the resolved run; runs with equal manifests produce bit-identical
outputs.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
inputs), 3 numerical failure (divergence, empty valid set).
"""

import argparse
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import calib as calib_mod
from . import fileio, focusvol, metrics, nnops, optics, scenes, simulator
from ._version import __version__
from .basis import BasisCoefficients, compose_coefficients, invert_coefficients, warp_basis
from .validation import DataError, NumericalError

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _build_parser():
    parser = _Parser(prog="focuslab", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, metavar="N",
                        help="limit BLAS/OpenMP worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene", parents=[], help="write the bundled procedural scene")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--size", type=int, default=160, metavar="PX")
    p.add_argument("--slices", type=int, default=10, metavar="N")
    p.set_defaults(func=_cmd_scene)

    p = sub.add_parser("simulate", help="render a misaligned focal stack")
    p.add_argument("--rgb", required=True, metavar="P")
    p.add_argument("--depth", required=True, metavar="P")
    p.add_argument("--camera", required=True, metavar="P")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--errors", metavar="P",
                       help="calibrated error-range file to draw warps from")
    group.add_argument("--no-misalign", action="store_true",
                       help="inject no hidden warps (breathing only)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--layers", type=int, default=32, metavar="K")
    p.add_argument("--png", action="store_true", help="write 8-bit PNG slices")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("calibrate", help="estimate error ranges from circle sweeps")
    p.add_argument("--stacks", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="P")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("align", help="align a focal stack to its target slice")
    p.add_argument("--stack", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--q", type=float, default=0.4)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--levels", type=int, default=3)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("depth", help="estimate depth from a focal stack")
    p.add_argument("--stack", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--measure", choices=("ring", "mlap"), default="ring")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--wta", action="store_true", help="hard argmax readout")
    p.set_defaults(func=_cmd_depth)

    p = sub.add_parser("eval", help="compare predicted against ground-truth depth")
    p.add_argument("--pred", required=True, metavar="P")
    p.add_argument("--gt", required=True, metavar="P")
    p.add_argument("--fmin", type=float, required=True, metavar="MM")
    p.add_argument("--fmax", type=float, required=True, metavar="MM")
    p.add_argument("--csv", metavar="P", help="append a CSV row here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("selftest", help="run invariant and numerical checks")
    p.add_argument("--grad", action="store_true", help="include gradient checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def _load_image(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if path.suffix.lower() == ".pfm":
        arr = fileio.read_pfm(path).astype(np.float64)
        return np.clip(arr, 0.0, 1.0)
    return fileio.read_png(path)


def _manifest(args, inputs, outputs):
    params = {
        k: v
        for k, v in vars(args).items()
        if k not in ("func", "command", "threads") and v is not None
    }
    return fileio.RunManifest(
        subcommand=args.command,
        parameters={k: params[k] for k in sorted(params)},
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        seed=getattr(args, "seed", None),
        version=__version__,
    )


def _cmd_scene(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = (args.size, args.size)
    rgb, depth = scenes.make_test_scene(seed=args.seed, size=size)
    camera = scenes.default_camera(size=size, num_slices=args.slices)
    fileio.write_png(out / "rgb.png", rgb)
    fileio.write_pfm(out / "depth.pfm", depth)
    fileio.write_camera_file(out / "camera.txt", camera)
    fileio.write_manifest(out, _manifest(args, [], [args.out]))
    print(f"wrote scene to {out}")
    return 0


def _cmd_simulate(args):
    rgb = _load_image(args.rgb)
    depth_path = Path(args.depth)
    if not depth_path.exists():
        raise DataError(f"no such file: {depth_path}")
    depth = fileio.read_pfm(depth_path).astype(np.float64)
    if depth.ndim != 2:
        raise DataError("depth file must be a single-channel PFM")
    camera = fileio.read_camera_file(args.camera)
    if args.no_misalign:
        model = None
    elif args.errors:
        ranges = calib_mod.error_ranges_from_text(
            Path(args.errors).read_text(encoding="ascii")
        )
        model = calib_mod.error_model_from_ranges(ranges, seed=args.seed)
    else:
        model = simulator.ErrorModel(seed=args.seed)
    stack, injected = simulator.render_stack(
        rgb, depth, camera, error_model=model, layers=args.layers
    )
    out = Path(args.out)
    fileio.save_stack(out, stack, depth_mm=depth,
                      image_format="png" if args.png else "pfm")
    lines = ["# slice_index,alpha,beta,gamma"]
    for n, coeffs in enumerate(injected):
        lines.append(f"{n},{coeffs.alpha!r},{coeffs.beta!r},{coeffs.gamma!r}")
    (out / "injected_coefficients.txt").write_text("\n".join(lines) + "\n",
                                                   encoding="ascii")
    fileio.write_manifest(
        out, _manifest(args, [args.rgb, args.depth, args.camera], [args.out])
    )
    print(f"wrote {stack.num_slices} slices to {out}")
    return 0


def _cmd_calibrate(args):
    root = Path(args.stacks)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory of stacks")
    stack_dirs = sorted(p for p in root.iterdir() if (p / "metadata.txt").exists())
    if not stack_dirs:
        raise DataError(f"{root} contains no stack directories")
    staged = []
    for d in stack_dirs:
        stack, _ = fileio.load_stack(d)
        staged.append(align_mod.initial_fov_align(stack))
    ranges = calib_mod.estimate_ranges(staged)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(calib_mod.error_ranges_to_text(ranges), encoding="ascii")
    manifest = _manifest(args, [str(d) for d in stack_dirs], [args.out])
    Path(str(out) + ".manifest.json").write_text(manifest.to_json(), encoding="ascii")
    print(f"calibrated {ranges.sample_count} slice warps into {out}")
    return 0


def _cmd_align(args):
    stack, depth = fileio.load_stack(args.stack)
    params = align_mod.RobustLossParams(q=args.q, eps=args.eps)
    aligned, result = align_mod.align_stack(stack, params, levels=args.levels)
    out = Path(args.out)
    fileio.save_stack(out, aligned, depth_mm=depth)
    lines = ["# slice_index,alpha,beta,gamma,final_loss,converged"]
    for n in range(aligned.num_slices):
        c = result.coefficients[n]
        lines.append(
            f"{n},{c.alpha!r},{c.beta!r},{c.gamma!r},"
            f"{float(result.final_loss[n])!r},{result.converged[n]}"
        )
    (out / "align_report.txt").write_text("\n".join(lines) + "\n", encoding="ascii")
    fileio.write_manifest(out, _manifest(args, [args.stack], [args.out]))
    bad = sum(1 for ok in result.converged if not ok)
    print(f"aligned {aligned.num_slices} slices to {out}"
          + (f" ({bad} did not converge)" if bad else ""))
    return 0


def _cmd_depth(args):
    stack, _ = fileio.load_stack(args.stack)
    method = "ring_difference" if args.measure == "ring" else "modified_laplacian"
    volume = focusvol.focus_measure(stack, method=method, radius=args.radius)
    if args.wta:
        depth_map = focusvol.winner_take_all(volume)
    else:
        depth_map = focusvol.regress_depth(volume, temperature=args.temp)
    composite = focusvol.all_in_focus(stack, volume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_pfm(out / "depth.pfm", depth_map.depth_mm)
    fileio.write_pfm(out / "confidence.pfm", depth_map.confidence)
    fileio.write_png(out / "aif.png", composite)
    fileio.write_manifest(out, _manifest(args, [args.stack], [args.out]))
    print(f"wrote depth, confidence, and all-in-focus to {out}")
    return 0


def _cmd_eval(args):
    def load_depth(path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"no such file: {path}")
        arr = fileio.read_pfm(path).astype(np.float64)
        if arr.ndim != 2:
            raise DataError(f"{path} must be a single-channel depth PFM")
        valid = np.isfinite(arr) & (arr > 0)
        return focusvol.DepthMap(
            depth_mm=np.where(valid, arr, 1.0),
            confidence=np.ones(arr.shape),
            valid_mask=valid,
        )

    pred = load_depth(args.pred)
    gt = load_depth(args.gt)
    report = metrics.evaluate(pred, gt, (args.fmin, args.fmax))
    sys.stdout.write(metrics.report_table([(Path(args.pred).stem, report)]))
    if args.csv:
        csv_path = Path(args.csv)
        row = metrics.report_csv_row(Path(args.pred).stem, report)
        if csv_path.exists():
            with open(csv_path, "a", encoding="ascii") as fh:
                fh.write(row + "\n")
        else:
            csv_path.write_text(
                metrics.report_csv_header() + "\n" + row + "\n", encoding="ascii"
            )
    return 0


def _selftest_checks():
    def optics_hand_values():
        config = optics.CameraConfig(50.0, 36.0, 2.0, 2000.0, 1024, 768, (1000.0, 2000.0))
        assert math.isclose(optics.sensor_distance(config, 1), 100000.0 / 1950.0,
                            rel_tol=1e-12)
        assert math.isclose(optics.sensor_distance(config, 0), 50000.0 / 950.0,
                            rel_tol=1e-12)
        states = optics.lens_states(config)
        assert math.isclose(states[1].relative_fov, (50000.0 / 950.0) / (100000.0 / 1950.0),
                            rel_tol=1e-12)
        assert states[0].relative_fov == 1.0

    def fov_product_constant():
        config = optics.CameraConfig(35.0, 24.0, 2.8, 1500.0, 640, 480,
                                     tuple(np.linspace(600, 3000, 7)))
        products = [s.fov_mm * s.sensor_distance_mm for s in optics.lens_states(config)]
        expected = config.work_distance_mm * config.sensor_width_mm
        assert max(abs(p - expected) for p in products) < 1e-9 * expected

    def warp_roundtrip():
        # bilinear sampling reproduces affine images exactly, so a warp
        # followed by its inverse must return the ramp to machine precision
        ys, xs = np.mgrid[0:48, 0:48].astype(float)
        img = 0.3 + 0.4 * xs / 48.0 + 0.2 * ys / 48.0
        coeffs = BasisCoefficients(0.03, 1.2, -0.8)
        warped, _ = warp_basis(img, coeffs, (23.5, 23.5))
        back, valid = warp_basis(warped, invert_coefficients(coeffs), (23.5, 23.5))
        inner = np.zeros_like(valid)
        inner[8:-8, 8:-8] = True
        assert np.abs(back - img)[inner & valid].max() < 1e-12

    def warp_composition():
        ys, xs = np.mgrid[0:40, 0:40].astype(float)
        img = 0.2 + 0.5 * xs / 40.0 + 0.3 * ys / 40.0
        a = BasisCoefficients(0.02, 0.7, -0.4)
        b = BasisCoefficients(-0.015, -0.3, 0.5)
        step1, _ = warp_basis(img, a, (19.5, 19.5))
        step2, _ = warp_basis(step1, b, (19.5, 19.5))
        direct, _ = warp_basis(img, compose_coefficients(a, b), (19.5, 19.5))
        inner = slice(6, -6)
        assert np.abs(step2 - direct)[inner, inner].max() < 1e-12

    def robust_loss_values():
        from .align import robust_loss
        assert math.isclose(robust_loss(np.zeros((4, 4))), 0.01**0.4, rel_tol=1e-12)
        assert math.isclose(robust_loss(np.array([1.0])), 1.01**0.4, rel_tol=1e-12)

    def softplus_distribution():
        volume = focusvol.FocusVolume(
            scores=np.array([[[math.log(math.e - 1.0), 0.0]]]),
            focus_distances_mm=np.array([1000.0, 2000.0]),
            valid_mask=np.ones((1, 1), dtype=bool),
        )
        dm = focusvol.regress_depth(volume)
        p0 = 1.0 / (1.0 + math.log(2.0))
        expected = p0 * 1000.0 + (1.0 - p0) * 2000.0
        assert math.isclose(dm.depth_mm[0, 0], expected, rel_tol=1e-12)

    def metrics_hand_example():
        gt = focusvol.DepthMap(np.full((8, 8), 10.0), np.ones((8, 8)),
                               np.ones((8, 8), dtype=bool))
        pred = focusvol.DepthMap(np.full((8, 8), 11.0), np.ones((8, 8)),
                                 np.ones((8, 8), dtype=bool))
        report = metrics.evaluate(pred, gt, (5.0, 20.0))
        assert report.mae == 1.0 and report.mse == 1.0
        assert math.isclose(report.abs_rel, 0.1, rel_tol=1e-12)
        assert math.isclose(report.sq_rel, 0.1, rel_tol=1e-12)
        assert report.delta1 == 1.0

    def pfm_roundtrip():
        rng = np.random.default_rng(5)
        arr = rng.standard_normal((13, 9)).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            fileio.write_pfm(Path(tmp) / "x.pfm", arr)
            again = fileio.read_pfm(Path(tmp) / "x.pfm")
        assert np.array_equal(arr, again)

    def weights_roundtrip():
        w = nnops.init_srd_weights(2, seed=9)
        with tempfile.TemporaryDirectory() as tmp:
            nnops.save_weights(Path(tmp) / "w.bin", w)
            again = nnops.load_weights(Path(tmp) / "w.bin")
        for a, b in zip(w.arrays(), again.arrays()):
            assert np.array_equal(a.astype(np.float32), b)

    def conv_fast_matches_naive():
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 5, 3, 2))
        k = rng.standard_normal((3, 3, 2, 4))
        assert np.abs(nnops.conv2d(x, k) - nnops.conv2d_naive(x, k)).max() < 1e-6
        k3 = rng.standard_normal((3, 3, 3, 2, 3))
        assert np.abs(nnops.conv3d(x, k3) - nnops.conv3d_naive(x, k3)).max() < 1e-6

    def pyramid_shapes():
        x = np.random.default_rng(1).standard_normal((16, 16, 5, 4))
        levels = nnops.feature_pyramid(x, nnops.init_pyramid_weights(4, seed=4))
        shapes = tuple(lv.data.shape for lv in levels)
        assert shapes == ((16, 16, 5, 4), (8, 8, 5, 8), (4, 4, 5, 16))

    def simulator_determinism():
        rgb, depth = scenes.make_test_scene(seed=2, size=(48, 48))
        camera = scenes.default_camera(size=(48, 48), num_slices=3)
        model = simulator.ErrorModel(seed=7)
        s1, g1 = simulator.render_stack(rgb, depth, camera, model, layers=8)
        s2, g2 = simulator.render_stack(rgb, depth, camera, model, layers=8)
        assert g1 == g2
        for a, b in zip(s1.slices, s2.slices):
            assert np.array_equal(a.pixels, b.pixels)

    return [
        ("optics_hand_values", optics_hand_values),
        ("fov_product_constant", fov_product_constant),
        ("warp_roundtrip", warp_roundtrip),
        ("warp_composition", warp_composition),
        ("robust_loss_values", robust_loss_values),
        ("softplus_distribution", softplus_distribution),
        ("metrics_hand_example", metrics_hand_example),
        ("pfm_roundtrip", pfm_roundtrip),
        ("weights_roundtrip", weights_roundtrip),
        ("conv_fast_matches_naive", conv_fast_matches_naive),
        ("pyramid_shapes", pyramid_shapes),
        ("simulator_determinism", simulator_determinism),
    ]


def _cmd_selftest(args):
    failures = 0
    for name, check in _selftest_checks():
        try:
            check()
        except Exception as exc:  # noqa: BLE001 -- report, do not crash
            failures += 1
            print(f"FAIL {name} ({exc})")
        else:
            print(f"PASS {name}")
    if args.grad:
        for name, err in nnops.gradient_check_suite(seed=0):
            if err < 1e-4:
                print(f"PASS grad/{name} (rel err {err:.2e})")
            else:
                failures += 1
                print(f"FAIL grad/{name} (rel err {err:.2e})")
    if failures:
        print(f"{failures} checks failed")
        return NUMERIC_EXIT
    print("all checks passed")
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (DataError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return DATA_EXIT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
