"""Depth evaluation metrics and report formatting.

Frozen oracle values for the constant hand case (gt = 10, pred = 11):
    MAE = 1, MSE = 1, RMSE = 1, AbsRel = 0.1, SqRel = 0.1
    rmse_log = ln(1.1) = 0.09531017980432486
    delta1 = 1 (ratio 1.1 < 1.25)
"""

import numpy as np
import pytest

from focuslab.focusvol import DepthMap
from focuslab.metrics import (
    MetricReport,
    evaluate,
    parse_report_table,
    report_csv_header,
    report_csv_row,
    report_keyvalues,
    report_table,
)
from focuslab.validation import DataError, NumericalError

LN_1_1 = 0.09531017980432486
RANGE = (500.0, 3000.0)


def dm(values, mask=None):
    arr = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = np.ones(arr.shape, dtype=bool)
    return DepthMap(
        depth_mm=arr, confidence=np.ones(arr.shape), valid_mask=np.asarray(mask)
    )


def random_pair(rng, shape=(12, 12)):
    gt = rng.uniform(600.0, 2900.0, shape)
    pred = np.clip(gt + rng.normal(0.0, 300.0, shape), 1.0, None)
    return dm(pred), dm(gt)


class TestEvaluate:
    def test_perfect_prediction(self):
        gt = dm(np.full((8, 8), 1500.0))
        report = evaluate(dm(np.full((8, 8), 1500.0)), gt, RANGE)
        assert report.mae == 0.0
        assert report.mse == 0.0
        assert report.rmse == 0.0
        assert report.rmse_log == 0.0
        assert report.abs_rel == 0.0
        assert report.sq_rel == 0.0
        assert report.bumpiness == 0.0
        assert report.delta1 == report.delta2 == report.delta3 == 1.0
        assert report.valid_count == 64

    def test_constant_offset_hand_values(self):
        gt = dm(np.full((10, 10), 10.0))
        pred = dm(np.full((10, 10), 11.0))
        report = evaluate(pred, gt, (1.0, 100.0))
        assert report.mae == pytest.approx(1.0, rel=1e-12)
        assert report.mse == pytest.approx(1.0, rel=1e-12)
        assert report.rmse == pytest.approx(1.0, rel=1e-12)
        assert report.rmse_log == pytest.approx(LN_1_1, rel=1e-12)
        assert report.abs_rel == pytest.approx(0.1, rel=1e-12)
        assert report.sq_rel == pytest.approx(0.1, rel=1e-12)
        assert report.delta1 == 1.0

    def test_out_of_range_pixels_excluded(self):
        gt_vals = np.full((6, 6), 1500.0)
        gt_vals[:3] = 10000.0
        pred = dm(np.full((6, 6), 1500.0))
        report = evaluate(pred, dm(gt_vals), RANGE)
        assert report.valid_count == 18
        assert report.mae == 0.0

    def test_invalid_mask_pixels_excluded(self):
        gt_vals = np.full((6, 6), 1500.0)
        mask = np.ones((6, 6), bool)
        mask[0] = False
        pred_vals = np.full((6, 6), 1500.0)
        pred_vals[0] = 9e9
        report = evaluate(dm(pred_vals, mask), dm(gt_vals), RANGE)
        assert report.valid_count == 30
        assert report.mae == 0.0

    def test_masked_values_never_leak(self):
        rng = np.random.default_rng(0)
        pred, gt = random_pair(rng)
        mask = rng.random(gt.depth_mm.shape) < 0.7
        a = evaluate(dm(pred.depth_mm, mask), gt, RANGE)
        poisoned = pred.depth_mm.copy()
        poisoned[~mask] = 123456.0
        b = evaluate(dm(poisoned, mask), gt, RANGE)
        assert a == b

    def test_nonpositive_pred_excluded_from_log_only(self):
        gt = dm(np.full((4, 4), 1000.0))
        pred_vals = np.full((4, 4), 1000.0)
        pred_vals[0, 0] = 0.0
        report = evaluate(dm(pred_vals), gt, RANGE)
        assert report.valid_count == 16
        assert report.rmse_log == 0.0
        assert report.mae == pytest.approx(1000.0 / 16.0, rel=1e-12)

    def test_mae_le_rmse(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred, gt = random_pair(rng, shape=(6, 6))
            report = evaluate(pred, gt, RANGE)
            assert report.mae <= report.rmse + 1e-12

    def test_delta_monotone(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pred, gt = random_pair(rng, shape=(6, 6))
            report = evaluate(pred, gt, RANGE)
            assert report.delta1 <= report.delta2 <= report.delta3

    def test_all_finite_when_valid(self):
        rng = np.random.default_rng(3)
        pred, gt = random_pair(rng)
        report = evaluate(pred, gt, RANGE)
        for name in ("mae", "mse", "rmse", "rmse_log", "abs_rel", "sq_rel",
                     "bumpiness", "delta1", "delta2", "delta3"):
            assert np.isfinite(getattr(report, name))

    def test_joint_scaling(self):
        rng = np.random.default_rng(4)
        pred, gt = random_pair(rng)
        base = evaluate(pred, gt, RANGE)
        s = 3.0
        scaled = evaluate(
            dm(s * pred.depth_mm), dm(s * gt.depth_mm), (s * RANGE[0], s * RANGE[1])
        )
        assert scaled.abs_rel == pytest.approx(base.abs_rel, rel=1e-12)
        assert scaled.rmse_log == pytest.approx(base.rmse_log, rel=1e-9)
        assert scaled.delta1 == base.delta1
        assert scaled.delta2 == base.delta2
        assert scaled.delta3 == base.delta3
        assert scaled.mae == pytest.approx(s * base.mae, rel=1e-12)
        assert scaled.rmse == pytest.approx(s * base.rmse, rel=1e-12)
        assert scaled.sq_rel == pytest.approx(s * base.sq_rel, rel=1e-12)

    def test_permutation_invariance_of_pointwise_metrics(self):
        rng = np.random.default_rng(5)
        pred, gt = random_pair(rng)
        perm = rng.permutation(pred.depth_mm.size)
        shape = pred.depth_mm.shape
        a = evaluate(pred, gt, RANGE)
        b = evaluate(
            dm(pred.depth_mm.ravel()[perm].reshape(shape)),
            dm(gt.depth_mm.ravel()[perm].reshape(shape)),
            RANGE,
        )
        for name in ("mae", "mse", "rmse", "rmse_log", "abs_rel", "sq_rel",
                     "delta1", "delta2", "delta3", "valid_count"):
            assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-12)

    def test_no_valid_pixels(self):
        gt = dm(np.full((4, 4), 10000.0))
        with pytest.raises(NumericalError):
            evaluate(dm(np.full((4, 4), 1500.0)), gt, RANGE)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            evaluate(dm(np.zeros((4, 4)) + 1500), dm(np.zeros((5, 5)) + 1500), RANGE)

    def test_bad_focus_range(self):
        pred = dm(np.full((4, 4), 1500.0))
        with pytest.raises(DataError):
            evaluate(pred, pred, (2000.0, 1000.0))
        with pytest.raises(DataError):
            evaluate(pred, pred, (-1.0, 1000.0))


class TestBumpiness:
    def test_linear_error_is_flat(self):
        xx = np.tile(np.arange(10.0), (10, 1))
        gt = dm(np.full((10, 10), 1000.0))
        pred = dm(1000.0 + 0.5 * xx)
        assert evaluate(pred, gt, RANGE).bumpiness == 0.0

    def test_quadratic_error_hand_value(self):
        # e = 0.01 x^2 has exact second derivative 0.02, zero cross terms:
        # bumpiness = 100 * 0.02 = 2
        xx = np.tile(np.arange(12.0), (12, 1))
        gt = dm(np.full((12, 12), 1000.0))
        pred = dm(1000.0 + 0.01 * xx**2)
        assert evaluate(pred, gt, RANGE).bumpiness == pytest.approx(2.0, rel=1e-9)

    def test_matches_pixel_loop_oracle(self):
        rng = np.random.default_rng(6)
        gt_vals = rng.uniform(1000.0, 2000.0, (9, 9))
        pred_vals = gt_vals + rng.normal(0.0, 20.0, (9, 9))
        report = evaluate(dm(pred_vals), dm(gt_vals), RANGE)

        e = pred_vals - gt_vals
        total, count = 0.0, 0
        for y in range(1, 8):
            for x in range(1, 8):
                exx = e[y, x + 1] - 2 * e[y, x] + e[y, x - 1]
                eyy = e[y + 1, x] - 2 * e[y, x] + e[y - 1, x]
                exy = 0.25 * (
                    e[y + 1, x + 1] - e[y + 1, x - 1] - e[y - 1, x + 1] + e[y - 1, x - 1]
                )
                total += np.sqrt(exx**2 + 2 * exy**2 + eyy**2)
                count += 1
        assert report.bumpiness == pytest.approx(100.0 * total / count, rel=1e-12)

    def test_masked_neighborhoods_skipped(self):
        rng = np.random.default_rng(7)
        gt_vals = rng.uniform(1000.0, 2000.0, (9, 9))
        pred_vals = gt_vals + rng.normal(0.0, 20.0, (9, 9))
        mask = np.ones((9, 9), bool)
        mask[4, 4] = False
        a = evaluate(dm(pred_vals, mask), dm(gt_vals), RANGE)
        poisoned = pred_vals.copy()
        poisoned[4, 4] = 1e6
        b = evaluate(dm(poisoned, mask), dm(gt_vals), RANGE)
        assert a.bumpiness == b.bumpiness


def sample_reports():
    rng = np.random.default_rng(8)
    out = []
    for k in range(3):
        pred, gt = random_pair(rng)
        out.append((f"run{k}", evaluate(pred, gt, RANGE)))
    return out


class TestReportTable:
    def test_single_row_shape(self):
        reports = sample_reports()[:1]
        lines = report_table(reports).splitlines()
        assert len(lines) == 2
        assert lines[0].split()[0] == "name"
        assert lines[1].split()[0] == "run0"

    def test_identical_reports_identical_cells(self):
        _, report = sample_reports()[0]
        text = report_table([("first", report), ("second", report)])
        lines = text.splitlines()
        assert lines[1].split()[1:] == lines[2].split()[1:]

    def test_parse_round_trip_within_print_precision(self):
        reports = sample_reports()
        rows = parse_report_table(report_table(reports))
        assert [name for name, _ in rows] == ["run0", "run1", "run2"]
        for (_, parsed), (_, report) in zip(rows, reports):
            for column, value in parsed.items():
                original = getattr(report, column)
                if column == "valid_count":
                    assert value == original
                else:
                    assert value == float(f"{original:.4g}")

    def test_parse_rejects_garbage(self):
        with pytest.raises(DataError):
            parse_report_table("")
        with pytest.raises(DataError):
            parse_report_table("nome mae\nrow 1\n")
        good = report_table(sample_reports()[:1])
        with pytest.raises(DataError):
            parse_report_table(good + "short row\n")


class TestReportExports:
    def test_keyvalues_order_and_exact_round_trip(self):
        _, report = sample_reports()[0]
        kv = report_keyvalues(report)
        assert list(kv.keys())[:4] == ["mae", "mse", "rmse", "rmse_log"]
        assert float(kv["mae"]) == report.mae
        assert int(kv["valid_count"]) == report.valid_count

    def test_csv_row_matches_header(self):
        header = report_csv_header()
        assert header.startswith("name,mae,mse,")
        _, report = sample_reports()[0]
        row = report_csv_row("exp", report)
        cells = row.split(",")
        assert len(cells) == len(header.split(","))
        assert cells[0] == "exp"
        assert float(cells[1]) == report.mae
        assert int(cells[-1]) == report.valid_count
