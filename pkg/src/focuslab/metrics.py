"""Depth map evaluation.

All statistics run over the pixels where prediction and ground truth are
both valid and the ground-truth depth lies inside the focus sweep's range;
depth outside the swept range is unknowable from the stack and is excluded
rather than penalized.  Reductions use numpy's pairwise summation, so
results do not depend on traversal order.
"""

from dataclasses import dataclass, fields

import numpy as np

from .validation import DataError, NumericalError

__all__ = [
    "MetricReport",
    "evaluate",
    "report_table",
    "parse_report_table",
    "report_keyvalues",
    "report_csv_header",
    "report_csv_row",
]

_EPS_REL = 1e-9


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mse: float
    rmse: float
    rmse_log: float
    abs_rel: float
    sq_rel: float
    bumpiness: float
    delta1: float
    delta2: float
    delta3: float
    valid_count: int


def _bumpiness(error, mask):
    """100x mean Frobenius norm of the error map's second-derivative matrix.

    Central differences with a radius-1 stencil; a pixel contributes only if
    its full 8-neighborhood is valid, so masked values never leak in.
    """
    height, width = error.shape
    if height < 3 or width < 3:
        return 0.0
    stencil_ok = np.zeros_like(mask)
    stencil_ok[1:-1, 1:-1] = True
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            shifted = np.zeros_like(mask)
            ys = slice(max(0, dy), height + min(0, dy))
            xs = slice(max(0, dx), width + min(0, dx))
            ys_src = slice(max(0, -dy), height + min(0, -dy))
            xs_src = slice(max(0, -dx), width + min(0, -dx))
            shifted[ys, xs] = mask[ys_src, xs_src]
            stencil_ok &= shifted
    if not stencil_ok.any():
        return 0.0
    e = np.where(mask, error, 0.0)
    exx = e[1:-1, 2:] - 2.0 * e[1:-1, 1:-1] + e[1:-1, :-2]
    eyy = e[2:, 1:-1] - 2.0 * e[1:-1, 1:-1] + e[:-2, 1:-1]
    exy = 0.25 * (e[2:, 2:] - e[2:, :-2] - e[:-2, 2:] + e[:-2, :-2])
    frob = np.sqrt(exx**2 + 2.0 * exy**2 + eyy**2)
    return float(100.0 * frob[stencil_ok[1:-1, 1:-1]].mean())


def evaluate(pred, gt, focus_range):
    """Compare a predicted depth map against ground truth.

    focus_range is the (min, max) of the sweep's focus distances in mm.
    Returns a MetricReport; raises NumericalError if no pixel is valid.
    """
    fmin, fmax = (float(v) for v in focus_range)
    if not (0 < fmin <= fmax):
        raise DataError(f"invalid focus range ({fmin}, {fmax})")
    if pred.depth_mm.shape != gt.depth_mm.shape:
        raise DataError("prediction and ground truth shapes differ")
    g_all = gt.depth_mm
    valid = (
        pred.valid_mask
        & gt.valid_mask
        & np.isfinite(g_all)
        & (g_all >= fmin)
        & (g_all <= fmax)
        & (g_all > 0)
    )
    if not valid.any():
        raise NumericalError("no valid pixels to evaluate")

    d = pred.depth_mm[valid]
    g = g_all[valid]
    diff = d - g
    mae = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff**2))
    rmse = float(np.sqrt(mse))

    log_ok = d > 0
    if log_ok.any():
        rmse_log = float(np.sqrt(np.mean((np.log(d[log_ok]) - np.log(g[log_ok])) ** 2)))
    else:
        rmse_log = float("nan")

    rel_ok = g > _EPS_REL
    abs_rel = float(np.mean(np.abs(diff[rel_ok]) / g[rel_ok]))
    sq_rel = float(np.mean(diff[rel_ok] ** 2 / g[rel_ok]))

    ratio = np.full(d.shape, np.inf)
    pos = d > 0
    ratio[pos] = np.maximum(d[pos] / g[pos], g[pos] / d[pos])
    delta1 = float(np.mean(ratio < 1.25))
    delta2 = float(np.mean(ratio < 1.25**2))
    delta3 = float(np.mean(ratio < 1.25**3))

    bump = _bumpiness(pred.depth_mm - g_all, valid)
    return MetricReport(
        mae=mae,
        mse=mse,
        rmse=rmse,
        rmse_log=rmse_log,
        abs_rel=abs_rel,
        sq_rel=sq_rel,
        bumpiness=bump,
        delta1=delta1,
        delta2=delta2,
        delta3=delta3,
        valid_count=int(valid.sum()),
    )


_COLUMNS = [f.name for f in fields(MetricReport)]
_NAME_WIDTH = 18
_COL_WIDTH = 12


def report_table(reports):
    """Fixed-width table of (name, MetricReport) rows, 4 significant digits."""
    lines = ["name".ljust(_NAME_WIDTH) + "".join(c.rjust(_COL_WIDTH) for c in _COLUMNS)]
    for name, report in reports:
        cells = []
        for column in _COLUMNS:
            value = getattr(report, column)
            text = str(value) if column == "valid_count" else f"{value:.4g}"
            cells.append(text.rjust(_COL_WIDTH))
        lines.append(str(name)[:_NAME_WIDTH].ljust(_NAME_WIDTH) + "".join(cells))
    return "\n".join(lines) + "\n"


def parse_report_table(text):
    """Parse report_table output back into (name, dict) rows."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty report table")
    header = lines[0].split()
    if header[0] != "name" or header[1:] != _COLUMNS:
        raise DataError("unrecognized report table header")
    rows = []
    for line in lines[1:]:
        parts = line.split()
        if len(parts) != len(_COLUMNS) + 1:
            raise DataError(f"malformed report row: {line!r}")
        values = {}
        for column, token in zip(_COLUMNS, parts[1:]):
            values[column] = int(token) if column == "valid_count" else float(token)
        rows.append((parts[0], values))
    return rows


def report_keyvalues(report):
    """MetricReport as an ordered {key: string} mapping for kv-text output."""
    out = {}
    for column in _COLUMNS:
        value = getattr(report, column)
        out[column] = str(value) if column == "valid_count" else repr(float(value))
    return out


def report_csv_header():
    return "name," + ",".join(_COLUMNS)


def report_csv_row(name, report):
    cells = [str(name)]
    for column in _COLUMNS:
        value = getattr(report, column)
        cells.append(str(value) if column == "valid_count" else repr(float(value)))
    return ",".join(cells)
