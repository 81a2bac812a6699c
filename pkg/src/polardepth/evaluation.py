"""Depth accuracy metrics, sky reconstruction accuracy and evaluation masks."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, DomainError, EmptyAggregationError

PROTOCOLS = ("raw", "cropped", "specular")
METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int
    protocol: str = "raw"

    def as_row(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SkyReport:
    r_s: float
    y_s: int
    y_hat_s: int


def median_scale(pred, gt, valid) -> np.ndarray:
    """Rescale ``pred`` so its median over ``valid`` matches that of ``gt``."""
    pred = np.asarray(pred, dtype=float)
    m = np.asarray(valid, bool)
    return pred * (np.median(gt[m]) / np.median(pred[m]))


def eigen_metrics(pred, gt, valid, protocol: str = "raw", median_scaling: bool = False) -> MetricsReport:
    """Standard depth error and threshold-accuracy metrics over ``valid`` pixels.

    Accuracy thresholds use a strict ``max(p/g, g/p) < 1.25**k``, evaluated
    as ``p < t*g and g < t*p`` so that ``pred = 1.25 * gt`` sits exactly on
    the boundary instead of a rounding error away from it.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    valid = np.asarray(valid, bool)
    if not (pred.shape == gt.shape == valid.shape):
        raise DimensionError("prediction, ground truth and mask shapes differ")
    if not valid.any():
        raise EmptyAggregationError("empty evaluation mask")
    g = gt[valid]
    if np.any(~(g > 0)):
        raise DomainError("non-positive ground-truth depth inside the evaluation mask")
    if median_scaling:
        pred = median_scale(pred, gt, valid)
    p = pred[valid]
    if np.any(~(p > 0)):
        raise DomainError("non-positive predicted depth inside the evaluation mask")
    within = [(p < t * g) & (g < t * p) for t in (1.25, 1.25 ** 2, 1.25 ** 3)]
    diff = p - g
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(within[0])),
        delta2=float(np.mean(within[1])),
        delta3=float(np.mean(within[2])),
        pixel_count=int(valid.sum()),
        protocol=protocol,
    )


def sky_accuracy(pred_disp, sky_mask, gt_sky_disp_ceiling: float = 1e-3) -> SkyReport:
    """Fraction of ground-truth sky pixels predicted as far enough away.

    A sky pixel counts as wrongly reconstructed when its predicted disparity
    exceeds ten times ``gt_sky_disp_ceiling``.
    """
    pred = np.asarray(getattr(pred_disp, "values", pred_disp), dtype=float)
    sky = np.asarray(sky_mask, bool)
    if pred.shape != sky.shape:
        raise DimensionError("prediction and sky mask shapes differ")
    y_s = int(sky.sum())
    if y_s == 0:
        raise EmptyAggregationError("ground truth contains no sky pixels")
    y_hat = int(np.sum(pred[sky] > 10.0 * gt_sky_disp_ceiling))
    return SkyReport(r_s=1.0 - y_hat / y_s, y_s=y_s, y_hat_s=y_hat)


def protocol_masks(valid, sky_mask, rho, rho_threshold: float = 0.4) -> dict:
    """Raw, cropped (lower quarter removed) and specular evaluation masks."""
    valid = np.asarray(valid, bool)
    sky = np.asarray(sky_mask, bool)
    rho = np.asarray(rho, dtype=float)
    if not (valid.shape == sky.shape == rho.shape):
        raise DimensionError("mask shapes differ")
    raw = valid & ~sky
    h = raw.shape[0]
    keep_rows = h - h // 4
    cropped = raw.copy()
    cropped[keep_rows:] = False
    return {"raw": raw, "cropped": cropped, "specular": raw & (rho > rho_threshold)}


def view_protocol_masks(view, polar=None) -> dict:
    polar = view.polar if polar is None else polar
    return protocol_masks(view.disparity_gt.valid, view.sky_mask, polar.rho)


def evaluate(pred_depth, gt_depth, masks: dict, protocols=PROTOCOLS, median_scaling=False) -> list:
    reports = []
    for name in protocols:
        reports.append(eigen_metrics(pred_depth, gt_depth, masks[name], name, median_scaling))
    return reports


def reports_to_csv(reports, sky: SkyReport | None = None) -> str:
    buf = io.StringIO()
    cols = ["protocol", *METRIC_COLUMNS, "pixel_count"]
    if sky is not None:
        cols.append("r_s")
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = {k: getattr(r, k) for k in cols if k != "r_s"}
        if sky is not None:
            row["r_s"] = sky.r_s
        writer.writerow(row)
    return buf.getvalue()


def format_table(reports, sky: SkyReport | None = None) -> str:
    head = f"{'protocol':<10}" + "".join(f"{c:>10}" for c in METRIC_COLUMNS) + f"{'pixels':>9}"
    lines = [head, "-" * len(head)]
    for r in reports:
        vals = "".join(f"{getattr(r, c):>10.4f}" for c in METRIC_COLUMNS)
        lines.append(f"{r.protocol:<10}{vals}{r.pixel_count:>9d}")
    if sky is not None:
        lines.append(f"R_s = {sky.r_s:.4f}  ({sky.y_hat_s}/{sky.y_s} sky pixels out of tolerance)")
    return "\n".join(lines)
