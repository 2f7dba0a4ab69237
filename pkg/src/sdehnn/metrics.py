"""Accuracy, calibration and sharpness metrics for Gaussian regressors.

Calibration is measured on a grid of confidence levels ``p_k``. The
empirical coverage ``E(p_k)`` is either one-sided (fraction of targets below
the ``p_k`` quantile) or two-sided (fraction inside the central ``p_k``
interval). From a curve of coverages:

    CWCE   = sum_k p_k |E(p_k) - p_k|
    ECPE   = mean_k |E(p_k) - p_k|
    R-CWCE = (SSE / SST) * CWCE
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .model import predictive_interval, quantile

SIDES = ("one_sided", "two_sided_central")


def default_grid() -> np.ndarray:
    return np.round(np.arange(1, 20) * 0.05, 10)


def check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("confidence grid must be a non-empty 1-D sequence")
    if np.any(grid <= 0) or np.any(grid >= 1):
        raise ConfigError("confidence levels must lie strictly between 0 and 1")
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("confidence levels must be strictly increasing")
    return grid


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise DimensionError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    if y.size == 0:
        raise DimensionError("metrics need at least one sample")
    return y, y_hat


def empirical_coverage_one_sided(quantiles, y) -> float:
    y, q = _pair(y, quantiles)
    return float(np.mean(y <= q))


def empirical_coverage_two_sided(lo, hi, y) -> float:
    y, lo = _pair(y, lo)
    _, hi = _pair(y, hi)
    if np.any(lo > hi):
        bad = int(np.argmax(lo > hi))
        raise ConfigError(f"interval {bad} is crossed: lo={lo[bad]} > hi={hi[bad]}")
    return float(np.mean((lo <= y) & (y <= hi)))


def _aligned(grid, coverages):
    grid = np.asarray(grid, dtype=np.float64).ravel()
    coverages = np.asarray(coverages, dtype=np.float64).ravel()
    if grid.shape != coverages.shape:
        raise DimensionError(f"{grid.size} confidence levels vs {coverages.size} coverages")
    if grid.size == 0:
        raise DimensionError("empty calibration curve")
    return grid, coverages


def cwce(grid, coverages) -> float:
    grid, coverages = _aligned(grid, coverages)
    return float(np.sum(grid * np.abs(coverages - grid)))


def ecpe(grid, coverages) -> float:
    grid, coverages = _aligned(grid, coverages)
    return float(np.mean(np.abs(coverages - grid)))


def sse_sst(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    sse = float(np.sum((y - y_hat) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    return sse, sst


def r_cwce(y, y_hat, cwce_value: float) -> float:
    sse, sst = sse_sst(y, y_hat)
    if sst <= 0:
        raise ConfigError("R-CWCE is undefined for constant targets")
    return sse / sst * cwce_value


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def r2(y, y_hat) -> float:
    sse, sst = sse_sst(y, y_hat)
    if sst <= 0:
        raise ConfigError("R^2 is undefined for constant targets")
    return 1.0 - sse / sst


def epiw(lo, hi) -> float:
    lo, hi = _pair(lo, hi)
    if np.any(lo > hi):
        raise ConfigError("crossed prediction interval")
    return float(np.mean(hi - lo))


@dataclass
class CalibrationCurve:
    levels: np.ndarray
    coverages: np.ndarray
    side: str = "two_sided_central"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["p", "empirical_coverage"])
            for p, e in zip(self.levels, self.coverages):
                writer.writerow([repr(float(p)), repr(float(e))])


def build_calibration_curve(mean, variance, y, grid=None, side: str = "two_sided_central") -> CalibrationCurve:
    """Coverage of Gaussian predictions ``N(mean, variance)`` at each grid level."""
    if side not in SIDES:
        raise ConfigError(f"side must be one of {SIDES}, got {side!r}")
    grid = check_grid(default_grid() if grid is None else grid)
    y, mean = _pair(y, mean)
    _, variance = _pair(y, variance)
    cov = []
    for p in grid:
        if side == "one_sided":
            cov.append(empirical_coverage_one_sided(quantile(mean, variance, p), y))
        else:
            lo, hi = predictive_interval(variance, mean, p)
            cov.append(empirical_coverage_two_sided(lo, hi, y))
    return CalibrationCurve(grid, np.array(cov), side)


@dataclass
class MetricsReport:
    rmse: float
    r2: float
    cwce: float
    r_cwce: float
    ecpe: float
    epiw: float
    n: int
    side: str
    grid: list
    confidence: float = 0.95
    cwce_scale: float = 1.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"rmse": self.rmse, "r2": self.r2, "cwce": self.cwce, "r_cwce": self.r_cwce,
               "ecpe": self.ecpe, "epiw": self.epiw, "n": self.n, "side": self.side,
               "grid": [float(p) for p in self.grid], "epiw_confidence": self.confidence,
               "cwce_scale": self.cwce_scale}
        out.update(self.extra)
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(y, mean, variance, grid=None, side: str = "two_sided_central",
             confidence: float = 0.95, cwce_scale: float = 1.0) -> tuple[MetricsReport, CalibrationCurve]:
    """Full metric suite for Gaussian predictions.

    ``cwce_scale=100`` reports CWCE and R-CWCE on a percentage scale; the
    scale is written into the report.
    """
    curve = build_calibration_curve(mean, variance, y, grid, side)
    c = cwce(curve.levels, curve.coverages) * cwce_scale
    lo, hi = predictive_interval(variance, mean, confidence)
    report = MetricsReport(
        rmse=rmse(y, mean), r2=r2(y, mean), cwce=c, r_cwce=r_cwce(y, mean, c),
        ecpe=ecpe(curve.levels, curve.coverages), epiw=epiw(lo, hi),
        n=int(np.size(y)), side=side, grid=list(curve.levels), confidence=confidence,
        cwce_scale=cwce_scale)
    return report, curve
