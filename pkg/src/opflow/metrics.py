"""Regression and generation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gp import (GaussianProcessSpec, fit_empirical_gaussian, grid_moments, w2_squared_gaussian)
from .grid import Grid


def smse(pred_mean, truth) -> float:
    """Mean squared error over the population variance of the truth."""
    pred = np.asarray(pred_mean, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != y.size or y.size < 2:
        raise ValueError("smse needs equal-length inputs with at least two points")
    var = y.var()
    if var == 0:
        raise ValueError("truth has zero variance")
    return float(np.mean((pred - y) ** 2) / var)


def msll(pred_mean, pred_var, truth) -> float:
    """Mean negative log predictive density under pointwise Gaussians."""
    mu = np.asarray(pred_mean, dtype=np.float64).ravel()
    var = np.asarray(pred_var, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if np.any(var <= 0):
        raise ValueError("predictive variance must be positive")
    return float(np.mean(0.5 * np.log(2 * np.pi * var) + (y - mu) ** 2 / (2 * var)))


def averaged_regression_scores(pred_mean, pred_var, truths) -> dict:
    """SMSE and MSLL of one predictive distribution against each test draw, averaged."""
    truths = np.asarray(truths, dtype=np.float64)
    truths = truths.reshape(truths.shape[0], -1)
    s = [smse(pred_mean, t) for t in truths]
    m = [msll(pred_mean, pred_var, t) for t in truths]
    return {"smse": float(np.mean(s)), "msll": float(np.mean(m)), "num_test_draws": len(truths)}


def _batch_array(batch) -> np.ndarray:
    b = np.asarray(batch, dtype=np.float64)
    if b.ndim == 2:
        b = b[:, None, :]
    if b.ndim < 3:
        raise ValueError("batch must be (samples, [channels,] *spatial)")
    return b


def autocovariance(batch, max_lag: int, return_stderr: bool = False):
    """Ensemble-mean-removed autocovariance versus lag (in nodes) along the grid axes.

    Averages value(x) * value(x + lag) over samples, positions, channels and
    (for 2D) both axis directions.
    """
    b = _batch_array(batch)
    if b.shape[0] < 2:
        raise ValueError("autocovariance needs at least two samples")
    spatial = b.shape[2:]
    if max_lag >= min(spatial):
        raise ValueError(f"max_lag {max_lag} exceeds grid extent {spatial}")
    x = b - b.mean(axis=0, keepdims=True)
    per_sample = np.empty((b.shape[0], max_lag + 1))
    for lag in range(max_lag + 1):
        vals = []
        for axis in range(len(spatial)):
            ax = axis + 2
            n = spatial[axis]
            left = np.take(x, np.arange(0, n - lag), axis=ax)
            right = np.take(x, np.arange(lag, n), axis=ax)
            vals.append((left * right).reshape(b.shape[0], -1).mean(axis=1))
        per_sample[:, lag] = np.mean(vals, axis=0)
    # n/(n-1) corrects the ensemble-mean subtraction
    n = b.shape[0]
    curve = per_sample.mean(axis=0) * n / (n - 1)
    if return_stderr:
        stderr = per_sample.std(axis=0, ddof=1) / math.sqrt(n) * n / (n - 1)
        return curve, stderr
    return curve


def amplitude_histogram(batch, bins: int = 50, value_range: tuple[float, float] | None = None):
    """Normalized histogram of pooled pointwise values: (masses, edges)."""
    b = np.asarray(batch, dtype=np.float64)
    if b.size == 0:
        raise ValueError("empty batch")
    if bins < 2:
        raise ValueError("need at least two bins")
    vals = b.ravel()
    if value_range is None:
        lo, hi = float(vals.min()), float(vals.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    outside = vals.size - counts.sum()
    masses = counts / vals.size
    return masses, edges, outside / vals.size


def f2id_score(batch, reference: GaussianProcessSpec, grid: Grid) -> float:
    """Exact squared W2 between the batch's empirical Gaussian and the reference GP on the grid."""
    b = _batch_array(batch)
    fitted = fit_empirical_gaussian(b.reshape(b.shape[0], -1))
    ref = grid_moments(reference, grid, channels=b.shape[1])
    return w2_squared_gaussian(ref, fitted)


@dataclass
class MetricReport:
    scalars: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def validate(self):
        for k, v in self.scalars.items():
            if v is not None and not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite")
        for name, curve in self.curves.items():
            if name.startswith("histogram") and "mass" in curve:
                total = float(np.sum(curve["mass"])) + float(curve.get("outside", 0.0))
                if abs(total - 1.0) > 1e-9:
                    raise ValueError(f"histogram {name} masses sum to {total}")

    def write(self, out_dir) -> list[Path]:
        """JSON summary plus one two-column table per curve."""
        self.validate()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "metrics.json"]
        payload = {"scalars": self.scalars, "provenance": self.provenance,
                   "curves": sorted(self.curves)}
        paths[0].write_text(json.dumps(payload, indent=2, sort_keys=True))
        for name, curve in self.curves.items():
            cols = [k for k in curve if isinstance(curve[k], (list, np.ndarray))]
            path = out / f"{name}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for row in zip(*[np.asarray(curve[c]).ravel() for c in cols]):
                    w.writerow([f"{v:.10g}" for v in row])
            paths.append(path)
        return paths


def generation_report(batch, grid: Grid, reference: GaussianProcessSpec | None = None,
                      max_lag: int | None = None, bins: int = 50,
                      value_range: tuple[float, float] | None = None) -> MetricReport:
    b = _batch_array(batch)
    max_lag = max_lag if max_lag is not None else min(grid.resolution) // 2
    curve, se = autocovariance(b, max_lag, return_stderr=True)
    lags = np.arange(max_lag + 1) * grid.spacing[0]
    masses, edges, outside = amplitude_histogram(b, bins, value_range)
    report = MetricReport()
    report.curves["autocovariance"] = {"lag": lags, "value": curve, "stderr": se}
    report.curves["histogram"] = {"center": 0.5 * (edges[1:] + edges[:-1]), "mass": masses, "outside": outside}
    report.scalars["num_samples"] = float(b.shape[0])
    report.scalars["amplitude_min"] = float(b.min())
    report.scalars["amplitude_max"] = float(b.max())
    if reference is not None:
        from .gp import matern_kernel
        kern = matern_kernel(lags, reference)
        report.curves["autocovariance"]["reference"] = kern
        report.scalars["autocovariance_rel_l2"] = float(np.linalg.norm(curve - kern) / np.linalg.norm(kern))
        if b.shape[0] > b[0].size:
            report.scalars["f2id"] = f2id_score(b, reference, grid)
    return report
