"""Static figure emission (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .gp import Observations  # noqa: E402
from .grid import Grid  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def posterior_band_plot(grid: Grid, mean, lower, upper, path, obs: Observations | None = None,
                        truth=None, samples=None, channel: int = 0, title: str | None = None) -> Path:
    """1D posterior mean with a shaded band, optional truth, draws and observations."""
    if grid.dims != 1:
        raise ValueError("band plots are for 1D grids")
    x = grid.axes()[0]
    mean = np.asarray(mean).reshape(-1, x.size)[channel]
    lower = np.asarray(lower).reshape(-1, x.size)[channel]
    upper = np.asarray(upper).reshape(-1, x.size)[channel]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if samples is not None:
        for s in np.asarray(samples)[:5]:
            ax.plot(x, np.asarray(s).reshape(-1, x.size)[channel], color="0.7", lw=0.6)
    ax.fill_between(x, lower, upper, color="tab:blue", alpha=0.25, label="band")
    ax.plot(x, mean, color="tab:blue", lw=1.5, label="posterior mean")
    if truth is not None:
        ax.plot(x, np.asarray(truth).reshape(-1, x.size)[channel], "k--", lw=1, label="truth")
    if obs is not None:
        ax.scatter(obs.points.coordinates()[:, 0], obs.values[channel], color="tab:red", zorder=5,
                   s=18, label="observations")
    ax.set_xlabel("x")
    ax.legend(fontsize=7, loc="best")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def sample_lines_plot(grid: Grid, batch, path, count: int = 8) -> Path:
    x = grid.axes()[0]
    b = np.asarray(batch)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for s in b[:count]:
        ax.plot(x, s.reshape(-1, x.size)[0], lw=0.8)
    ax.set_xlabel("x")
    return _save(fig, path)


def heatmap_grid(batch, path, count: int = 16, ncols: int = 4, channel: int = 0) -> Path:
    """Tile the first ``count`` 2D samples as heatmaps with a shared color scale."""
    b = np.asarray(batch)
    if b.ndim != 4:
        raise ValueError("heatmap grid needs a (samples, channels, ny, nx) batch")
    b = b[:count, channel]
    n = b.shape[0]
    ncols = min(ncols, n)
    nrows = -(-n // ncols)
    vmin, vmax = float(b.min()), float(b.max())
    fig, axes = plt.subplots(nrows, ncols, figsize=(2 * ncols, 2 * nrows), squeeze=False)
    for k, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if k < n:
            im = ax.imshow(b[k], origin="lower", vmin=vmin, vmax=vmax, cmap="viridis")
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8)
    return _save(fig, path)


def metric_curves_plot(lags, autocov, centers, masses, path, reference=None, stderr=None,
                       reference_hist=None, labels=("samples", "reference")) -> Path:
    """Two panels: autocovariance versus lag and the amplitude histogram."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax1.plot(lags, autocov, color="tab:blue", label=labels[0])
    if stderr is not None:
        ax1.fill_between(lags, autocov - 2 * stderr, autocov + 2 * stderr, color="tab:blue", alpha=0.2)
    if reference is not None:
        ax1.plot(lags, reference, "k--", label=labels[1])
    ax1.set_xlabel("lag")
    ax1.set_ylabel("autocovariance")
    ax1.legend(fontsize=7)
    width = float(np.diff(centers).mean()) if len(centers) > 1 else 1.0
    ax2.bar(centers, masses, width=width, color="tab:blue", alpha=0.6, label=labels[0])
    if reference_hist is not None:
        ax2.step(reference_hist[0], reference_hist[1], where="mid", color="k", label=labels[1])
    ax2.set_xlabel("value")
    ax2.set_ylabel("mass")
    ax2.legend(fontsize=7)
    return _save(fig, path)


def training_curve_plot(records: list[dict], path) -> Path:
    it = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, [r["nll"] for r in records], lw=0.8, label="nll")
    ax.set_xlabel("iteration")
    ax.set_ylabel("batch NLL")
    w2 = [(r["iteration"], r["w2_approx"]) for r in records if r.get("w2_approx") is not None]
    if w2:
        ax2 = ax.twinx()
        ax2.plot(*zip(*w2), color="tab:orange", lw=0.8)
        ax2.set_ylabel("W2 surrogate", color="tab:orange")
    return _save(fig, path)
