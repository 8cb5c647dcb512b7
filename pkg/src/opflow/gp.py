"""Matern Gaussian processes on regular grids.

These are the exact reference computations the learned flow is judged
against: sampling, log-densities, the conditional-Gaussian regression
posterior, rejection samplers for truncated processes, and 2-Wasserstein
distances between Gaussian measures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import FactorizationError, RejectionLimitError
from .grid import Grid, IndexSet

logger = logging.getLogger(__name__)

SUPPORTED_ROUGHNESS = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class GaussianProcessSpec:
    length_scale: float
    roughness: float = 1.5
    variance: float = 1.0
    mean: float = 0.0

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if float(self.roughness) not in SUPPORTED_ROUGHNESS:
            raise ValueError(f"roughness must be one of {SUPPORTED_ROUGHNESS}, got {self.roughness}")

    @property
    def default_jitter(self) -> float:
        return 1e-6 * self.variance

    def to_dict(self) -> dict:
        return {"length_scale": self.length_scale, "roughness": self.roughness,
                "variance": self.variance, "mean": self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianProcessSpec":
        return cls(float(d["length_scale"]), float(d.get("roughness", 1.5)),
                   float(d.get("variance", 1.0)), float(d.get("mean", 0.0)))


@dataclass(frozen=True)
class GaussianMomentPair:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64).ravel()
        c = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if c.shape != (m.size, m.size):
            raise ValueError(f"covariance shape {c.shape} does not match mean length {m.size}")
        if not np.allclose(c, c.T, atol=1e-10, rtol=0):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def dim(self) -> int:
        return self.mean.size

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True)
class TruncationBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"lower bound {self.lower} must be below upper bound {self.upper}")

    def contains(self, values: np.ndarray, axis=None) -> np.ndarray:
        return np.all((values >= self.lower) & (values <= self.upper), axis=axis)


@dataclass(frozen=True)
class Observations:
    """Noisy point observations on grid nodes.

    ``values`` has shape (channels, len(points)).
    """

    points: IndexSet
    values: np.ndarray
    noise_variance: float = 0.01

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if vals.shape[1] != len(self.points):
            raise ValueError(f"{vals.shape[1]} values for {len(self.points)} observation points")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be nonnegative")
        object.__setattr__(self, "values", vals)

    @property
    def grid(self) -> Grid:
        return self.points.grid

    def __len__(self):
        return len(self.points)


def matern_kernel(distance, spec: GaussianProcessSpec):
    """Closed-form Matern covariance for roughness 1/2, 3/2, 5/2."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    r = d / spec.length_scale
    nu = float(spec.roughness)
    if nu == 0.5:
        k = np.exp(-r)
    elif nu == 1.5:
        s = np.sqrt(3.0) * r
        k = (1.0 + s) * np.exp(-s)
    elif nu == 2.5:
        s = np.sqrt(5.0) * r
        k = (1.0 + s + s * s / 3.0) * np.exp(-s)
    else:
        raise ValueError(f"unsupported roughness {nu}")
    return spec.variance * k


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    return p


def cross_covariance(x, y, spec: GaussianProcessSpec) -> np.ndarray:
    x, y = _as_points(x), _as_points(y)
    d = np.sqrt(np.maximum(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1), 0.0))
    return matern_kernel(d, spec)


def covariance_matrix(points, spec: GaussianProcessSpec, jitter: float | None = None) -> np.ndarray:
    p = _as_points(points)
    if len(p) == 0:
        raise ValueError("covariance_matrix needs at least one point")
    if jitter is None:
        jitter = spec.default_jitter
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    K = cross_covariance(p, p, spec)
    K[np.diag_indices_from(K)] += jitter
    return K


def cholesky_with_jitter(K: np.ndarray, max_tries: int = 6, base: float | None = None) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter by 10x on failure."""
    scale = float(np.mean(np.diag(K))) if K.size else 1.0
    extra = 0.0
    step = base if base is not None else 1e-10 * scale
    for attempt in range(max_tries + 1):
        try:
            if extra:
                return np.linalg.cholesky(K + extra * np.eye(len(K)))
            return np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            extra = step * 10.0 ** attempt
            logger.debug("cholesky failed, retrying with jitter %.3g", extra)
    raise FactorizationError(f"covariance not positive definite after jitter up to {extra:.3g}")


def grid_covariance(grid: Grid, spec: GaussianProcessSpec, jitter: float | None = None) -> np.ndarray:
    return covariance_matrix(grid.coordinates(), spec, jitter)


def gp_sample(spec: GaussianProcessSpec, grid: Grid, count: int, seed=None,
              jitter: float | None = None, chunk: int = 20000) -> np.ndarray:
    """Independent GP draws on the grid, shape (count, 1, *grid.resolution)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    L = cholesky_with_jitter(grid_covariance(grid, spec, jitter))
    rng = np.random.default_rng(seed)
    out = np.empty((count, grid.num_nodes))
    for start in range(0, count, chunk):
        stop = min(count, start + chunk)
        z = rng.standard_normal((stop - start, grid.num_nodes))
        out[start:stop] = z @ L.T
    out += spec.mean
    return out.reshape((count, 1) + grid.resolution)


def mvn_log_density(values, mean, cov) -> float:
    """Multivariate normal log-density; raises on a singular covariance."""
    x = np.asarray(values, dtype=np.float64).ravel() - np.asarray(mean, dtype=np.float64).ravel()
    try:
        c, low = linalg.cho_factor(np.asarray(cov, dtype=np.float64), lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError("singular covariance in log-density") from exc
    alpha = linalg.cho_solve((c, low), x)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return float(-0.5 * (x @ alpha) - 0.5 * logdet - 0.5 * x.size * np.log(2 * np.pi))


def gp_log_density(values, points, spec: GaussianProcessSpec, jitter: float | None = None) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    p = _as_points(points)
    if len(p) != values.size:
        raise ValueError(f"{values.size} values for {len(p)} points")
    # factorize in a canonical point order so the result does not depend on input order
    order = np.lexsort((values,) + tuple(p[:, k] for k in reversed(range(p.shape[1]))))
    p, values = p[order], values[order]
    K = covariance_matrix(p, spec, jitter)
    return mvn_log_density(values, np.full(values.size, spec.mean), K)


def gaussian_condition(prior: GaussianMomentPair, obs_idx, y, noise_variance: float) -> GaussianMomentPair:
    """Condition a joint Gaussian on noisy observations of some of its coordinates."""
    obs_idx = np.asarray(obs_idx, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if obs_idx.size == 0:
        return prior
    S = prior.cov[np.ix_(obs_idx, obs_idx)] + noise_variance * np.eye(obs_idx.size)
    try:
        c = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError("singular observation covariance (K + noise*I)") from exc
    Kqo = prior.cov[:, obs_idx]
    resid = y - prior.mean[obs_idx]
    mean = prior.mean + Kqo @ linalg.cho_solve(c, resid)
    cov = prior.cov - Kqo @ linalg.cho_solve(c, Kqo.T)
    return GaussianMomentPair(mean, 0.5 * (cov + cov.T))


def gpr_posterior(spec: GaussianProcessSpec, obs: Observations, query: IndexSet | None = None,
                  jitter: float | None = None, channel: int = 0) -> GaussianMomentPair:
    """Analytic GP-regression posterior of the query node values."""
    grid = obs.grid
    if query is None:
        query = IndexSet.full(grid)
    if query.grid != grid:
        raise ValueError("query and observations live on different grids")
    if obs.noise_variance == 0 and len(set(obs.points.indices)) != len(obs.points):
        raise ValueError("repeated observation points require positive noise variance")
    # joint over query ∪ observed nodes, then condition
    nodes = np.union1d(query.array, obs.points.array)
    coords = grid.coordinates()[nodes]
    prior = GaussianMomentPair(np.full(nodes.size, spec.mean), covariance_matrix(coords, spec, jitter))
    pos_obs = np.searchsorted(nodes, obs.points.array)
    post = gaussian_condition(prior, pos_obs, obs.values[channel], obs.noise_variance)
    pos_q = np.searchsorted(nodes, query.array)
    return GaussianMomentPair(post.mean[pos_q], post.cov[np.ix_(pos_q, pos_q)])


def _rejection_loop(L: np.ndarray, mean: float, accept, count: int, rng, max_draws: int,
                    chunk: int, what: str) -> np.ndarray:
    n = L.shape[0]
    kept: list[np.ndarray] = []
    have = drawn = 0
    while have < count:
        if drawn >= max_draws:
            raise RejectionLimitError(
                f"{what}: only {have}/{count} accepted after {drawn} draws "
                f"(acceptance {have / max(drawn, 1):.2e})")
        m = min(chunk, max_draws - drawn)
        z = rng.standard_normal((m, n)) @ L.T + mean
        drawn += m
        ok = accept(z)
        if ok.any():
            kept.append(z[ok])
            have += int(ok.sum())
    logger.info("%s: accepted %d of %d draws", what, have, drawn)
    return np.concatenate(kept)[:count]


def tgp_sample(spec: GaussianProcessSpec, bounds: TruncationBounds, grid: Grid, count: int, seed=None,
               max_draws: int = 50_000_000, chunk: int = 20000, jitter: float | None = None) -> np.ndarray:
    """Truncated-GP draws by whole-function rejection, shape (count, 1, *res)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    L = cholesky_with_jitter(grid_covariance(grid, spec, jitter))
    rng = np.random.default_rng(seed)
    out = _rejection_loop(L, spec.mean, lambda z: bounds.contains(z, axis=1), count, rng,
                          max_draws, chunk, "tgp_sample")
    return out.reshape((count, 1) + grid.resolution)


def tgp_posterior_rejection(spec: GaussianProcessSpec, bounds: TruncationBounds, obs: Observations,
                            tolerance: float, count: int, seed=None, max_draws: int = 200_000_000,
                            chunk: int = 20000, jitter: float | None = None) -> np.ndarray:
    """Truncated-GP draws that also pass within ``tolerance`` of every observation."""
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    grid = obs.grid
    L = cholesky_with_jitter(grid_covariance(grid, spec, jitter))
    idx = obs.points.array
    target = obs.values[0]

    def accept(z):
        ok = bounds.contains(z, axis=1)
        if idx.size:
            ok &= np.all(np.abs(z[:, idx] - target) <= tolerance, axis=1)
        return ok

    rng = np.random.default_rng(seed)
    out = _rejection_loop(L, spec.mean, accept, count, rng, max_draws, chunk, "tgp_posterior_rejection")
    return out.reshape((count, 1) + grid.resolution)


def sqrtm_psd(K: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    w, V = np.linalg.eigh(0.5 * (K + K.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _check_dims(p: GaussianMomentPair, q: GaussianMomentPair):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def w2_squared_gaussian(p: GaussianMomentPair, q: GaussianMomentPair) -> float:
    """Squared 2-Wasserstein distance between Gaussians, normalized by dimension."""
    _check_dims(p, q)
    root_p = sqrtm_psd(p.cov)
    cross = sqrtm_psd(root_p @ q.cov @ root_p)
    mean_term = float(np.sum((p.mean - q.mean) ** 2))
    trace_term = float(np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross))
    return max(0.0, (mean_term + trace_term) / p.dim)


def w2_approx(p: GaussianMomentPair, q: GaussianMomentPair) -> float:
    """Frobenius surrogate: (|m1 - m2|^2 + |K1 - K2|_F^2) / dim."""
    _check_dims(p, q)
    return float((np.sum((p.mean - q.mean) ** 2) + np.sum((p.cov - q.cov) ** 2)) / p.dim)


def fit_empirical_gaussian(batch) -> GaussianMomentPair:
    """Sample mean and (n-1)-normalized covariance of a batch of vectors."""
    x = np.asarray(batch, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples to fit a Gaussian")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    return GaussianMomentPair(mean, 0.5 * (cov + cov.T))


def grid_moments(spec: GaussianProcessSpec, grid: Grid, channels: int = 1,
                 jitter: float | None = 0.0) -> GaussianMomentPair:
    """Exact moments of ``channels`` independent copies of the GP on the grid (flattened)."""
    K = grid_covariance(grid, spec, jitter)
    if channels > 1:
        K = linalg.block_diag(*([K] * channels))
    return GaussianMomentPair(np.full(K.shape[0], spec.mean), K)


def marginal(p: GaussianMomentPair, subset: Sequence[int]) -> GaussianMomentPair:
    s = np.asarray(subset, dtype=np.int64)
    return GaussianMomentPair(p.mean[s], p.cov[np.ix_(s, s)])
