"""Functional regression with a trained (frozen) flow as the prior.

MAP estimation runs gradient ascent on the posterior log-density; posterior
samples come from Langevin dynamics in the latent Gaussian space, with every
harvested latent state pushed back through the flow.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import DivergenceError, FileFormatError
from .flow import OpFlow
from .gp import Observations
from .grid import Grid, IndexSet

logger = logging.getLogger(__name__)

__all__ = ["Observations", "SGLDConfig", "MapConfig", "PosteriorResult", "posterior_log_density",
           "map_estimate", "sgld_sample", "summarize", "save_observations", "load_observations"]


@dataclass
class SGLDConfig:
    total_iterations: int = 40_000
    burn_in: int = 2_000
    thinning: int = 10
    temperature: float = 1.0
    step_size_initial: float = 5e-3
    step_size_final: float = 4e-3
    seed: int = 0
    chains: int = 1
    divergence_bound: float = 1e6
    log_every: int = 500

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iterations:
            raise ValueError("burn-in must lie in [0, total_iterations)")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not (self.step_size_initial > 0 and self.step_size_final > 0):
            raise ValueError("step sizes must be positive")
        if self.step_size_final > self.step_size_initial:
            raise ValueError("step size schedule must be nonincreasing")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")

    def step_size(self, t: int) -> float:
        ratio = self.step_size_final / self.step_size_initial
        return self.step_size_initial * ratio ** (t / self.total_iterations)

    @property
    def samples_per_chain(self) -> int:
        return (self.total_iterations - self.burn_in) // self.thinning


@dataclass
class MapConfig:
    learning_rate: float = 1e-2
    max_iterations: int = 5000
    tolerance: float = 1e-6
    window: int = 100
    parameterization: str = "latent"

    def __post_init__(self):
        if self.parameterization not in ("latent", "data"):
            raise ValueError("parameterization must be 'latent' or 'data'")


@dataclass
class PosteriorResult:
    map_estimate: np.ndarray
    samples: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    log: list[dict] = field(default_factory=list)
    diverged: bool = False

    def summary(self) -> dict:
        return {"num_samples": int(self.samples.shape[0]), "diverged": self.diverged,
                "map_max_abs": float(np.abs(self.map_estimate).max()),
                "mean_std": float(self.std.mean())}


def _model_dtype(model: OpFlow):
    p = next(model.parameters(), None)
    return p.dtype if p is not None else torch.float64


def _obs_tensors(obs: Observations, model: OpFlow, dtype):
    if obs.values.shape[0] > model.config.data_channels:
        raise ValueError("observations have more channels than the model")
    idx = torch.as_tensor(obs.points.array)
    y = torch.as_tensor(obs.values, dtype=dtype)
    return idx, y


def data_log_likelihood(u: Tensor, obs: Observations, idx: Tensor, y: Tensor) -> Tensor:
    """-|y - u|_D|^2 / (2 sigma^2) per sample (observed channels only)."""
    if obs.noise_variance <= 0:
        raise ValueError("posterior density needs a positive noise variance")
    k = y.shape[0]
    flat = u[:, :k].reshape(u.shape[0], k, -1)
    resid = y.unsqueeze(0) - flat[:, :, idx]
    return -(resid ** 2).sum(dim=(1, 2)) / (2.0 * obs.noise_variance)


def posterior_log_density(u, obs: Observations, model: OpFlow) -> Tensor:
    """Unnormalized log posterior of candidate functions (dropped terms are constant in u)."""
    dtype = _model_dtype(model)
    u = torch.as_tensor(u, dtype=dtype)
    if u.dim() == 1 + model.config.dims:
        u = u.unsqueeze(0)
    if tuple(u.shape[2:]) != obs.grid.resolution:
        raise ValueError(f"candidate grid {tuple(u.shape[2:])} differs from observation grid {obs.grid.resolution}")
    idx, y = _obs_tensors(obs, model, dtype)
    return data_log_likelihood(u, obs, idx, y) + model.log_likelihood(u)


def _latent_objective(a: Tensor, model: OpFlow, obs, idx, y):
    u, logdet = model.forward(a)
    return data_log_likelihood(u, obs, idx, y) + model.latent.log_prob(a) + logdet, u


def map_estimate(obs: Observations, model: OpFlow, config: MapConfig | None = None,
                 init: Tensor | None = None, return_info: bool = False):
    """Gradient ascent with backtracking on the posterior log-density.

    With ``parameterization='latent'`` the optimized variable is a and the
    objective is evaluated at u = G(a); with ``'data'`` u is optimized directly.
    """
    config = config or MapConfig()
    dtype = _model_dtype(model)
    idx, y = _obs_tensors(obs, model, dtype)
    shape = (1, model.config.data_channels) + obs.grid.resolution
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        if init is None:
            x0 = torch.full(shape, model.latent_spec.mean, dtype=dtype)
            if config.parameterization == "data":
                with torch.no_grad():
                    x0, _ = model.forward(x0)
        else:
            x0 = torch.as_tensor(init, dtype=dtype).reshape(shape).clone()
        x = x0.clone().requires_grad_(True)

        def objective(v):
            if config.parameterization == "latent":
                val, _ = _latent_objective(v, model, obs, idx, y)
            else:
                val = data_log_likelihood(v, obs, idx, y) + model.log_likelihood(v)
            return val.sum()

        lr = config.learning_rate
        opt = torch.optim.Adam([x], lr=lr)
        best_val = -math.inf
        best_x = x.detach().clone()
        trace = []
        accepted = []
        for it in range(config.max_iterations):
            opt.zero_grad()
            val = objective(x)
            if not torch.isfinite(val):
                raise DivergenceError(f"non-finite MAP objective at iteration {it}")
            v = float(val.detach())
            if v >= best_val:
                best_val = v
                best_x = x.detach().clone()
                accepted.append(v)
            else:
                # regression: return to the best iterate with a smaller step
                with torch.no_grad():
                    x.copy_(best_x)
                lr *= 0.5
                opt = torch.optim.Adam([x], lr=lr)
                if lr < 1e-10:
                    break
                continue
            trace.append(v)
            (-val).backward()
            opt.step()
            if len(accepted) > config.window:
                old = accepted[-config.window - 1]
                if abs(best_val - old) <= config.tolerance * max(1.0, abs(best_val)):
                    break
        with torch.no_grad():
            if config.parameterization == "latent":
                u_best, _ = model.forward(best_x)
            else:
                u_best = best_x
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    u_best = u_best.detach()
    if return_info:
        return u_best, {"objective": best_val, "iterations": it + 1, "trace": trace, "accepted": accepted,
                        "argmax": best_x}
    return u_best


def sgld_sample(obs: Observations, model: OpFlow, config: SGLDConfig, u_map: Tensor | None = None,
                map_config: MapConfig | None = None) -> PosteriorResult:
    """Langevin dynamics in latent space, harvesting G(a) every ``thinning`` steps after burn-in.

    The latent target is p(y | G(a)) p_latent(a); pushing its samples through
    G gives the posterior over u by change of variables.
    """
    if obs.noise_variance <= 0:
        raise ValueError("SGLD needs a positive observation noise variance")
    dtype = _model_dtype(model)
    idx, y = _obs_tensors(obs, model, dtype)
    if u_map is None:
        u_map = map_estimate(obs, model, map_config)
    u_map = torch.as_tensor(u_map, dtype=dtype).reshape((1, model.config.data_channels) + obs.grid.resolution)
    gen = torch.Generator().manual_seed(int(config.seed))
    for p in model.parameters():
        p.requires_grad_(False)
    samples: list[Tensor] = []
    log: list[dict] = []
    diverged = False
    trivial = len(model.couplings) == 0 and len(model.actnorms) == 0
    try:
        with torch.no_grad():
            a0, _ = model.inverse(u_map)
        a = a0.repeat(config.chains, *([1] * (a0.dim() - 1)))
        t0 = time.time()
        for t in range(config.total_iterations):
            eta = config.step_size(t)
            if trivial:
                with torch.no_grad():
                    flat = a[:, : y.shape[0]].reshape(a.shape[0], y.shape[0], -1)
                    g = torch.zeros_like(a).reshape(a.shape[0], a.shape[1], -1)
                    g[:, : y.shape[0], idx] = (y.unsqueeze(0) - flat[:, :, idx]) / obs.noise_variance
                    g = g.reshape(a.shape)
            else:
                a_req = a.detach().requires_grad_(True)
                u, _ = model.forward(a_req)
                (g,) = torch.autograd.grad(data_log_likelihood(u, obs, idx, y).sum(), a_req)
            with torch.no_grad():
                g = g + model.latent.grad_log_prob(a)
                noise = torch.randn(a.shape, generator=gen, dtype=dtype)
                a = a + 0.5 * eta * g + math.sqrt(eta * config.temperature) * noise
                if not torch.isfinite(a).all() or a.abs().max() > config.divergence_bound:
                    diverged = True
                    logger.warning("SGLD diverged at iteration %d", t)
                    break
                if t >= config.burn_in and (t - config.burn_in + 1) % config.thinning == 0:
                    u_t, _ = model.forward(a)
                    samples.append(u_t.clone())
            if config.log_every and (t + 1) % config.log_every == 0:
                log.append({"iteration": t + 1, "eta": eta, "latent_abs_max": float(a.abs().max()),
                            "wall": time.time() - t0})
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    if samples:
        # chain-major ordering: all samples of chain 0, then chain 1, ...
        stack = torch.stack(samples, dim=1).reshape((-1,) + tuple(samples[0].shape[1:]))
        arr = stack.double().numpy()
    else:
        arr = np.zeros((0,) + tuple(u_map.shape[1:]))
    if len(arr) >= 2:
        mean, std = arr.mean(0), arr.std(0, ddof=1)
    else:
        mean = arr.mean(0) if len(arr) else u_map[0].double().numpy()
        std = np.zeros_like(mean)
    if diverged and not samples:
        raise DivergenceError("SGLD diverged before any sample was harvested")
    return PosteriorResult(u_map[0].double().numpy(), arr, mean, std, log, diverged)


def summarize(samples, quantiles=(0.05, 0.5, 0.95)) -> dict:
    """Pointwise mean, (n-1) standard deviation and quantile bands."""
    s = np.asarray(samples, dtype=np.float64)
    if s.shape[0] == 0:
        raise ValueError("no samples to summarize")
    if s.shape[0] < 2:
        raise ValueError("need at least two samples")
    return {"mean": s.mean(0), "std": s.std(0, ddof=1),
            "quantiles": {float(q): np.quantile(s, q, axis=0) for q in quantiles}}


def save_observations(obs: Observations, path, truth=None, extra: dict | None = None):
    """JSON file with grid, node indices, values, noise variance and optional ground truth."""
    payload = {"format": "opflow-observations", "version": 1,
               "resolution": list(obs.grid.resolution),
               "extent": [list(e) for e in obs.grid.extent],
               "indices": list(obs.points.indices),
               "values": np.asarray(obs.values).tolist(),
               "noise_variance": obs.noise_variance,
               "truth": None if truth is None else np.asarray(truth, dtype=np.float64).tolist(),
               "extra": extra or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))


def load_observations(path) -> tuple[Observations, np.ndarray | None, dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: observation file is not valid JSON") from exc
    if payload.get("format") != "opflow-observations":
        raise FileFormatError(f"{path}: not an observation file")
    try:
        grid = Grid(tuple(payload["resolution"]), tuple(tuple(e) for e in payload["extent"]))
        obs = Observations(IndexSet(grid, tuple(payload["indices"])), np.asarray(payload["values"]),
                           float(payload["noise_variance"]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FileFormatError(f"{path}: malformed observation file ({exc})") from exc
    truth = payload.get("truth")
    return obs, None if truth is None else np.asarray(truth), payload.get("extra", {})
