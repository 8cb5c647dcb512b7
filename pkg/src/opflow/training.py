"""Two-phase likelihood training.

Warmup minimizes batch NLL plus a Frobenius-form 2-Wasserstein penalty between
the latent GP moments and the moments of the pushed-forward batch; finetune
drops the penalty and continues on NLL alone at a smaller learning rate. Each
batch receives a small amount of latent-GP noise.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import DivergenceError
from .flow import OpFlow, checkpoint_save

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_weight: float = 1.0
    # None -> 0.01 * dataset std
    noise_level: float | None = None
    batch_size: int = 64
    warmup_iterations: int = 600
    finetune_iterations: int = 400
    learning_rate_warmup: float = 1e-3
    learning_rate_finetune: float = 5e-4
    # total multiplicative learning-rate decay across each phase
    warmup_decay: float = 0.5
    finetune_decay: float = 0.5
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_interval: int = 0
    precision: str = "float64"
    w2_threshold: float = 1.0
    eval_batch: int = 512

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be nonnegative")
        if self.noise_level is not None and self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (covariance estimation)")
        if self.warmup_iterations < 0 or self.finetune_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if not (self.learning_rate_warmup > 0 and self.learning_rate_finetune > 0):
            raise ValueError("learning rates must be positive")
        if self.learning_rate_finetune > self.learning_rate_warmup:
            raise ValueError("finetune learning rate must not exceed the warmup learning rate")
        if not (0 < self.warmup_decay <= 1 and 0 < self.finetune_decay <= 1):
            raise ValueError("decay factors must lie in (0, 1]")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32

    @property
    def total_iterations(self) -> int:
        return self.warmup_iterations + self.finetune_iterations

    def learning_rate(self, iteration: int) -> tuple[str, float]:
        if iteration < self.warmup_iterations:
            frac = iteration / max(self.warmup_iterations, 1)
            return "warmup", self.learning_rate_warmup * self.warmup_decay ** frac
        frac = (iteration - self.warmup_iterations) / max(self.finetune_iterations, 1)
        return "finetune", self.learning_rate_finetune * self.finetune_decay ** frac


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def append(self, **rec):
        if self.records and rec["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("history iterations must increase")
        self.records.append(rec)

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for rec in self.records:
                fh.write(json.dumps({**rec, "tags": self.tags}) + "\n")
            fh.write(json.dumps({"final": self.final, "warnings": self.warnings, "tags": self.tags}) + "\n")


def inject_gp_noise(batch: Tensor, gamma: float, model_or_latent, generator: torch.Generator | None = None) -> Tensor:
    """u + gamma * nu with nu drawn from the latent GP (fresh draws every call)."""
    if gamma < 0:
        raise ValueError("noise level must be nonnegative")
    if gamma == 0:
        return batch
    latent = getattr(model_or_latent, "latent", model_or_latent)
    nu = latent.sample(batch.shape[0], batch.shape[1], batch.shape[2:], generator, batch.dtype)
    return batch + gamma * nu


def w2_approx_torch(latent_mean: Tensor, latent_cov: Tensor, a: Tensor) -> Tensor:
    """Differentiable Frobenius surrogate between latent moments and a batch's moments."""
    x = a.reshape(a.shape[0], -1)
    n, dim = x.shape
    mean = x.mean(0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    return (((latent_mean - mean) ** 2).sum() + ((latent_cov - cov) ** 2).sum()) / dim


def _latent_moments(model: OpFlow, a: Tensor):
    return model.latent.moments(a.shape[2:], a.shape[1], a.dtype)


def warmup_loss(batch: Tensor, model: OpFlow, lam: float, return_parts: bool = False):
    if batch.shape[0] < 2:
        raise ValueError("warmup loss needs at least two samples")
    a, logdet = model.inverse(batch)
    nll = -(model.latent.log_prob(a) + logdet).mean()
    w2 = w2_approx_torch(*_latent_moments(model, a), a)
    total = nll + lam * w2 if lam else nll
    if return_parts:
        return total, nll, w2
    return total


def finetune_loss(batch: Tensor, model: OpFlow) -> Tensor:
    return -model.log_likelihood(batch).mean()


def _as_tensor(data, dtype) -> Tensor:
    if isinstance(data, Tensor):
        return data.to(dtype)
    return torch.as_tensor(np.asarray(data), dtype=dtype)


@torch.no_grad()
def evaluate(model: OpFlow, data: Tensor, max_samples: int = 512) -> dict:
    x = data[:max_samples]
    a, logdet = model.inverse(x)
    nll = float(-(model.latent.log_prob(a) + logdet).mean())
    out = {"nll": nll, "nll_per_dim": nll / x[0].numel()}
    if x.shape[0] >= 2:
        out["w2_approx"] = float(w2_approx_torch(*_latent_moments(model, a), a))
    return out


def train(model: OpFlow, dataset, config: TrainConfig, checkpoint_dir=None,
          history: TrainHistory | None = None) -> tuple[OpFlow, TrainHistory]:
    """Run warmup then finetune; resumes from ``model.meta['iteration']``."""
    data = _as_tensor(dataset, config.dtype)
    if data.shape[0] == 0:
        raise ValueError("empty training dataset")
    model = model.to(config.dtype)
    history = history or TrainHistory()
    if config.lambda_weight == 0 and "ablation" not in history.tags:
        history.tags.append("ablation")
    gamma = config.noise_level
    if gamma is None:
        gamma = 0.01 * float(data.std())
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None

    start = int(model.meta.get("iteration", 0))
    rng = np.random.default_rng([config.seed, start])
    gen = torch.Generator().manual_seed(int(config.seed) * 1_000_003 + start)
    batch_size = min(config.batch_size, data.shape[0])

    def next_batch():
        idx = rng.choice(data.shape[0], size=batch_size, replace=False)
        return inject_gp_noise(data[torch.as_tensor(idx)], gamma, model, gen)

    if start == 0 and model.meta.get("phase") == "init":
        model.data_init(next_batch())
    model.meta.setdefault("seed_lineage", []).append(int(config.seed))

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate_warmup)
    good_state = copy.deepcopy(model.state_dict())
    t0 = time.time()
    for it in range(start, config.total_iterations):
        phase, lr = config.learning_rate(it)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = next_batch()
        if phase == "warmup":
            loss, nll, w2 = warmup_loss(batch, model, config.lambda_weight, return_parts=True)
        else:
            loss = nll = finetune_loss(batch, model)
            w2 = None
        if not torch.isfinite(loss):
            model.load_state_dict(good_state)
            model.meta.update(iteration=it, phase=phase)
            if ckpt_dir:
                checkpoint_save(model, ckpt_dir / "last_good.opfl")
            history.warnings.append(f"non-finite loss at iteration {it}")
            raise DivergenceError(f"non-finite training loss at iteration {it}; last good state restored")
        opt.zero_grad()
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        if not torch.isfinite(gnorm):
            opt.zero_grad()
            history.warnings.append(f"non-finite gradient skipped at iteration {it}")
            continue
        opt.step()
        history.append(iteration=it, phase=phase, nll=float(nll.detach()),
                       w2_approx=None if w2 is None else float(w2.detach()), loss=float(loss.detach()),
                       lr=lr, wall=time.time() - t0)
        model.meta.update(iteration=it + 1, phase=phase)
        if config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            good_state = copy.deepcopy(model.state_dict())
            if ckpt_dir:
                checkpoint_save(model, ckpt_dir / f"iter_{it + 1:07d}.opfl")
        if (it + 1) % 100 == 0:
            rec = history.records[-1]
            logger.info("iter %d %s loss=%.4f nll=%.4f w2=%s lr=%.2e", it + 1, phase, rec["loss"], rec["nll"],
                        "-" if w2 is None else f"{rec['w2_approx']:.4f}", lr)

    final = evaluate(model, data, config.eval_batch)
    history.final = final
    if final.get("w2_approx", 0.0) > config.w2_threshold:
        msg = f"final W2 surrogate {final['w2_approx']:.3f} above threshold {config.w2_threshold}"
        history.warnings.append(msg)
        logger.warning(msg)
    model.meta["tags"] = sorted(set(model.meta.get("tags", [])) | set(history.tags))
    if ckpt_dir:
        checkpoint_save(model, ckpt_dir / "final.opfl")
    return model, history
