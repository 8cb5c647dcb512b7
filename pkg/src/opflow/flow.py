"""Invertible operator flow between a latent Gaussian process and data functions.

Direction convention: ``model.inverse(u)`` is the data-to-latent map
(u -> a) built from actnorm followed by affine coupling in each block;
``model.forward(a)`` runs the blocks backwards (a -> u). Tensors are laid out
(batch, channels, *spatial).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import FactorizationError, FileFormatError
from .gp import GaussianProcessSpec, cholesky_with_jitter, covariance_matrix
from .grid import Grid, GridFunction
from .spectral import CouplingNetwork, SpectralOperatorConfig

CHECKPOINT_MAGIC = b"OPFL1"
CHECKPOINT_VERSION = 1

DOMAIN_PARTITIONS = ("domain-even", "domain-odd")
CODOMAIN_PARTITIONS = ("codomain-first", "codomain-second")


def checkerboard_tensor(shape, parity: str, dtype=torch.float64) -> Tensor:
    idx = sum(torch.arange(n).reshape([-1 if i == d else 1 for i in range(len(shape))])
              for d, n in enumerate(shape))
    mask = (idx % 2 == 0) if parity == "even" else (idx % 2 == 1)
    return mask.to(dtype)


class ActNorm(nn.Module):
    """Per-channel constant scale and bias; log-scale is the stored parameter."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(channels, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=torch.float64))

    def _shape(self, x: Tensor):
        return (1, -1) + (1,) * (x.dim() - 2)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.log_scale.numel():
            raise ValueError(f"actnorm expects {self.log_scale.numel()} channels, got {x.shape[1]}")
        ls = self.log_scale.view(self._shape(x))
        y = torch.exp(ls) * x + self.bias.view(self._shape(x))
        nodes = math.prod(x.shape[2:])
        logdet = nodes * self.log_scale.sum() * torch.ones(x.shape[0], dtype=x.dtype, device=x.device)
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        ls = self.log_scale.view(self._shape(y))
        return (y - self.bias.view(self._shape(y))) * torch.exp(-ls)

    @torch.no_grad()
    def initialize_from(self, x: Tensor):
        """Set scale and bias so x maps to zero mean, unit variance per channel."""
        dims = [0] + list(range(2, x.dim()))
        mean = x.mean(dim=dims)
        std = x.std(dim=dims, unbiased=False)
        degenerate = ~(std > 1e-12)
        std = torch.where(degenerate, torch.ones_like(std), std)
        mean = torch.where(degenerate, torch.zeros_like(mean), mean)
        self.log_scale.copy_(-torch.log(std))
        self.bias.copy_(-mean / std)


class AffineCoupling(nn.Module):
    """Scale/shift one half of the input with fields computed from the other half."""

    def __init__(self, channels: int, partition: str, spectral: SpectralOperatorConfig, bound: float = 2.0):
        super().__init__()
        if partition in DOMAIN_PARTITIONS:
            in_ch, out_ch = channels + 1, 2 * channels
        elif partition in CODOMAIN_PARTITIONS:
            if channels % 2:
                raise ValueError("codomain partitioning needs an even channel count")
            in_ch, out_ch = channels // 2, channels
        else:
            raise ValueError(f"unknown partition {partition!r}")
        self.partition = partition
        self.channels = channels
        self.bound = float(bound)
        cfg = SpectralOperatorConfig(spectral.modes, spectral.width, spectral.depth, in_ch, out_ch,
                                     spectral.activation, spectral.use_coordinates)
        self.network = CouplingNetwork(cfg)
        self._mask_cache: dict = {}

    @property
    def is_domain(self) -> bool:
        return self.partition in DOMAIN_PARTITIONS

    def mask(self, x: Tensor) -> Tensor:
        """1 on the conditioning half, 0 on the transformed half."""
        key = (tuple(x.shape[2:]), x.dtype, x.device)
        if key not in self._mask_cache:
            parity = "even" if self.partition == "domain-even" else "odd"
            self._mask_cache[key] = checkerboard_tensor(x.shape[2:], parity, x.dtype).to(x.device)
        return self._mask_cache[key]

    def _halves(self, x: Tensor):
        c = self.channels // 2
        if self.partition == "codomain-first":
            return x[:, :c], x[:, c:]
        return x[:, c:], x[:, :c]

    def _join(self, h1: Tensor, h2: Tensor) -> Tensor:
        if self.partition == "codomain-first":
            return torch.cat([h1, h2], dim=1)
        return torch.cat([h2, h1], dim=1)

    def scale_shift(self, h1: Tensor) -> tuple[Tensor, Tensor]:
        out = self.network(h1)
        k = out.shape[1] // 2
        raw, shift = out[:, :k], out[:, k:]
        log_s = self.bound * torch.tanh(raw / self.bound)
        return log_s, shift

    def _domain_params(self, x: Tensor):
        m = self.mask(x)
        cond = torch.cat([x * m, m.expand(x.shape[0], 1, *x.shape[2:])], dim=1)
        log_s, shift = self.scale_shift(cond)
        return m, log_s * (1 - m), shift * (1 - m)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.channels:
            raise ValueError(f"coupling expects {self.channels} channels, got {x.shape[1]}")
        if self.is_domain:
            m, log_s, shift = self._domain_params(x)
            y = x * m + (1 - m) * (x * torch.exp(log_s) + shift)
        else:
            h1, h2 = self._halves(x)
            log_s, shift = self.scale_shift(h1)
            y = self._join(h1, h2 * torch.exp(log_s) + shift)
        return y, log_s.flatten(1).sum(1)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (x, logdet of the u->a direction at x)."""
        if y.shape[1] != self.channels:
            raise ValueError(f"coupling expects {self.channels} channels, got {y.shape[1]}")
        if self.is_domain:
            # the conditioning half is untouched, so the fields are recomputable from y
            m, log_s, shift = self._domain_params(y)
            x = y * m + (1 - m) * (y - shift) * torch.exp(-log_s)
        else:
            h1, h2p = self._halves(y)
            log_s, shift = self.scale_shift(h1)
            x = self._join(h1, (h2p - shift) * torch.exp(-log_s))
        return x, log_s.flatten(1).sum(1)


@dataclass
class FlowConfig:
    dims: int = 1
    data_channels: int = 1
    partition_mode: str = "domain"
    num_blocks: int = 8
    modes: tuple[int, ...] = (16,)
    width: int = 32
    depth: int = 3
    activation: str = "gelu"
    use_coordinates: bool = True
    scale_bound: float = 2.0

    def __post_init__(self):
        if isinstance(self.modes, (int, np.integer)):
            self.modes = (int(self.modes),) * self.dims
        self.modes = tuple(int(m) for m in self.modes)
        if len(self.modes) != self.dims:
            raise ValueError(f"need {self.dims} mode counts, got {self.modes}")
        if self.partition_mode not in ("domain", "codomain"):
            raise ValueError(f"partition_mode must be 'domain' or 'codomain', got {self.partition_mode!r}")
        if self.partition_mode == "codomain" and self.data_channels % 2:
            raise ValueError("codomain partitioning needs an even number of data channels")

    def spectral(self) -> SpectralOperatorConfig:
        return SpectralOperatorConfig(self.modes, self.width, self.depth, 1, 2, self.activation,
                                      self.use_coordinates)

    def partitions(self) -> list[str]:
        names = DOMAIN_PARTITIONS if self.partition_mode == "domain" else CODOMAIN_PARTITIONS
        return [names[i % 2] for i in range(self.num_blocks)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        return cls(**{**d, "modes": tuple(d["modes"])})


class LatentGaussian:
    """Independent copies (one per channel) of the latent GP on a regular grid.

    Cholesky factors are cached per (resolution, dtype).
    """

    def __init__(self, spec: GaussianProcessSpec):
        self.spec = spec
        self._cache: dict = {}

    def factor(self, shape, dtype=torch.float64) -> Tensor:
        key = (tuple(shape), dtype)
        if key not in self._cache:
            K = covariance_matrix(Grid(tuple(shape)).coordinates(), self.spec)
            L = cholesky_with_jitter(K)
            self._cache[key] = torch.as_tensor(L, dtype=dtype)
        return self._cache[key]

    def log_prob(self, a: Tensor) -> Tensor:
        """Per-sample log-density, shape (batch,)."""
        L = self.factor(a.shape[2:], a.dtype).to(a.device)
        b, c = a.shape[:2]
        n = L.shape[0]
        x = (a.reshape(b * c, n) - self.spec.mean).T
        z = torch.linalg.solve_triangular(L, x, upper=False)
        quad = (z ** 2).sum(0).reshape(b, c).sum(1)
        logdet = torch.log(torch.diagonal(L)).sum()
        return -0.5 * quad - c * logdet - 0.5 * c * n * math.log(2 * math.pi)

    def grad_log_prob(self, a: Tensor) -> Tensor:
        """-K^{-1}(a - mean), same shape as a."""
        L = self.factor(a.shape[2:], a.dtype).to(a.device)
        b, c = a.shape[:2]
        n = L.shape[0]
        x = (a.reshape(b * c, n) - self.spec.mean).T
        sol = torch.cholesky_solve(x, L, upper=False)
        return -sol.T.reshape(a.shape)

    def sample(self, count: int, channels: int, shape, generator: torch.Generator | None = None,
               dtype=torch.float64) -> Tensor:
        L = self.factor(shape, dtype)
        z = torch.randn(count * channels, L.shape[0], generator=generator, dtype=dtype)
        a = z @ L.T + self.spec.mean
        return a.reshape((count, channels) + tuple(shape))

    def moments(self, shape, channels: int = 1, dtype=torch.float64) -> tuple[Tensor, Tensor]:
        L = self.factor(shape, dtype)
        K = L @ L.T
        if channels > 1:
            K = torch.block_diag(*([K] * channels))
        return torch.full((K.shape[0],), self.spec.mean, dtype=dtype), K


class OpFlow(nn.Module):
    """Stack of (actnorm, affine coupling) blocks with a latent Matern GP."""

    def __init__(self, config: FlowConfig, latent: GaussianProcessSpec):
        super().__init__()
        self.config = config
        self.latent_spec = latent
        self.latent = LatentGaussian(latent)
        spectral = config.spectral()
        self.actnorms = nn.ModuleList(ActNorm(config.data_channels) for _ in range(config.num_blocks))
        self.couplings = nn.ModuleList(
            AffineCoupling(config.data_channels, p, spectral, config.scale_bound) for p in config.partitions())
        self.meta: dict = {"seed_lineage": [], "iteration": 0, "phase": "init", "tags": []}

    @classmethod
    def identity(cls, latent: GaussianProcessSpec, dims: int = 1, channels: int = 1) -> "OpFlow":
        cfg = FlowConfig(dims=dims, data_channels=channels, num_blocks=0, modes=(1,) * dims)
        return cls(cfg, latent)

    def _check(self, x: Tensor):
        if x.dim() != 2 + self.config.dims:
            raise ValueError(f"expected (batch, channels, *{self.config.dims} spatial dims), got {tuple(x.shape)}")
        if x.shape[1] != self.config.data_channels:
            raise ValueError(f"model expects {self.config.data_channels} channels, got {x.shape[1]}")

    def inverse(self, u: Tensor, return_block_logdets: bool = False):
        """u -> a with log|det da/du| per sample."""
        self._check(u)
        x = u
        total = torch.zeros(u.shape[0], dtype=u.dtype, device=u.device)
        per_block = []
        for act, coup in zip(self.actnorms, self.couplings):
            x, ld_a = act(x)
            x, ld_c = coup(x)
            total = total + ld_a + ld_c
            per_block.append((ld_a, ld_c))
        if return_block_logdets:
            return x, total, per_block
        return x, total

    def forward(self, a: Tensor) -> tuple[Tensor, Tensor]:
        """a -> u with log|det da/du| evaluated at the output (same sign as ``inverse``)."""
        self._check(a)
        x = a
        total = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device)
        for act, coup in zip(reversed(self.actnorms), reversed(self.couplings)):
            x, ld_c = coup.inverse(x)
            x = act.inverse(x)
            nodes = math.prod(x.shape[2:])
            total = total + ld_c + nodes * act.log_scale.sum()
        return x, total

    def log_likelihood(self, u: Tensor) -> Tensor:
        a, logdet = self.inverse(u)
        return self.latent.log_prob(a) + logdet

    def sample(self, count: int, shape=None, generator: torch.Generator | None = None) -> Tensor:
        if shape is None:
            raise ValueError("sampling needs an explicit grid shape")
        dtype = next(self.parameters(), torch.zeros((), dtype=torch.float64)).dtype
        a = self.latent.sample(count, self.config.data_channels, shape, generator, dtype)
        with torch.no_grad():
            u, _ = self.forward(a)
        return u

    @torch.no_grad()
    def data_init(self, batch: Tensor):
        """Data-dependent actnorm init: each block's actnorm standardizes its input."""
        if batch.shape[0] < 2:
            raise ValueError("actnorm data init needs a batch of at least 2")
        x = batch
        for act, coup in zip(self.actnorms, self.couplings):
            act.initialize_from(x)
            x, _ = act(x)
            x, _ = coup(x)
        return self


# ---------------------------------------------------------------------------
# GridFunction-level wrappers


def _to_tensor(f: GridFunction, model: OpFlow | None = None) -> Tensor:
    dtype = torch.float64
    if model is not None:
        p = next(model.parameters(), None)
        dtype = p.dtype if p is not None else torch.float64
    return torch.tensor(f.values, dtype=dtype).unsqueeze(0)


def actnorm_forward(f: GridFunction, act: ActNorm) -> tuple[GridFunction, float]:
    with torch.no_grad():
        y, ld = act(_to_tensor(f))
    return GridFunction(f.grid, y[0].numpy()), float(ld[0])


def coupling_forward(f: GridFunction, block: AffineCoupling) -> tuple[GridFunction, float]:
    with torch.no_grad():
        y, ld = block(_to_tensor(f))
    return GridFunction(f.grid, y[0].numpy()), float(ld[0])


def coupling_inverse(f: GridFunction, block: AffineCoupling) -> GridFunction:
    with torch.no_grad():
        x, _ = block.inverse(_to_tensor(f))
    return GridFunction(f.grid, x[0].numpy())


def model_inverse(u: GridFunction, model: OpFlow) -> tuple[GridFunction, float]:
    with torch.no_grad():
        a, ld = model.inverse(_to_tensor(u, model))
    return GridFunction(u.grid, a[0].double().numpy()), float(ld[0])


def model_forward(a: GridFunction, model: OpFlow) -> GridFunction:
    with torch.no_grad():
        u, _ = model.forward(_to_tensor(a, model))
    return GridFunction(a.grid, u[0].double().numpy())


def log_likelihood(u: GridFunction, model: OpFlow) -> float:
    with torch.no_grad():
        return float(model.log_likelihood(_to_tensor(u, model))[0])


def actnorm_data_init(batch, model: OpFlow) -> list[ActNorm]:
    model.data_init(torch.as_tensor(np.asarray(batch), dtype=torch.float64))
    return list(model.actnorms)


# ---------------------------------------------------------------------------
# Checkpoints: magic, u32 header length, JSON header, little-endian float64 payload


def checkpoint_save(model: OpFlow, path, extra: dict | None = None):
    state = model.state_dict()
    entries = [(name, list(t.shape)) for name, t in state.items()]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "latent": model.latent_spec.to_dict(),
        "meta": model.meta,
        "params": entries,
        "dtype": "<f8",
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for name, _ in entries:
        arr = state[name].detach().cpu().to(torch.float64).numpy()
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: not an OPFL1 checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise FileFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    if len(raw) < off + hlen:
        raise FileFormatError(f"{path}: truncated header ({len(raw) - off} of {hlen} bytes)")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, raw[off + hlen:]


def checkpoint_load(path) -> OpFlow:
    header, payload = read_checkpoint_header(path)
    model = OpFlow(FlowConfig.from_dict(header["config"]), GaussianProcessSpec.from_dict(header["latent"]))
    expected = sum(8 * math.prod(shape) for _, shape in header["params"])
    if len(payload) != expected:
        raise FileFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    state = {}
    off = 0
    for name, shape in header["params"]:
        n = math.prod(shape)
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        off += 8 * n
    model.load_state_dict(state)
    model.meta = header.get("meta", model.meta)
    return model
