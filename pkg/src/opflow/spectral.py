"""Fourier neural operator used as the coupling network.

lift (pointwise) -> ``depth`` x [spectral conv + pointwise linear + bias, GELU]
-> project (pointwise, zero-initialized).

Fourier transforms use ``norm="forward"`` so retained coefficients of a
band-limited input do not depend on the sampling resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .grid import GridFunction

ACTIVATIONS = {"gelu": F.gelu, "tanh": torch.tanh, "silu": F.silu}


@dataclass(frozen=True)
class SpectralOperatorConfig:
    modes: tuple[int, ...]
    width: int = 32
    depth: int = 3
    in_channels: int = 1
    out_channels: int = 2
    activation: str = "gelu"
    # coordinate channels appended to the input (one per spatial axis)
    use_coordinates: bool = True

    def __post_init__(self):
        modes = (self.modes,) if isinstance(self.modes, (int, np.integer)) else tuple(self.modes)
        object.__setattr__(self, "modes", tuple(int(m) for m in modes))
        if len(self.modes) not in (1, 2) or min(self.modes) < 1:
            raise ValueError(f"modes must be 1 or 2 positive integers, got {self.modes}")
        if self.width < 1 or self.depth < 0:
            raise ValueError("width must be >= 1 and depth >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> int:
        return len(self.modes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d


def _check_resolution(shape: Sequence[int], modes: Sequence[int]):
    for n, m in zip(shape, modes):
        if n < 2 * m:
            raise ValueError(f"resolution {tuple(shape)} too coarse for {tuple(modes)} Fourier modes "
                             f"(need >= 2*modes per axis)")


class SpectralConv(nn.Module):
    """Truncated-mode multiplication in Fourier space (1D or 2D)."""

    def __init__(self, in_channels: int, out_channels: int, modes: Sequence[int]):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.modes = tuple(modes)
        # 2D keeps the low-|k1| band at both ends of the first axis
        corners = 1 if len(self.modes) == 1 else 2
        shape = (corners, in_channels, out_channels) + self.modes
        scale = 1.0 / (in_channels * out_channels)
        self.weight_real = nn.Parameter(scale * torch.rand(shape, dtype=torch.float64))
        self.weight_imag = nn.Parameter(scale * torch.rand(shape, dtype=torch.float64))

    def forward(self, x: Tensor) -> Tensor:
        spatial = x.shape[2:]
        _check_resolution(spatial, self.modes)
        w = torch.complex(self.weight_real, self.weight_imag).to(
            torch.complex128 if x.dtype == torch.float64 else torch.complex64)
        if len(spatial) == 1:
            (m,) = self.modes
            x_ft = torch.fft.rfft(x, norm="forward")
            out = torch.zeros(x.shape[0], self.out_channels, x_ft.shape[-1], dtype=x_ft.dtype, device=x.device)
            out[..., :m] = torch.einsum("bik,iok->bok", x_ft[..., :m], w[0])
            return torch.fft.irfft(out, n=spatial[0], norm="forward")
        m1, m2 = self.modes
        x_ft = torch.fft.rfft2(x, norm="forward")
        out = torch.zeros(x.shape[0], self.out_channels, spatial[0], x_ft.shape[-1],
                          dtype=x_ft.dtype, device=x.device)
        out[:, :, :m1, :m2] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, :m1, :m2], w[0])
        out[:, :, -m1:, :m2] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, -m1:, :m2], w[1])
        return torch.fft.irfft2(out, s=spatial, norm="forward")


def _pointwise(in_channels: int, out_channels: int, dims: int, bias: bool = True) -> nn.Module:
    conv = nn.Conv1d if dims == 1 else nn.Conv2d
    return conv(in_channels, out_channels, 1, bias=bias, dtype=torch.float64)


class SpectralLayer(nn.Module):
    """v -> IFFT(R * FFT(v)) + W v + b (activation applied by the caller)."""

    def __init__(self, width: int, modes: Sequence[int]):
        super().__init__()
        self.spectral = SpectralConv(width, width, modes)
        self.pointwise = _pointwise(width, width, len(modes))

    def forward(self, x: Tensor) -> Tensor:
        return self.spectral(x) + self.pointwise(x)


def coordinate_channels(shape: Sequence[int], batch: int, dtype, device=None) -> Tensor:
    axes = [torch.linspace(0.0, 1.0, n, dtype=dtype, device=device) for n in shape]
    mesh = torch.meshgrid(*axes, indexing="ij")
    coords = torch.stack(mesh, dim=0)
    return coords.unsqueeze(0).expand(batch, *coords.shape)


class CouplingNetwork(nn.Module):
    """Maps the conditioning half to (raw log-scale, shift) fields."""

    def __init__(self, config: SpectralOperatorConfig):
        super().__init__()
        self.config = config
        dims = config.dims
        lift_in = config.in_channels + (dims if config.use_coordinates else 0)
        self.lift = _pointwise(lift_in, config.width, dims)
        self.layers = nn.ModuleList(SpectralLayer(config.width, config.modes) for _ in range(config.depth))
        self.project = _pointwise(config.width, config.out_channels, dims)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)
        self.act = ACTIVATIONS[config.activation]

    def forward(self, h1: Tensor) -> Tensor:
        if h1.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {h1.shape[1]}")
        x = h1
        if self.config.use_coordinates:
            x = torch.cat([x, coordinate_channels(x.shape[2:], x.shape[0], x.dtype, x.device)], dim=1)
        x = self.lift(x)
        for layer in self.layers:
            x = self.act(layer(x))
        return self.project(x)


def spectral_layer(f: GridFunction, layer: SpectralLayer) -> GridFunction:
    """Apply one kernel-integration layer to a grid function (no activation)."""
    x = torch.tensor(f.values, dtype=torch.float64).unsqueeze(0)
    with torch.no_grad():
        y = layer(x)[0]
    return GridFunction(f.grid, y.numpy())


def coupling_network_apply(h1: GridFunction, network: CouplingNetwork) -> tuple[GridFunction, GridFunction]:
    """Raw network output split into (log_scale, shift) fields on h1's grid."""
    x = torch.tensor(h1.values, dtype=torch.float64).unsqueeze(0)
    with torch.no_grad():
        out = network(x)[0].numpy()
    half = out.shape[0] // 2
    return GridFunction(h1.grid, out[:half]), GridFunction(h1.grid, out[half:])


def parameter_count(config: SpectralOperatorConfig) -> int:
    """Exact number of real parameters in a CouplingNetwork with this config."""
    dims = config.dims
    lift_in = config.in_channels + (dims if config.use_coordinates else 0)
    corners = 1 if dims == 1 else 2
    w = config.width
    lift = lift_in * w + w
    per_layer = 2 * corners * int(np.prod(config.modes)) * w * w + w * w + w
    project = w * config.out_channels + config.out_channels
    return lift + config.depth * per_layer + project
