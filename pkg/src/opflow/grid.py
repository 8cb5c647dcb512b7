"""Regular grids over [0, 1]^d and the functions sampled on them.

Node ordering is row-major (last axis fastest) everywhere: masks, restriction
and the on-disk containers all use it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform grid with endpoints included."""

    resolution: tuple[int, ...]
    extent: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if len(res) not in (1, 2):
            raise ValueError(f"spatial dims must be 1 or 2, got {len(res)}")
        if any(r < 2 for r in res):
            raise ValueError(f"resolution must be >= 2 per axis, got {res}")
        ext = self.extent or tuple((0.0, 1.0) for _ in res)
        if len(ext) != len(res):
            raise ValueError("extent must give one interval per axis")
        for lo, hi in ext:
            if not hi > lo:
                raise ValueError(f"invalid extent interval ({lo}, {hi})")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "extent", tuple((float(lo), float(hi)) for lo, hi in ext))

    @property
    def dims(self) -> int:
        return len(self.resolution)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for (lo, hi), n in zip(self.extent, self.resolution))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.extent, self.resolution)]

    def coordinates(self) -> np.ndarray:
        """Node positions, shape (num_nodes, dims), row-major order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(tuple(r * factor for r in self.resolution), self.extent)

    def with_resolution(self, resolution: Sequence[int] | int) -> "Grid":
        if isinstance(resolution, (int, np.integer)):
            resolution = (int(resolution),) * self.dims
        return Grid(tuple(resolution), self.extent)


def make_regular_grid(dims: int, resolution: Sequence[int] | int) -> Grid:
    if dims not in (1, 2):
        raise ValueError(f"dims must be 1 or 2, got {dims}")
    if isinstance(resolution, (int, np.integer)):
        resolution = (int(resolution),) * dims
    resolution = tuple(resolution)
    if len(resolution) != dims:
        raise ValueError(f"expected {dims} resolutions, got {len(resolution)}")
    return Grid(resolution)


@dataclass(frozen=True)
class GridFunction:
    """A channelled real function sampled on a grid.

    ``values`` has shape (channels, *grid.resolution); ``flat`` gives the
    (channels, num_nodes) view in row-major node order.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape == self.grid.resolution:
            vals = vals[None]
        if vals.ndim == 2 and vals.shape[1] == self.grid.num_nodes and self.grid.dims > 1:
            vals = vals.reshape((vals.shape[0],) + self.grid.resolution)
        if vals.shape[1:] != self.grid.resolution:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.resolution}")
        if vals.shape[0] < 1:
            raise ValueError("at least one channel required")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(self.channels, -1)

    @classmethod
    def from_flat(cls, grid: Grid, flat: np.ndarray) -> "GridFunction":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim == 1:
            flat = flat[None]
        return cls(grid, flat.reshape((flat.shape[0],) + grid.resolution))


@dataclass(frozen=True)
class CheckerboardMask:
    grid: Grid
    parity: str
    indicator: np.ndarray  # bool, shape grid.resolution


def checkerboard_mask(grid: Grid, parity: str = "even") -> CheckerboardMask:
    """Indicator is true where the sum of per-axis node indices has the given parity."""
    if parity not in ("even", "odd"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    idx = np.indices(grid.resolution).sum(axis=0)
    ind = (idx % 2 == 0) if parity == "even" else (idx % 2 == 1)
    ind.flags.writeable = False
    return CheckerboardMask(grid, parity, ind)


def split_domain(f: GridFunction, mask: CheckerboardMask) -> tuple[np.ndarray, np.ndarray]:
    if f.grid != mask.grid:
        raise ValueError("function grid and mask grid differ")
    sel = mask.indicator.ravel()
    return f.flat[:, sel].copy(), f.flat[:, ~sel].copy()


def concat_domain(half_on: np.ndarray, half_off: np.ndarray, mask: CheckerboardMask) -> GridFunction:
    sel = mask.indicator.ravel()
    half_on = np.atleast_2d(half_on)
    half_off = np.atleast_2d(half_off)
    if half_on.shape[1] != sel.sum() or half_off.shape[1] != (~sel).sum():
        raise ValueError("half sizes do not match the mask")
    out = np.empty((half_on.shape[0], sel.size))
    out[:, sel] = half_on
    out[:, ~sel] = half_off
    return GridFunction.from_flat(mask.grid, out)


def split_codomain(f: GridFunction) -> tuple[GridFunction, GridFunction]:
    if f.channels % 2:
        raise ValueError(f"codomain split needs an even channel count, got {f.channels}")
    half = f.channels // 2
    return GridFunction(f.grid, f.values[:half]), GridFunction(f.grid, f.values[half:])


def concat_codomain(h1: GridFunction, h2: GridFunction) -> GridFunction:
    if h1.grid != h2.grid:
        raise ValueError("halves live on different grids")
    return GridFunction(h1.grid, np.concatenate([h1.values, h2.values], axis=0))


@dataclass(frozen=True)
class IndexSet:
    """Strictly increasing node indices (row-major) on a grid."""

    grid: Grid
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.grid.num_nodes):
            raise IndexError(f"node index out of range for grid with {self.grid.num_nodes} nodes")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def coordinates(self) -> np.ndarray:
        return self.grid.coordinates()[self.array]

    @classmethod
    def full(cls, grid: Grid) -> "IndexSet":
        return cls(grid, tuple(range(grid.num_nodes)))

    @classmethod
    def random(cls, grid: Grid, count: int, seed: int) -> "IndexSet":
        rng = np.random.default_rng(seed)
        return cls(grid, tuple(sorted(rng.choice(grid.num_nodes, size=count, replace=False).tolist())))


def restrict(f: GridFunction, points: IndexSet) -> np.ndarray:
    """Point evaluations, shape (channels, len(points))."""
    if f.grid != points.grid:
        raise ValueError("function grid and index-set grid differ")
    return f.flat[:, points.array].copy()


def snap_to_nodes(grid: Grid, coords: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Map coordinates to node indices; every coordinate must coincide with a node."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if coords.shape[1] != grid.dims:
        coords = coords.reshape(-1, grid.dims)
    out = np.zeros(len(coords), dtype=np.int64)
    stride = 1
    for axis in reversed(range(grid.dims)):
        lo, _ = grid.extent[axis]
        pos = (coords[:, axis] - lo) / grid.spacing[axis]
        k = np.rint(pos)
        if np.any(np.abs(pos - k) * grid.spacing[axis] > atol) or np.any(k < 0) or np.any(k >= grid.resolution[axis]):
            raise ValueError("observation coordinates must coincide with grid nodes")
        out += k.astype(np.int64) * stride
        stride *= grid.resolution[axis]
    return out
