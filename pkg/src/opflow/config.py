"""Experiment configuration: YAML files validated against dataclass schemas.

Schema (every section optional unless a command needs it; unknown keys are
errors; seeds are explicit integers with no hidden defaults drawn from time):

    workspace: .                 # root that relative paths resolve against
    grid:       {dims, resolution}
    data:       {kind, length_scale, roughness, variance, mean, bounds, count,
                 seed, element_type, pair_channels, pair_seed}
    latent:     {length_scale, roughness, variance, mean}
    model:      {partition_mode, num_blocks, modes, width, depth, activation,
                 use_coordinates, scale_bound, init_seed}
    train:      TrainConfig fields
    regression: {noise_variance, observations: {rule, count, indices, seed,
                 truth_seed}, map: MapConfig fields, sgld: SGLDConfig fields,
                 test_draws, test_seed}
    metrics:    {max_lag, bins, value_range, reference}
    output:     {dir}
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .flow import FlowConfig
from .gp import GaussianProcessSpec, TruncationBounds
from .grid import Grid, make_regular_grid
from .regression import MapConfig, SGLDConfig
from .training import TrainConfig


@dataclass
class GridSection:
    dims: int = 1
    resolution: list = field(default_factory=lambda: [64])

    def build(self) -> Grid:
        res = self.resolution if isinstance(self.resolution, list) else [self.resolution]
        if len(res) == 1 and self.dims > 1:
            res = res * self.dims
        return make_regular_grid(self.dims, res)


@dataclass
class GPSection:
    length_scale: float = 0.5
    roughness: float = 1.5
    variance: float = 1.0
    mean: float = 0.0

    def build(self) -> GaussianProcessSpec:
        return GaussianProcessSpec(self.length_scale, self.roughness, self.variance, self.mean)


@dataclass
class DataSection(GPSection):
    kind: str = "gp"
    bounds: list | None = None
    count: int = 1000
    seed: int = 0
    element_type: str = "f4"
    pair_channels: bool = False
    pair_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gp", "tgp", "grf", "tgrf"):
            raise ConfigError(f"data.kind: must be one of gp, tgp, grf, tgrf (got {self.kind!r})")
        if self.element_type not in ("f4", "f8"):
            raise ConfigError(f"data.element_type: must be f4 or f8 (got {self.element_type!r})")
        if self.bounds is not None and len(self.bounds) != 2:
            raise ConfigError("data.bounds: expected [lower, upper]")

    def truncation(self) -> TruncationBounds | None:
        return None if self.bounds is None else TruncationBounds(*map(float, self.bounds))


@dataclass
class ModelSection:
    partition_mode: str = "domain"
    num_blocks: int = 8
    modes: list = field(default_factory=lambda: [16])
    width: int = 32
    depth: int = 3
    activation: str = "gelu"
    use_coordinates: bool = True
    scale_bound: float = 2.0
    init_seed: int = 0

    def build(self, dims: int, channels: int) -> FlowConfig:
        modes = self.modes if isinstance(self.modes, list) else [self.modes]
        if len(modes) == 1:
            modes = modes * dims
        return FlowConfig(dims, channels, self.partition_mode, self.num_blocks, tuple(modes), self.width,
                          self.depth, self.activation, self.use_coordinates, self.scale_bound)


@dataclass
class ObservationSection:
    rule: str = "random"
    count: int = 6
    indices: list | None = None
    seed: int = 0
    truth_seed: int = 0

    def __post_init__(self):
        if self.rule not in ("random", "indices"):
            raise ConfigError(f"regression.observations.rule: must be random or indices (got {self.rule!r})")
        if self.rule == "indices" and not self.indices:
            raise ConfigError("regression.observations.indices: required when rule is 'indices'")


@dataclass
class RegressionSection:
    noise_variance: float = 0.01
    observations: ObservationSection = field(default_factory=ObservationSection)
    map: MapConfig = field(default_factory=MapConfig)
    sgld: SGLDConfig = field(default_factory=SGLDConfig)
    test_draws: int = 3000
    test_seed: int = 0


@dataclass
class MetricsSection:
    max_lag: int | None = None
    bins: int = 50
    value_range: list | None = None
    # "data" compares against the data GP, "latent" against the latent GP
    reference: str = "data"

    def __post_init__(self):
        if self.reference not in ("data", "latent", "none"):
            raise ConfigError(f"metrics.reference: must be data, latent or none (got {self.reference!r})")


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    workspace: str = "."
    grid: GridSection = field(default_factory=GridSection)
    data: DataSection = field(default_factory=DataSection)
    latent: GPSection = field(default_factory=GPSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    regression: RegressionSection = field(default_factory=RegressionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output: OutputSection = field(default_factory=OutputSection)
    source_text: str = field(default="", repr=False, compare=False)
    source_path: str | None = field(default=None, repr=False, compare=False)

    @property
    def channels(self) -> int:
        return 2 if self.data.pair_channels else 1

    def flow_config(self) -> FlowConfig:
        return self.model.build(self.grid.dims, self.channels)

    def resolve(self, path) -> Path:
        p = Path(path)
        if p.is_absolute():
            return p
        root = Path(self.workspace)
        if not root.is_absolute() and self.source_path:
            root = Path(self.source_path).parent / root
        return root / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source_text")
        d.pop("source_path")
        return d


_INTERNAL = {"source_text", "source_path"}


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - _INTERNAL
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where + '.' if where else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for key, value in raw.items():
        hint = hints[key]
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, path)
        else:
            kwargs[key] = _coerce(value, hint, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(value, hint, path):
    args = typing.get_args(hint)
    optional = type(None) in args
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: must not be null")
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    origin = typing.get_origin(base) or base
    if origin is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if origin is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if origin is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if origin is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin in (list, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return [value]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def parse_config(text: str, source_path=None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    cfg = _build(ExperimentConfig, raw or {}, "")
    cfg.source_text = text
    cfg.source_path = None if source_path is None else str(source_path)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), path)


def copy_config(cfg: ExperimentConfig, out_dir) -> Path:
    """Write the config text, byte for byte, into an output directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "config.yaml"
    target.write_text(cfg.source_text if cfg.source_text else yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return target
