"""Synthetic function datasets and the UFDS1 container.

Layout: magic ``UFDS1`` | u32 little-endian header length | JSON header |
raw row-major payload of count x channels x nodes little-endian reals.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .gp import GaussianProcessSpec, TruncationBounds, gp_sample, tgp_sample
from .grid import Grid

MAGIC = b"UFDS1"
KINDS = ("gp", "tgp", "grf", "tgrf")
ELEMENT_TYPES = {"f4": "<f4", "f8": "<f8"}


@dataclass
class Dataset:
    data: np.ndarray  # (count, channels, *resolution)
    grid: Grid
    kind: str = "custom"
    generator: dict = field(default_factory=dict)
    element_type: str = "f4"

    def __post_init__(self):
        if self.data.ndim != 2 + self.grid.dims or tuple(self.data.shape[2:]) != self.grid.resolution:
            raise ValueError(f"data shape {self.data.shape} does not match grid {self.grid.resolution}")
        if self.element_type not in ELEMENT_TYPES:
            raise ValueError(f"unsupported element type {self.element_type!r}")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def header(self) -> dict:
        return {
            "magic": MAGIC.decode(),
            "kind": self.kind,
            "count": self.count,
            "channels": self.channels,
            "dims": self.grid.dims,
            "resolution": list(self.grid.resolution),
            "extent": [list(e) for e in self.grid.extent],
            "generator": self.generator,
            "element_type": self.element_type,
            "byte_order": "little",
            "layout": "row-major",
        }


def generate_dataset(kind: str, spec: GaussianProcessSpec, grid: Grid, count: int, seed: int,
                     bounds: TruncationBounds | None = None, element_type: str = "f4",
                     max_draws: int | None = None) -> Dataset:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    truncated = kind in ("tgp", "tgrf")
    if truncated and bounds is None:
        raise ValueError(f"kind {kind!r} requires truncation bounds")
    if not truncated and bounds is not None:
        raise ValueError(f"kind {kind!r} does not take truncation bounds")
    expected_dims = 1 if kind in ("gp", "tgp") else 2
    if grid.dims != expected_dims:
        raise ValueError(f"kind {kind!r} needs a {expected_dims}D grid")
    if count < 0:
        raise ValueError("count must be nonnegative")
    gen = {"spec": spec.to_dict(), "seed": int(seed),
           "bounds": None if bounds is None else [bounds.lower, bounds.upper]}
    if count == 0:
        data = np.zeros((0, 1) + grid.resolution)
    elif truncated:
        kw = {} if max_draws is None else {"max_draws": max_draws}
        data = tgp_sample(spec, bounds, grid, count, seed, **kw)
    else:
        data = gp_sample(spec, grid, count, seed)
    data = data.astype(ELEMENT_TYPES[element_type])
    return Dataset(data, grid, kind, gen, element_type)


def regenerate(header: dict) -> Dataset:
    """Rebuild a generated dataset from its header alone."""
    gen = header["generator"]
    bounds = None if gen.get("bounds") is None else TruncationBounds(*gen["bounds"])
    grid = Grid(tuple(header["resolution"]), tuple(tuple(e) for e in header["extent"]))
    return generate_dataset(header["kind"], GaussianProcessSpec.from_dict(gen["spec"]), grid,
                            header["count"], gen["seed"], bounds, header["element_type"])


def pair_channels(dataset: Dataset, seed: int) -> Dataset:
    """Shuffle, split in half and stack the halves as two channels."""
    if dataset.channels != 1:
        raise ValueError("channel pairing needs a single-channel dataset")
    if dataset.count % 2:
        raise ValueError(f"channel pairing needs an even sample count, got {dataset.count}")
    perm = np.random.default_rng(seed).permutation(dataset.count)
    half = dataset.count // 2
    first, second = dataset.data[perm[:half]], dataset.data[perm[half:]]
    gen = dict(dataset.generator, paired_with_seed=int(seed))
    return Dataset(np.concatenate([first, second], axis=1), dataset.grid, dataset.kind, gen,
                   dataset.element_type)


def save_dataset(dataset: Dataset, path):
    header = json.dumps(dataset.header(), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(dataset.data, dtype=ELEMENT_TYPES[dataset.element_type]).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_header(raw: bytes, path="<bytes>") -> tuple[dict, int]:
    if raw[:len(MAGIC)] != MAGIC:
        raise FileFormatError(f"{path}: not a UFDS1 file (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise FileFormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    if len(raw) < off + hlen:
        raise FileFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: corrupt header") from exc
    return header, off + hlen


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    header, off = read_header(raw, path)
    etype = header.get("element_type")
    if etype not in ELEMENT_TYPES:
        raise FileFormatError(f"{path}: unsupported element type {etype!r}")
    shape = (header["count"], header["channels"]) + tuple(header["resolution"])
    itemsize = np.dtype(ELEMENT_TYPES[etype]).itemsize
    expected = int(np.prod(shape)) * itemsize
    got = len(raw) - off
    if got != expected:
        raise FileFormatError(f"{path}: payload has {got} bytes, header implies {expected} "
                              f"({shape} x {itemsize}-byte elements)")
    data = np.frombuffer(raw, dtype=ELEMENT_TYPES[etype], offset=off).reshape(shape).copy()
    grid = Grid(tuple(header["resolution"]), tuple(tuple(e) for e in header["extent"]))
    return Dataset(data, grid, header.get("kind", "custom"), header.get("generator", {}), etype)
