import math

import numpy as np
import pytest

from opflow.datasets import (Dataset, generate_dataset, load_dataset, pair_channels, regenerate, save_dataset)
from opflow.errors import FileFormatError
from opflow.gp import GaussianProcessSpec, TruncationBounds, matern_kernel
from opflow.grid import make_regular_grid
from opflow.metrics import autocovariance

SPEC = GaussianProcessSpec(0.5, 1.5)


def test_generate_kinds():
    g1, g2 = make_regular_grid(1, 16), make_regular_grid(2, [8, 8])
    assert generate_dataset("gp", SPEC, g1, 4, 0).data.shape == (4, 1, 16)
    assert generate_dataset("grf", SPEC, g2, 3, 0).data.shape == (3, 1, 8, 8)
    t = generate_dataset("tgrf", SPEC, g2, 5, 0, TruncationBounds(-2, 2))
    assert np.all(np.abs(t.data) <= 2)
    with pytest.raises(ValueError):
        generate_dataset("tgp", SPEC, g1, 4, 0)
    with pytest.raises(ValueError):
        generate_dataset("gp", SPEC, g1, 4, 0, TruncationBounds(-1, 1))
    with pytest.raises(ValueError):
        generate_dataset("cat", SPEC, g1, 4, 0)
    with pytest.raises(ValueError):
        generate_dataset("grf", SPEC, g1, 4, 0)


def test_empty_dataset_roundtrip(tmp_path):
    ds = generate_dataset("gp", SPEC, make_regular_grid(1, 16), 0, 0)
    save_dataset(ds, tmp_path / "e.ufds")
    back = load_dataset(tmp_path / "e.ufds")
    assert back.count == 0 and back.data.shape == (0, 1, 16)


@pytest.mark.parametrize("etype", ["f4", "f8"])
def test_save_load_bit_exact(tmp_path, etype):
    ds = generate_dataset("grf", SPEC, make_regular_grid(2, [6, 5]), 7, 3, element_type=etype)
    save_dataset(ds, tmp_path / "d.ufds")
    back = load_dataset(tmp_path / "d.ufds")
    assert back.data.dtype == ds.data.dtype and np.array_equal(back.data, ds.data)
    assert back.header() == ds.header()


def test_corruption(tmp_path):
    ds = generate_dataset("gp", SPEC, make_regular_grid(1, 16), 3, 0)
    save_dataset(ds, tmp_path / "d.ufds")
    raw = (tmp_path / "d.ufds").read_bytes()
    (tmp_path / "m.ufds").write_bytes(b"ABCDE" + raw[5:])
    with pytest.raises(FileFormatError, match="magic"):
        load_dataset(tmp_path / "m.ufds")
    (tmp_path / "t.ufds").write_bytes(raw[:-10])
    with pytest.raises(FileFormatError, match="bytes"):
        load_dataset(tmp_path / "t.ufds")
    bad = raw.replace(b'"element_type": "f4"', b'"element_type": "i2"')
    (tmp_path / "e.ufds").write_bytes(bad)
    with pytest.raises(FileFormatError, match="element type"):
        load_dataset(tmp_path / "e.ufds")


def test_regenerate_from_header():
    ds = generate_dataset("tgp", SPEC, make_regular_grid(1, 16), 5, 9, TruncationBounds(-1.2, 1.2))
    assert np.array_equal(regenerate(ds.header()).data, ds.data)


def test_pair_channels():
    ds = generate_dataset("gp", SPEC, make_regular_grid(1, 8), 4, 0, element_type="f8")
    p = pair_channels(ds, 1)
    assert p.data.shape == (2, 2, 8)
    assert np.array_equal(np.sort(p.data.ravel()), np.sort(ds.data.ravel()))
    assert np.array_equal(pair_channels(ds, 1).data, p.data)
    odd = generate_dataset("gp", SPEC, make_regular_grid(1, 8), 3, 0)
    with pytest.raises(ValueError):
        pair_channels(odd, 0)
    with pytest.raises(ValueError):
        pair_channels(p, 0)


def test_dataset_shape_check():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 5)), make_regular_grid(1, 4))


def test_generated_kernel_check():
    g = make_regular_grid(1, 33)
    ds = generate_dataset("gp", SPEC, g, 5000, 0, element_type="f8")
    curve, se = autocovariance(ds.data, 16, return_stderr=True)
    ref = matern_kernel(np.arange(17) * g.spacing[0], SPEC)
    assert np.all(np.abs(curve - ref) < 3 * se)
