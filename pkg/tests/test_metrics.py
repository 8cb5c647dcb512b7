import math

import numpy as np
import pytest

from opflow.gp import GaussianProcessSpec, gp_sample, matern_kernel
from opflow.grid import make_regular_grid
from opflow.metrics import (MetricReport, amplitude_histogram, autocovariance, f2id_score, generation_report, msll,
                            smse)


def test_smse_examples():
    t = np.array([0.0, 2.0, 1.0, 5.0])
    assert smse(t, t) == 0
    assert smse(np.full(4, t.mean()), t) == pytest.approx(1.0)
    assert smse([0, 1], [0, 2]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        smse([1, 1], [3, 3])


def test_msll_examples():
    y = np.array([0.3, -1.0, 2.0])
    assert msll(y, np.ones(3), y) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert msll(y, np.full(3, 1 / (2 * math.pi)), y) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        msll(y, np.zeros(3), y)


def test_autocovariance_basics():
    assert np.all(autocovariance(np.zeros((5, 1, 16)), 4) == 0)
    x = np.random.default_rng(0).standard_normal((20, 1, 16))
    np.testing.assert_allclose(autocovariance(x + 3.0, 5), autocovariance(x, 5), atol=1e-12)
    with pytest.raises(ValueError):
        autocovariance(x, 16)


def test_autocovariance_matches_kernel():
    spec = GaussianProcessSpec(0.5, 1.5)
    g = make_regular_grid(1, 33)
    x = gp_sample(spec, g, 10_000, seed=0)
    curve, se = autocovariance(x, 16, return_stderr=True)
    lags = np.arange(17) * g.spacing[0]
    assert np.all(np.abs(curve - matern_kernel(lags, spec)) < 3 * se + 1e-12)


def test_histogram():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal(200_000)
    masses, edges, outside = amplitude_histogram(vals, 20, (-3, 3))
    from scipy.stats import norm
    p = np.diff(norm.cdf(edges))
    band = 3 * np.sqrt(p * (1 - p) / vals.size)
    assert np.all(np.abs(masses - p) < band)
    assert masses.sum() + outside == pytest.approx(1.0, abs=1e-12)
    m, _, out = amplitude_histogram(np.full((4, 1, 8), 2.0), 10)
    assert (m > 0).sum() == 1 and out == 0
    with pytest.raises(ValueError):
        amplitude_histogram(np.zeros(0), 10)
    with pytest.raises(ValueError):
        amplitude_histogram(vals, 1)


def test_truncated_histogram_mass():
    from opflow.gp import TruncationBounds, tgp_sample
    s = tgp_sample(GaussianProcessSpec(0.5, 1.5), TruncationBounds(-1.2, 1.2), make_regular_grid(1, 32), 500, seed=0)
    masses, edges, outside = amplitude_histogram(s, 40, (-2, 2))
    centers = 0.5 * (edges[1:] + edges[:-1])
    assert outside == 0 and masses[np.abs(centers) > 1.25].sum() == 0


def test_f2id_scores():
    spec = GaussianProcessSpec(0.5, 1.5)
    g = make_regular_grid(1, 32)
    batch = gp_sample(spec, g, 5000, seed=0)
    # calibration: the same procedure on independent draws from the reference
    calib = max(f2id_score(gp_sample(spec, g, 5000, seed=s), spec, g) for s in (10, 11, 12))
    score = f2id_score(batch, spec, g)
    assert score < 2 * calib
    assert score < f2id_score(batch, GaussianProcessSpec(0.1, 1.5), g)


def test_report_validate_and_write(tmp_path):
    spec = GaussianProcessSpec(0.5, 1.5)
    g = make_regular_grid(1, 16)
    rep = generation_report(gp_sample(spec, g, 100, seed=0), g, spec, bins=10)
    assert rep.scalars["f2id"] >= 0
    paths = rep.write(tmp_path)
    assert {p.name for p in paths} == {"metrics.json", "autocovariance.csv", "histogram.csv"}
    bad = MetricReport(scalars={"x": float("nan")})
    with pytest.raises(ValueError):
        bad.validate()
