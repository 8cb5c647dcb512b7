import numpy as np
import pytest
import torch

from conftest import tiny_model
from opflow.errors import DivergenceError
from opflow.flow import OpFlow, checkpoint_load
from opflow.gp import GaussianProcessSpec, gp_log_density, gp_sample
from opflow.grid import make_regular_grid
from opflow.training import (TrainConfig, TrainHistory, evaluate, finetune_loss, inject_gp_noise, train,
                             w2_approx_torch, warmup_loss)

LATENT = GaussianProcessSpec(0.2, 0.5)


def test_noise_injection():
    model = OpFlow.identity(LATENT)
    batch = torch.randn(4, 1, 16, dtype=torch.float64)
    assert torch.equal(inject_gp_noise(batch, 0.0, model), batch)
    z = torch.zeros(1000, 1, 16, dtype=torch.float64)
    noise = inject_gp_noise(z, 1.0, model, torch.Generator().manual_seed(0))
    assert abs(float(noise.var()) - LATENT.variance) < 0.1 * LATENT.variance
    again = inject_gp_noise(z, 1.0, model, torch.Generator().manual_seed(0))
    assert torch.equal(noise, again)
    with pytest.raises(ValueError):
        inject_gp_noise(batch, -1.0, model)


def test_warmup_lambda_zero_equals_finetune():
    model = tiny_model()
    batch = torch.randn(8, 1, 8, dtype=torch.float64)
    torch.testing.assert_close(warmup_loss(batch, model, 0.0), finetune_loss(batch, model))


def test_identity_w2_small_on_latent_batch():
    model = OpFlow.identity(LATENT)
    g = make_regular_grid(1, 64)
    # single batches have a heavy upper tail (low-order covariance modes), so gate the average
    vals = []
    for seed in range(10):
        batch = torch.as_tensor(gp_sample(LATENT, g, 256, seed=seed))
        _, _, w2 = warmup_loss(batch, model, 1.0, return_parts=True)
        vals.append(float(w2))
    assert np.mean(vals) < 0.5


def test_finetune_loss_matches_oracle():
    model = OpFlow.identity(LATENT)
    g = make_regular_grid(1, 16)
    batch = gp_sample(LATENT, g, 10, seed=1)
    oracle = -np.mean([gp_log_density(b[0], g.coordinates(), LATENT) for b in batch])
    assert float(finetune_loss(torch.as_tensor(batch), model)) == pytest.approx(oracle, abs=1e-10)


def test_finetune_loss_permutation_invariant():
    model = tiny_model()
    batch = torch.randn(6, 1, 8, dtype=torch.float64)
    torch.testing.assert_close(finetune_loss(batch, model), finetune_loss(batch.flip(0), model))


def test_descent_step_lowers_loss():
    model = tiny_model(scale=0.1)
    batch = torch.randn(16, 1, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    loss = warmup_loss(batch, model, 1.0)
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            p -= 1e-4 * p.grad
    assert float(warmup_loss(batch, model, 1.0).detach()) < float(loss.detach())


def test_w2_torch_zero_for_matching_moments():
    x = torch.randn(50, 1, 4, dtype=torch.float64)
    flat = x.reshape(50, -1)
    mean = flat.mean(0)
    cov = (flat - mean).T @ (flat - mean) / 49
    assert float(w2_approx_torch(mean, cov, x)) < 1e-24


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate_warmup=1e-4, learning_rate_finetune=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    cfg = TrainConfig(warmup_iterations=10, finetune_iterations=10, warmup_decay=0.5)
    assert cfg.learning_rate(0) == ("warmup", cfg.learning_rate_warmup)
    assert cfg.learning_rate(10)[0] == "finetune"


def _data(n=64, res=16, seed=0):
    return gp_sample(GaussianProcessSpec(0.5, 1.5), make_regular_grid(1, res), n, seed=seed)


def test_train_smoke_and_reproducible(tmp_path):
    cfg = TrainConfig(batch_size=16, warmup_iterations=5, finetune_iterations=5, seed=3, checkpoint_interval=5)
    m1, h1 = train(tiny_model(modes=4), _data(), cfg, checkpoint_dir=tmp_path)
    m2, h2 = train(tiny_model(modes=4), _data(), cfg)
    assert [r["loss"] for r in h1.records] == [r["loss"] for r in h2.records]
    assert (tmp_path / "final.opfl").exists() and (tmp_path / "iter_0000005.opfl").exists()
    assert [r["phase"] for r in h1.records] == ["warmup"] * 5 + ["finetune"] * 5
    assert h1.final["nll"] == pytest.approx(evaluate(m1, torch.as_tensor(_data()))["nll"])
    h1.write_jsonl(tmp_path / "h.jsonl")
    assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 11


def test_train_resume_continues_counter(tmp_path):
    cfg = TrainConfig(batch_size=16, warmup_iterations=4, finetune_iterations=4, seed=0, checkpoint_interval=4)
    train(tiny_model(modes=4), _data(), cfg, checkpoint_dir=tmp_path)
    half = checkpoint_load(tmp_path / "iter_0000004.opfl")
    assert half.meta["iteration"] == 4
    model, hist = train(half, _data(), cfg)
    assert hist.records[0]["iteration"] == 4 and model.meta["iteration"] == 8


def test_ablation_tag():
    cfg = TrainConfig(lambda_weight=0.0, batch_size=16, warmup_iterations=2, finetune_iterations=0)
    model, hist = train(tiny_model(modes=4), _data(), cfg)
    assert "ablation" in hist.tags and "ablation" in model.meta["tags"]


def test_divergence_restores_state(tmp_path):
    cfg = TrainConfig(batch_size=16, warmup_iterations=3, finetune_iterations=0)
    data = _data()
    data[0, 0, 0] = np.inf
    with pytest.raises(DivergenceError):
        train(tiny_model(modes=4), np.repeat(data[:1], 32, axis=0), cfg, checkpoint_dir=tmp_path)
    assert (tmp_path / "last_good.opfl").exists()


def test_history_monotone():
    h = TrainHistory()
    h.append(iteration=1)
    with pytest.raises(ValueError):
        h.append(iteration=1)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(tiny_model(), np.zeros((0, 1, 8)), TrainConfig())
