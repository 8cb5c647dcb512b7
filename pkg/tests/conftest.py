import numpy as np
import pytest
import torch

from opflow.flow import FlowConfig, OpFlow
from opflow.gp import GaussianProcessSpec


def randomize(model: OpFlow, scale: float = 0.3, seed: int = 0) -> OpFlow:
    """Give every parameter (including the zero-initialized projections) random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def tiny_model(dims=1, channels=1, mode="domain", blocks=2, modes=2, width=4, depth=1, seed=0,
               latent=None, scale=0.3, coords=True) -> OpFlow:
    torch.manual_seed(seed)
    cfg = FlowConfig(dims=dims, data_channels=channels, partition_mode=mode, num_blocks=blocks,
                     modes=(modes,) * dims, width=width, depth=depth, use_coordinates=coords)
    model = OpFlow(cfg, latent or GaussianProcessSpec(0.2, 0.5))
    return randomize(model, scale, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> PASS/FAIL line, filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
