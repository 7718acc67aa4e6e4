"""Shared fixtures and the central finite-difference gradient checker."""

import numpy as np
import pytest
import torch

from owseg import ModelConfig, SkeletonGraph


def max_fd_relative_error(model, loss_fn, h=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic closure over the model's current
    parameters returning a scalar tensor. The model should be in float64 so
    the h=1e-6 central difference is accurate. The relative-error denominator
    is floored at 1e-4: gradients that are analytically zero (for example a
    bias feeding a mean-subtracting normalizer) otherwise divide rounding
    noise by rounding noise and report spurious errors.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    worst = 0.0
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            flat = p.view(-1)
            gflat = grads[name].view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                an = float(gflat[i])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
                worst = max(worst, rel)
    return worst


@pytest.fixture
def tiny_graph():
    return SkeletonGraph.default(4)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        channel_plan=(4, 6, 8),
        temporal_kernel=3,
        attention_channels=4,
        cluster_embedding_dim=4,
        detector_embedding_dim=4,
        decoder="teu",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
