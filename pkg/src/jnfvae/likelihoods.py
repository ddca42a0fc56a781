"""Per-modality observation likelihoods.

Two families are supported: unit-variance Gaussians for real-valued
data and Bernoulli for binary data. Decoder networks output the mean
(Gaussian) or the success probability (Bernoulli).
"""

from __future__ import annotations

import math

import torch

GAUSSIAN = "gaussian_unit_variance"
BERNOULLI = "bernoulli"
FAMILIES = (GAUSSIAN, BERNOULLI)

_BERNOULLI_EPS = 1e-7
_LOG_2PI = math.log(2.0 * math.pi)


def log_likelihood(params: torch.Tensor, x: torch.Tensor, family: str) -> torch.Tensor:
    """Per-sample log-likelihood, summed over feature dimensions.

    Gaussian: -0.5 * ||x - mu||^2 - (D/2) * ln(2*pi).
    Bernoulli: sum x*ln(p) + (1-x)*ln(1-p), p clamped away from {0, 1}.
    """
    if params.shape != x.shape:
        raise ValueError(f"shape mismatch: params {tuple(params.shape)} vs data {tuple(x.shape)}")
    flat_p = params.reshape(params.shape[0], -1)
    flat_x = x.reshape(x.shape[0], -1)
    if family == GAUSSIAN:
        d = flat_x.shape[1]
        return -0.5 * ((flat_x - flat_p) ** 2).sum(dim=1) - 0.5 * d * _LOG_2PI
    if family == BERNOULLI:
        p = flat_p.clamp(_BERNOULLI_EPS, 1.0 - _BERNOULLI_EPS)
        return (flat_x * torch.log(p) + (1.0 - flat_x) * torch.log1p(-p)).sum(dim=1)
    raise ValueError(f"unknown likelihood family {family!r}")


def likelihood_mean(params: torch.Tensor, family: str) -> torch.Tensor:
    """Mean of the observation distribution (the decoded point estimate)."""
    if family not in FAMILIES:
        raise ValueError(f"unknown likelihood family {family!r}")
    return params


def likelihood_sample(
    params: torch.Tensor, family: str, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draw one observation per row of decoder parameters."""
    if family == GAUSSIAN:
        noise = torch.randn(params.shape, dtype=params.dtype, generator=generator)
        return params + noise
    if family == BERNOULLI:
        u = torch.rand(params.shape, dtype=params.dtype, generator=generator)
        return (u < params).to(params.dtype)
    raise ValueError(f"unknown likelihood family {family!r}")
