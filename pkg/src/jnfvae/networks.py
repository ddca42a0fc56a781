"""Small MLP building blocks used by the encoders, decoders and classifiers."""

from __future__ import annotations

import math

import torch
from torch import nn

from .validation import DTYPE

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0


def mlp(sizes, activation=nn.ReLU) -> nn.Sequential:
    """Fully connected stack with `activation` between layers, linear output."""
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


class GaussianEncoder(nn.Module):
    """Maps a flat input to the mean/log-variance of a diagonal Gaussian.

    Also exposes the penultimate hidden activations, which downstream
    flow blocks can use as a conditioning context.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], latent_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.latent_dim = latent_dim
        sizes = [in_dim, *hidden]
        self.body = mlp(sizes) if len(sizes) > 1 else nn.Identity()
        self.act = nn.ReLU()
        feat_dim = hidden[-1] if hidden else in_dim
        self.feature_dim = feat_dim
        self.head = nn.Linear(feat_dim, 2 * latent_dim)
        self.to(DTYPE)

    def forward(self, x: torch.Tensor):
        h = x.reshape(x.shape[0], -1)
        if not isinstance(self.body, nn.Identity):
            h = self.act(self.body(h))
        out = self.head(h)
        mean, log_var = out.chunk(2, dim=-1)
        return mean, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX), h


class Decoder(nn.Module):
    """Maps a latent vector to per-modality likelihood parameters."""

    def __init__(
        self,
        latent_dim: int,
        out_shape: tuple[int, ...],
        hidden: tuple[int, ...],
        output: str = "sigmoid",
    ):
        super().__init__()
        self.out_shape = tuple(out_shape)
        out_dim = int(math.prod(out_shape))
        self.net = mlp([latent_dim, *hidden, out_dim])
        if output == "sigmoid":
            self.out_act: nn.Module = nn.Sigmoid()
        elif output == "linear":
            self.out_act = nn.Identity()
        else:
            raise ValueError(f"unknown output activation {output!r}")
        self.to(DTYPE)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        params = self.out_act(self.net(z))
        return params.reshape(z.shape[0], *self.out_shape)


class MlpClassifier(nn.Module):
    """Label classifier; the penultimate layer doubles as a feature extractor."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], n_classes: int):
        super().__init__()
        sizes = [in_dim, *hidden]
        self.body = mlp(sizes)
        self.act = nn.ReLU()
        self.head = nn.Linear(hidden[-1], n_classes)
        self.feature_dim = hidden[-1]
        self.to(DTYPE)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.body(x.reshape(x.shape[0], -1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))
