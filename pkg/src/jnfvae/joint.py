"""Joint encoder, per-modality decoders, ELBO and first-stage training.

The joint model encodes the full modality tuple into a diagonal
Gaussian over the shared latent space and decodes each modality
independently given a latent draw. Cross-modal machinery (flow
posteriors, product-of-experts sampling) lives in separate modules and
never touches these parameters after stage 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from .datasets import MultimodalDataset, as_multimodal_dataset, batch_iterator
from .likelihoods import log_likelihood
from .networks import GaussianEncoder, Decoder, LOG_VAR_MIN, LOG_VAR_MAX
from .validation import (
    as_tensor,
    check_fitted,
    check_modalities,
    derive_seed,
    new_generator,
    seeded_torch,
)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian given by mean and log-variance tensors."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.log_var = self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def rsample(
        self,
        generator: torch.Generator | None = None,
        noise: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Reparameterized draw; pass `noise` to freeze the randomness."""
        if noise is None:
            noise = torch.randn(self.mean.shape, dtype=self.mean.dtype, generator=generator)
        return self.mean + noise * torch.exp(0.5 * self.log_var)

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        return gaussian_log_prob(z, self.mean, self.log_var)

    def entropy(self) -> torch.Tensor:
        return 0.5 * (self.log_var + _LOG_2PI + 1.0).sum(dim=-1)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_var.detach())


def gaussian_log_prob(z: torch.Tensor, mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Diagonal-Gaussian log-density, summed over the last dimension."""
    return -0.5 * (log_var + _LOG_2PI + (z - mean) ** 2 / torch.exp(log_var)).sum(dim=-1)


def standard_normal_log_prob(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * (z**2 + _LOG_2PI).sum(dim=-1)


def kl_diag_gaussians(a: DiagGaussian, b: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(a || b) between diagonal Gaussians, per sample."""
    if a.mean.shape[-1] != b.mean.shape[-1]:
        raise ValueError("dimension mismatch between the two Gaussians")
    lva, lvb = a.log_var, b.log_var
    term = torch.exp(lva - lvb) + (b.mean - a.mean) ** 2 / torch.exp(lvb) - 1.0 + lvb - lva
    # clamp: the closed form can go ~-1e-18 through rounding
    return (0.5 * term.sum(dim=-1)).clamp_min(0.0)


def kl_to_standard_normal(q: DiagGaussian) -> torch.Tensor:
    term = torch.exp(q.log_var) + q.mean**2 - 1.0 - q.log_var
    return (0.5 * term.sum(dim=-1)).clamp_min(0.0)


class JointVaeModule(nn.Module):
    """Joint encoder plus one decoder per modality."""

    def __init__(self, encoder: nn.Module, decoders: list[nn.Module], families: list[str], latent_dim: int):
        super().__init__()
        self.encoder = encoder
        self.decoders = nn.ModuleList(decoders)
        self.families = list(families)
        self.latent_dim = latent_dim

    def encode(self, xs: list[torch.Tensor]) -> DiagGaussian:
        flat = torch.cat([x.reshape(x.shape[0], -1) for x in xs], dim=1)
        mean, log_var, _ = self.encoder(flat)
        return DiagGaussian(mean, log_var)

    def decode(self, z: torch.Tensor) -> list[torch.Tensor]:
        return [dec(z) for dec in self.decoders]


def elbo_terms(
    model,
    xs: list[torch.Tensor],
    weights=None,
    kl_weight: float = 1.0,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    n_samples: int = 1,
) -> dict[str, torch.Tensor]:
    """Per-sample ELBO and its components for a batch.

    Uses `n_samples` reparameterized latent draws (default one). The KL
    to the standard-normal prior is closed form. `weights` rescales each
    modality's reconstruction term; the reported `elbo` includes them.
    """
    m = len(xs)
    if weights is None:
        weights = [1.0] * m
    q = model.encode(xs)
    recon = torch.zeros(xs[0].shape[0], dtype=xs[0].dtype)
    for _ in range(n_samples):
        z = q.rsample(generator=generator, noise=noise)
        params = model.decode(z)
        for i in range(m):
            recon = recon + weights[i] * log_likelihood(params[i], xs[i], model.families[i])
    recon = recon / n_samples
    kl = kl_to_standard_normal(q)
    elbo = recon - kl_weight * kl
    if not torch.isfinite(elbo).all():
        raise RuntimeError("training diverged: non-finite ELBO")
    return {"elbo": elbo, "reconstruction": recon, "kl": kl, "posterior": q}


class JointVAE(BaseEstimator):
    """Stage-1 estimator: fits the joint encoder and the decoders by ELBO ascent.

    Parameters
    ----------
    latent_dim : dimension of the shared latent space.
    encoder_hidden, decoder_hidden : MLP widths for the joint encoder
        and each decoder.
    reconstruction_weights : optional per-modality rescaling of the
        reconstruction terms (useful when modality sizes differ a lot).
    epochs, lr, batch_size : optimization settings (adaptive first-order
        optimizer, one latent draw per sample per step).
    seed : controls init, shuffling and reparameterization noise.
    """

    def __init__(
        self,
        latent_dim: int = 2,
        encoder_hidden: tuple[int, ...] = (512, 512),
        decoder_hidden: tuple[int, ...] = (512, 512),
        reconstruction_weights=None,
        likelihood_families=None,
        epochs: int = 100,
        lr: float = 1e-3,
        batch_size: int = 128,
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.reconstruction_weights = reconstruction_weights
        self.likelihood_families = likelihood_families
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _build(self, dataset: MultimodalDataset) -> JointVaeModule:
        in_dim = sum(spec.dim for spec in dataset.specs)
        with seeded_torch(derive_seed(self.seed, "joint-init")):
            encoder = GaussianEncoder(in_dim, tuple(self.encoder_hidden), self.latent_dim)
            decoders = [
                Decoder(self.latent_dim, spec.shape, tuple(self.decoder_hidden))
                for spec in dataset.specs
            ]
        return JointVaeModule(
            encoder, decoders, [s.likelihood_family for s in dataset.specs], self.latent_dim
        )

    def fit(self, dataset):
        dataset = as_multimodal_dataset(dataset, self.likelihood_families)
        self.specs_ = list(dataset.specs)
        self.model_ = self._build(dataset)
        weights = self.reconstruction_weights
        if weights is None:
            weights = [1.0] * dataset.n_modalities
        self.weights_ = [float(w) for w in weights]
        if any(w <= 0 for w in self.weights_):
            raise ValueError("reconstruction weights must be positive")
        opt = torch.optim.Adam(self.model_.parameters(), lr=self.lr)
        gen = new_generator(derive_seed(self.seed, "joint-noise"))
        shuffle_seed = derive_seed(self.seed, "joint-shuffle")
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            total, count = 0.0, 0
            for batch in batch_iterator(dataset, self.batch_size, shuffle_seed, epoch):
                xs = check_modalities(batch.modalities)
                terms = elbo_terms(self.model_, xs, self.weights_, generator=gen)
                loss = -terms["elbo"].mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                count += len(batch)
            self.loss_curve_.append(total / count)
        return self

    def elbo(self, Xs, n_samples: int = 1, seed: int = 0) -> dict[str, float]:
        """Mean ELBO (and components) over the given samples."""
        check_fitted(self, "model_")
        xs = check_modalities(Xs, len(self.specs_))
        with torch.no_grad():
            terms = elbo_terms(
                self.model_, xs, self.weights_, generator=new_generator(seed), n_samples=n_samples
            )
        return {k: float(v.mean()) for k, v in terms.items() if k != "posterior"}

    def encode(self, Xs) -> DiagGaussian:
        check_fitted(self, "model_")
        xs = check_modalities(Xs, len(self.specs_))
        with torch.no_grad():
            return self.model_.encode(xs)

    def decode(self, z) -> list[np.ndarray]:
        check_fitted(self, "model_")
        with torch.no_grad():
            return [p.numpy() for p in self.model_.decode(as_tensor(z))]

    def sample(self, n: int, seed: int = 0) -> list[np.ndarray]:
        """Decode latent draws from the prior (returns likelihood means)."""
        check_fitted(self, "model_")
        z = torch.randn(n, self.latent_dim, dtype=torch.float64, generator=new_generator(seed))
        return self.decode(z)


def train_jmvae_onestep(
    joint: "JointVAE",
    posteriors,
    dataset: MultimodalDataset,
    alpha: float = 0.1,
    warmup_epochs: int | None = None,
    epochs: int = 100,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
) -> dict[str, list[float]]:
    """Single-stage baseline: optimize ELBO - alpha * matching term jointly.

    All parameters (joint encoder, decoders, unimodal posteriors) train
    together. The KL term of the ELBO is warmed up linearly from 0 to 1
    over ``warmup_epochs`` (default: half the epochs). The matching term
    is the sum over modalities of KL(joint posterior || unimodal
    posterior), estimated with one reparameterized draw.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if warmup_epochs is None:
        warmup_epochs = epochs // 2
    joint.specs_ = list(dataset.specs)
    joint.model_ = joint._build(dataset)
    weights = joint.reconstruction_weights or [1.0] * dataset.n_modalities
    joint.weights_ = [float(w) for w in weights]
    posteriors.build(dataset, joint)

    params = list(joint.model_.parameters()) + list(posteriors.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    gen = new_generator(derive_seed(seed, "onestep-noise"))
    shuffle_seed = derive_seed(seed, "onestep-shuffle")
    curve: dict[str, list[float]] = {"loss": [], "elbo": [], "match": []}
    for epoch in range(epochs):
        kl_weight = min(1.0, (epoch + 1) / warmup_epochs) if warmup_epochs > 0 else 1.0
        tot_loss = tot_elbo = tot_match = 0.0
        count = 0
        for batch in batch_iterator(dataset, batch_size, shuffle_seed, epoch):
            xs = check_modalities(batch.modalities)
            terms = elbo_terms(joint.model_, xs, joint.weights_, kl_weight, generator=gen)
            q = terms["posterior"]
            z = q.rsample(generator=gen)
            if alpha > 0:
                conds = posteriors.conditioning_inputs(xs)
                match = torch.zeros_like(terms["elbo"])
                for i, stack in enumerate(posteriors.stacks_):
                    match = match + q.log_prob(z) - stack.log_density(z, conds[i])
            else:
                match = torch.zeros_like(terms["elbo"])
            loss = -(terms["elbo"] - alpha * match).mean()
            if not torch.isfinite(loss):
                raise RuntimeError("training diverged: non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n_b = len(batch)
            tot_loss += float(loss.detach()) * n_b
            tot_elbo += float(terms["elbo"].detach().mean()) * n_b
            tot_match += float(match.detach().mean()) * n_b
            count += n_b
        curve["loss"].append(tot_loss / count)
        curve["elbo"].append(tot_elbo / count)
        curve["match"].append(tot_match / count)
    return curve
