"""Conditional unimodal posteriors: Gaussian base enriched by masked
autoregressive flow blocks (MADE-style, https://arxiv.org/abs/1502.03509,
https://arxiv.org/abs/1705.07057).

Density evaluation is one network pass per block (the inverse
direction); sampling walks the coordinates sequentially. Stage-2
training maximizes the posterior density at latent draws from the
frozen joint encoder, one draw per sample per step.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from .datasets import MultimodalDataset, as_multimodal_dataset, batch_iterator
from .joint import DiagGaussian, gaussian_log_prob
from .networks import GaussianEncoder
from .validation import (
    DTYPE,
    as_tensor,
    check_fitted,
    check_modalities,
    derive_seed,
    new_generator,
    seeded_torch,
)

RAW_DATA = "raw_data"
DCCA_EMBEDDING = "dcca_embedding"


def _made_degrees(dim: int, n_hidden_units: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Input degrees 1..dim and cyclic hidden degrees in [1, dim-1]."""
    input_degrees = torch.arange(1, dim + 1)
    hidden_degrees = torch.arange(n_hidden_units) % max(1, dim - 1) + 1
    return input_degrees, hidden_degrees


class MaskedLinear(nn.Linear):
    """Linear layer whose weight is elementwise-masked."""

    def __init__(self, in_features: int, out_features: int, mask: torch.Tensor):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.to(DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.linear(x, self.weight * self.mask, self.bias)


class MadeBlock(nn.Module):
    """One affine autoregressive transform with tractable log-determinant.

    Coordinate j of the output is ``v_j = u_j * exp(s_j) + t_j`` where
    the shift and log-scale for degree d depend only on coordinates of
    strictly smaller degree plus an optional context vector. Log-scales
    are soft-clamped to (-scale_clamp, scale_clamp). The final layer is
    zero-initialized so a fresh block is the identity map.
    """

    def __init__(
        self,
        dim: int,
        hidden: tuple[int, ...] = (128, 128, 128),
        context_dim: int = 0,
        scale_clamp: float = 5.0,
        degrees: torch.Tensor | None = None,
    ):
        super().__init__()
        self.dim = dim
        self.context_dim = context_dim
        self.scale_clamp = float(scale_clamp)
        in_deg, _ = _made_degrees(dim, 1)
        if degrees is None:
            degrees = in_deg
        self.register_buffer("degrees", degrees.clone())

        layers: list[nn.Module] = []
        prev_deg = degrees
        prev_dim = dim
        for width in hidden:
            _, h_deg = _made_degrees(dim, width)
            mask = (h_deg.unsqueeze(1) >= prev_deg.unsqueeze(0)).to(DTYPE)
            layers.append(MaskedLinear(prev_dim, width, mask))
            prev_deg, prev_dim = h_deg, width
        out_deg = torch.cat([degrees, degrees])
        out_mask = (out_deg.unsqueeze(1) > prev_deg.unsqueeze(0)).to(DTYPE)
        self.hidden_layers = nn.ModuleList(layers)
        self.out_layer = MaskedLinear(prev_dim, 2 * dim, out_mask)
        if context_dim > 0:
            self.context_in = nn.Linear(context_dim, hidden[0] if hidden else 2 * dim, bias=False)
            self.context_out = nn.Linear(context_dim, 2 * dim, bias=False)
        self.act = nn.ReLU()
        self.to(DTYPE)
        # identity at init
        nn.init.zeros_(self.out_layer.weight)
        nn.init.zeros_(self.out_layer.bias)
        if context_dim > 0:
            nn.init.zeros_(self.context_out.weight)

    def shift_and_log_scale(
        self, w: torch.Tensor, context: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h = w
        for k, layer in enumerate(self.hidden_layers):
            h = layer(h)
            if k == 0 and self.context_dim > 0:
                h = h + self.context_in(context)
            h = self.act(h)
        out = self.out_layer(h)
        if self.context_dim > 0:
            out = out + self.context_out(context)
        t, s_raw = out.chunk(2, dim=-1)
        s = self.scale_clamp * torch.tanh(s_raw / self.scale_clamp)
        return t, s

    def forward(
        self, u: torch.Tensor, context: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Sampling direction: one network pass per coordinate."""
        v = torch.zeros_like(u)
        order = torch.argsort(self.degrees)
        for j in order.tolist():
            t, s = self.shift_and_log_scale(v, context)
            v = v.clone()
            v[:, j] = u[:, j] * torch.exp(s[:, j]) + t[:, j]
        _, s = self.shift_and_log_scale(v, context)
        return v, s.sum(dim=-1)

    def inverse(
        self, v: torch.Tensor, context: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Density direction: single pass; returns the forward log-det at u."""
        t, s = self.shift_and_log_scale(v, context)
        u = (v - t) * torch.exp(-s)
        return u, s.sum(dim=-1)


class FlowStack(nn.Module):
    """Conditional base Gaussian plus a stack of MADE blocks.

    The base encoder maps the conditioning input to the mean and
    log-variance of the starting Gaussian. Blocks are separated by a
    fixed coordinate reversal. ``context_source`` selects what the
    blocks condition on: the base encoder's penultimate features
    ("features"), the raw conditioning input ("input"), or nothing
    (None, unconditional blocks).
    """

    def __init__(
        self,
        latent_dim: int,
        cond_dim: int,
        n_blocks: int = 2,
        made_hidden: tuple[int, ...] = (128, 128, 128),
        base_hidden: tuple[int, ...] = (512, 512),
        context_source: str | None = "features",
        scale_clamp: float = 5.0,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.context_source = context_source
        self.base = GaussianEncoder(cond_dim, base_hidden, latent_dim)
        if context_source == "features":
            context_dim = self.base.feature_dim
        elif context_source == "input":
            context_dim = cond_dim
        elif context_source is None:
            context_dim = 0
        else:
            raise ValueError(f"unknown context source {context_source!r}")
        self.blocks = nn.ModuleList(
            MadeBlock(latent_dim, made_hidden, context_dim, scale_clamp)
            for _ in range(n_blocks)
        )
        self.to(DTYPE)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def _base_and_context(self, cond: torch.Tensor):
        flat = cond.reshape(cond.shape[0], -1)
        mean, log_var, features = self.base(flat)
        if self.context_source == "features":
            ctx = features
        elif self.context_source == "input":
            ctx = flat
        else:
            ctx = None
        return DiagGaussian(mean, log_var), ctx

    def forward_latents(
        self, z0: torch.Tensor, context: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Push base draws through all blocks; returns (z_K, total log-det)."""
        z = z0
        total = torch.zeros(z0.shape[0], dtype=z0.dtype)
        for k, block in enumerate(self.blocks):
            if k > 0:
                z = z.flip(-1)
            z, ld = block(z, context)
            total = total + ld
        return z, total

    def inverse_latents(
        self, z: torch.Tensor, context: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        total = torch.zeros(z.shape[0], dtype=z.dtype)
        for k in range(len(self.blocks) - 1, -1, -1):
            z, ld = self.blocks[k].inverse(z, context)
            total = total + ld
            if k > 0:
                z = z.flip(-1)
        return z, total

    def log_density(self, z: torch.Tensor, cond) -> torch.Tensor:
        """ln q(z | cond): base log-density at z_0 minus the stack log-det."""
        cond = as_tensor(cond)
        z = as_tensor(z)
        if cond.ndim == 1 or (cond.ndim > 1 and cond.shape[0] == 1 and z.shape[0] > 1):
            cond = cond.reshape(1, -1).expand(z.shape[0], -1)
        base, ctx = self._base_and_context(cond)
        z0, log_det = self.inverse_latents(z, ctx)
        return gaussian_log_prob(z0, base.mean, base.log_var) - log_det

    def sample(
        self, cond, n: int, generator: torch.Generator | None = None
    ) -> torch.Tensor:
        """Draw n latents per conditioning row ([n, d] for a single row)."""
        cond = as_tensor(cond)
        single = cond.ndim == 1
        if single:
            cond = cond.reshape(1, -1)
        b = cond.shape[0]
        cond_rep = cond.repeat_interleave(n, dim=0)
        base, ctx = self._base_and_context(cond_rep)
        noise = torch.randn(b * n, self.latent_dim, dtype=DTYPE, generator=generator)
        z0 = base.rsample(noise=noise)
        z, _ = self.forward_latents(z0, ctx)
        if single:
            return z
        return z.reshape(b, n, self.latent_dim)


def distillation_loss(
    stacks: list[FlowStack],
    joint_model,
    xs: list[torch.Tensor],
    conds: list[torch.Tensor],
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-entropy objective for stage 2.

    Draws one latent per sample from the (frozen) joint encoder and
    returns minus the summed mean log-density of each unimodal
    posterior at that latent. Gradients flow only into the stacks.
    """
    with torch.no_grad():
        q = joint_model.encode(xs)
        z = q.rsample(generator=generator, noise=noise)
    loss = torch.zeros((), dtype=z.dtype)
    for stack, cond in zip(stacks, conds):
        loss = loss - stack.log_density(z, cond).mean()
    return loss


class UnimodalPosteriors(BaseEstimator):
    """Stage-2 estimator: one conditional flow posterior per modality.

    With ``conditioning_mode="raw_data"`` each posterior conditions on
    its own modality; with ``"dcca_embedding"`` it conditions on the
    fitted shared-information embedding instead (pass ``dcca=`` to
    fit/sample). ``n_blocks=0`` gives plain diagonal-Gaussian
    posteriors.
    """

    def __init__(
        self,
        n_blocks: int = 2,
        made_hidden: tuple[int, ...] = (128, 128, 128),
        base_hidden: tuple[int, ...] = (512, 512),
        conditional: bool = True,
        conditioning_mode: str = RAW_DATA,
        scale_clamp: float = 5.0,
        epochs: int = 100,
        lr: float = 1e-3,
        batch_size: int = 128,
        seed: int = 0,
    ):
        self.n_blocks = n_blocks
        self.made_hidden = made_hidden
        self.base_hidden = base_hidden
        self.conditional = conditional
        self.conditioning_mode = conditioning_mode
        self.scale_clamp = scale_clamp
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def build(self, dataset, joint, dcca=None) -> None:
        """Construct the per-modality stacks (called by fit)."""
        dataset = as_multimodal_dataset(dataset)
        if self.conditioning_mode not in (RAW_DATA, DCCA_EMBEDDING):
            raise ValueError(f"unknown conditioning mode {self.conditioning_mode!r}")
        if self.conditioning_mode == DCCA_EMBEDDING:
            if dcca is None:
                raise ValueError("conditioning mode 'dcca_embedding' requires a fitted dcca")
            cond_dims = [dcca.embedding_dim_] * dataset.n_modalities
            context_source = "input" if self.conditional else None
        else:
            cond_dims = [spec.dim for spec in dataset.specs]
            context_source = "features" if self.conditional else None
        latent_dim = joint.latent_dim if isinstance(joint.latent_dim, int) else joint.latent_dim
        with seeded_torch(derive_seed(self.seed, "posteriors-init")):
            self.stacks_ = [
                FlowStack(
                    latent_dim,
                    cond_dims[i],
                    n_blocks=self.n_blocks,
                    made_hidden=tuple(self.made_hidden),
                    base_hidden=tuple(self.base_hidden),
                    context_source=context_source,
                    scale_clamp=self.scale_clamp,
                )
                for i in range(dataset.n_modalities)
            ]
        self.dcca_ = dcca
        self.n_modalities_ = dataset.n_modalities
        self.specs_ = list(dataset.specs)

    def parameters(self):
        for stack in self.stacks_:
            yield from stack.parameters()

    def conditioning_inputs(self, xs: list[torch.Tensor]) -> list[torch.Tensor]:
        if self.conditioning_mode == DCCA_EMBEDDING:
            with torch.no_grad():
                return [as_tensor(e) for e in self.dcca_.transform([x.numpy() for x in xs])]
        return [x.reshape(x.shape[0], -1) for x in xs]

    def fit(self, dataset, joint, dcca=None):
        """Train the stacks against the frozen joint model."""
        dataset = as_multimodal_dataset(dataset)
        self.build(dataset, joint, dcca)
        joint_model = joint.model_ if hasattr(joint, "model_") else joint
        frozen = [p.detach().clone() for p in joint_model.parameters()]
        opt = torch.optim.Adam(list(self.parameters()), lr=self.lr)
        gen = new_generator(derive_seed(self.seed, "posteriors-noise"))
        shuffle_seed = derive_seed(self.seed, "posteriors-shuffle")
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            total, count = 0.0, 0
            for batch in batch_iterator(dataset, self.batch_size, shuffle_seed, epoch):
                xs = check_modalities(batch.modalities)
                conds = self.conditioning_inputs(xs)
                loss = distillation_loss(self.stacks_, joint_model, xs, conds, generator=gen)
                if not torch.isfinite(loss):
                    raise RuntimeError("training diverged: non-finite stage-2 loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                count += len(batch)
            self.loss_curve_.append(total / count)
        for before, p in zip(frozen, joint_model.parameters()):
            if not torch.equal(before, p):
                raise RuntimeError("stage 2 mutated joint-model parameters")
        return self

    def log_density(self, i: int, z, x_i) -> np.ndarray:
        check_fitted(self, "stacks_")
        cond = self.conditioning_for(i, x_i)
        with torch.no_grad():
            return self.stacks_[i].log_density(as_tensor(z), cond).numpy()

    def sample(self, i: int, x_i, n: int, seed: int = 0) -> np.ndarray:
        check_fitted(self, "stacks_")
        cond = self.conditioning_for(i, x_i)
        with torch.no_grad():
            return self.stacks_[i].sample(cond, n, generator=new_generator(seed)).numpy()

    def conditioning_for(self, i: int, x_i) -> torch.Tensor:
        """Conditioning input for modality i (raw data or its embedding)."""
        x = as_tensor(x_i)
        single = x.shape == tuple(self.specs_[i].shape)
        if single:
            x = x.unsqueeze(0)
        flat = x.reshape(x.shape[0], -1)
        if self.conditioning_mode == DCCA_EMBEDDING:
            out = as_tensor(self.dcca_.transform_single(i, flat.numpy()))
        else:
            out = flat
        return out[0] if single else out
