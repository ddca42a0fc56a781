"""Product-of-experts posteriors over modality subsets, sampled with
Hamiltonian Monte Carlo.

The subset posterior is proportional to the product of the unimodal
posteriors divided by the prior raised to |S|-1. It has no closed form
once the experts are flows, but its unnormalized log-density is cheap
and differentiable, which is all HMC needs. Sampling happens at
inference time only; nothing here touches trained parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .joint import standard_normal_log_prob
from .likelihoods import likelihood_mean, likelihood_sample
from .validation import as_tensor, new_generator


class DegenerateChainsError(RuntimeError):
    """Acceptance collapsed; the step size is too large for this target."""


@dataclass
class GaussianExpert:
    """Diagonal-Gaussian expert, mostly for oracle targets and K=0 posteriors."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def log_density(self, z: torch.Tensor) -> torch.Tensor:
        mean, log_var = as_tensor(self.mean), as_tensor(self.log_var)
        return -0.5 * (
            log_var + np.log(2.0 * np.pi) + (z - mean) ** 2 / torch.exp(log_var)
        ).sum(dim=-1)


@dataclass
class FlowExpert:
    """A fitted flow posterior evaluated at a fixed conditioning input."""

    stack: object
    conditioning: object

    def log_density(self, z: torch.Tensor) -> torch.Tensor:
        return self.stack.log_density(z, self.conditioning)


@dataclass
class PoeTarget:
    """Unnormalized product-of-experts density over the shared latent."""

    experts: list
    latent_dim: int

    def __post_init__(self):
        if len(self.experts) < 1:
            raise ValueError("need at least one expert")

    @property
    def subset_size(self) -> int:
        return len(self.experts)

    def log_density(self, z: torch.Tensor) -> torch.Tensor:
        """sum_i ln q_i(z) - (|S|-1) ln p(z), up to the normalizer."""
        total = self.experts[0].log_density(z)
        for expert in self.experts[1:]:
            total = total + expert.log_density(z)
        if len(self.experts) > 1:
            total = total - (len(self.experts) - 1) * standard_normal_log_prob(z)
        return total


@dataclass
class HmcConfig:
    """Sampler settings.

    `step_jitter` rescales the step size uniformly in [1-j, 1+j] each
    iteration (drawn independently of the state, so the kernel stays a
    valid Metropolis mixture); without it, fixed-length trajectories
    resonate on near-Gaussian targets and single modes stop mixing.
    """

    step_size: float = 0.05
    leapfrog_steps: int = 10
    n_chains: int = 8
    burn_in: int = 200
    samples_per_chain: int = 1000
    seed: int = 0
    step_jitter: float = 0.2
    thin: int = 1
    adapt_step_size: bool = False
    adapt_iters: int = 100
    target_accept: float = 0.75

    def validate(self) -> None:
        if self.step_size <= 0 or self.leapfrog_steps < 1:
            raise ValueError("step size must be positive and leapfrog steps >= 1")
        if self.n_chains < 1 or self.samples_per_chain < 1 or self.burn_in < 0:
            raise ValueError("chain counts must be positive and burn-in nonnegative")
        if not (0.0 <= self.step_jitter < 1.0):
            raise ValueError("step_jitter must be in [0, 1)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class HmcDiagnostics:
    acceptance_rates: np.ndarray
    psrf: np.ndarray
    step_size: float
    leapfrog_steps: int
    seed: int
    warnings: list[str] = field(default_factory=list)

    def to_manifest(self) -> dict[str, str]:
        return {
            "acceptance_rates": ",".join(f"{a:.6f}" for a in self.acceptance_rates),
            "psrf": ",".join(f"{r:.6f}" for r in self.psrf),
            "step_size": f"{self.step_size:.8g}",
            "leapfrog_steps": str(self.leapfrog_steps),
            "seed": str(self.seed),
            "warnings": ";".join(self.warnings),
        }


def _grad_log_density(target, z: torch.Tensor) -> torch.Tensor:
    z = z.detach().requires_grad_(True)
    logf = target.log_density(z)
    (grad,) = torch.autograd.grad(logf.sum(), z)
    return grad.detach()


def leapfrog(
    target,
    z: torch.Tensor,
    v: torch.Tensor,
    step_size: float,
    n_steps: int,
    strict: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Half-kick / drift / half-kick integration of the Hamiltonian field.

    Gradients of the target log-density come from autograd. The map is
    reversible: integrating (z', -v') returns (z, -v). With strict=True
    a non-finite gradient raises (chain-reset signal); otherwise the
    affected rows carry NaN and get rejected by the Metropolis check.
    """
    if n_steps < 1:
        raise ValueError("leapfrog requires at least one step")
    z = z.detach().clone()
    grad = _grad_log_density(target, z)
    if strict and not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient of the target log-density")
    v = v + 0.5 * step_size * grad
    for step in range(n_steps):
        z = z + step_size * v
        grad = _grad_log_density(target, z)
        if strict and not torch.isfinite(grad).all():
            raise FloatingPointError("non-finite gradient of the target log-density")
        if step < n_steps - 1:
            v = v + step_size * grad
        else:
            v = v + 0.5 * step_size * grad
    return z, v


def _hamiltonian(target, z: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return -target.log_density(z) + 0.5 * (v**2).sum(dim=-1)


def potential_scale_reduction(chains: np.ndarray) -> np.ndarray:
    """Split-chain PSRF per dimension for chains shaped [c, n, d]."""
    c, n, d = chains.shape
    half = n // 2
    split = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    m, length = split.shape[0], split.shape[1]
    means = split.mean(axis=1)
    variances = split.var(axis=1, ddof=1)
    w = variances.mean(axis=0)
    b = length * means.var(axis=0, ddof=1)
    var_hat = (length - 1) / length * w + b / length
    return np.sqrt(var_hat / np.maximum(w, 1e-300))


def _dual_averaging_step_size(target, z0, cfg, generator) -> float:
    """Short warm-up run tuning the step size toward the target acceptance."""
    mu = np.log(10 * cfg.step_size)
    log_eps = np.log(cfg.step_size)
    log_eps_bar, h_bar = 0.0, 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75
    z = z0.clone()
    for it in range(1, cfg.adapt_iters + 1):
        eps = float(np.exp(log_eps))
        v0 = torch.randn(z.shape, dtype=z.dtype, generator=generator)
        z_new, v_new = leapfrog(target, z, v0, eps, cfg.leapfrog_steps, strict=False)
        log_alpha = (_hamiltonian(target, z, v0) - _hamiltonian(target, z_new, v_new)).clamp(max=0.0)
        accept_prob = float(torch.exp(log_alpha).nan_to_num(0.0).mean())
        u = torch.rand(z.shape[0], generator=generator, dtype=z.dtype)
        accepted = u < torch.exp(log_alpha)
        z = torch.where(accepted.unsqueeze(-1), z_new, z)
        h_bar = (1 - 1 / (it + t0)) * h_bar + (cfg.target_accept - accept_prob) / (it + t0)
        log_eps = mu - np.sqrt(it) / gamma * h_bar
        eta = it**-kappa
        log_eps_bar = eta * log_eps + (1 - eta) * log_eps_bar
    return float(np.exp(log_eps_bar))


def hmc_sample(target, cfg: HmcConfig) -> tuple[np.ndarray, HmcDiagnostics]:
    """Sample the target with `n_chains` parallel chains.

    Chains start from the prior; each iteration draws a fresh momentum,
    integrates `leapfrog_steps` steps and applies a Metropolis accept
    with probability min(1, exp(H(z0,v0) - H(z',v'))). Burn-in is
    discarded. Returns pooled samples [chains*samples, d] plus
    diagnostics (per-chain acceptance over the recorded phase and the
    split-chain potential scale reduction factor).
    """
    cfg.validate()
    gen = new_generator(cfg.seed)
    d = target.latent_dim
    z = torch.randn(cfg.n_chains, d, dtype=torch.float64, generator=gen)
    step_size = cfg.step_size
    if cfg.adapt_step_size:
        step_size = _dual_averaging_step_size(target, z, cfg, gen)

    kept = np.empty((cfg.n_chains, cfg.samples_per_chain, d), dtype=np.float64)
    accepts = np.zeros(cfg.n_chains, dtype=np.int64)
    proposals = 0
    n_iters = cfg.burn_in + cfg.samples_per_chain * cfg.thin
    for it in range(n_iters):
        v0 = torch.randn(cfg.n_chains, d, dtype=torch.float64, generator=gen)
        jitter = 1.0
        if cfg.step_jitter > 0:
            u01 = torch.rand((), generator=gen, dtype=torch.float64)
            jitter = 1.0 + cfg.step_jitter * (2.0 * float(u01) - 1.0)
        z_new, v_new = leapfrog(target, z, v0, step_size * jitter, cfg.leapfrog_steps, strict=False)
        h0 = _hamiltonian(target, z, v0)
        h1 = _hamiltonian(target, z_new, v_new)
        log_alpha = (h0 - h1).clamp(max=0.0)
        u = torch.rand(cfg.n_chains, generator=gen, dtype=torch.float64)
        accepted = torch.log(u) < log_alpha
        z = torch.where(accepted.unsqueeze(-1), z_new, z)
        if it >= cfg.burn_in:
            since = it - cfg.burn_in
            accepts += accepted.numpy().astype(np.int64)
            proposals += 1
            if (since + 1) % cfg.thin == 0:
                kept[:, since // cfg.thin] = z.numpy()

    rates = accepts / max(proposals, 1)
    if float(rates.mean()) < 0.01:
        raise DegenerateChainsError(
            f"acceptance rate {rates.mean():.4f} < 0.01 after burn-in; reduce the step size"
        )
    warn: list[str] = []
    if not (0.4 <= float(rates.mean()) <= 0.95):
        warn.append(
            f"mean acceptance {rates.mean():.3f} outside [0.40, 0.95]; consider tuning step_size"
        )
    diag = HmcDiagnostics(
        acceptance_rates=rates,
        psrf=potential_scale_reduction(kept),
        step_size=step_size,
        leapfrog_steps=cfg.leapfrog_steps,
        seed=cfg.seed,
        warnings=warn,
    )
    return kept.reshape(-1, d), diag


def conditional_generate_subset(
    joint_model,
    target: PoeTarget,
    cfg: HmcConfig,
    target_modality: int,
    n: int,
    decode: str = "mean",
    seed: int = 0,
) -> tuple[np.ndarray, HmcDiagnostics | None]:
    """Generate modality `target_modality` given the subset behind `target`.

    Latents are drawn by HMC (thinned evenly to n) and pushed through
    the decoder; `decode` picks the likelihood mean or a sample.
    """
    if n == 0:
        return np.empty((0,)), None
    samples, diag = hmc_sample(target, cfg)
    idx = np.linspace(0, len(samples) - 1, n).round().astype(int)
    z = as_tensor(samples[idx])
    with torch.no_grad():
        params = joint_model.decode(z)[target_modality]
        family = joint_model.families[target_modality]
        if decode == "mean":
            out = likelihood_mean(params, family)
        elif decode == "sample":
            out = likelihood_sample(params, family, generator=new_generator(seed))
        else:
            raise ValueError(f"unknown decode mode {decode!r}")
    return out.numpy(), diag
