"""Analytic linear-Gaussian test model.

Decoder i: x_i = W_i z + b_i + unit-variance noise; prior z ~ N(0, I).
Everything of interest (marginal likelihood, exact posterior, expected
ELBO, conditional likelihoods) is closed form, which makes this the
oracle for the estimator tests.
"""

import math

import numpy as np
import torch

DTYPE = torch.float64
LOG_2PI = math.log(2 * math.pi)


class DiagGaussianStub:
    def __init__(self, mean, log_var):
        self.mean = mean
        self.log_var = log_var

    @property
    def dim(self):
        return self.mean.shape[-1]

    def log_prob(self, z):
        return -0.5 * (
            self.log_var + LOG_2PI + (z - self.mean) ** 2 / torch.exp(self.log_var)
        ).sum(-1)

    def rsample(self, generator=None, noise=None):
        if noise is None:
            noise = torch.randn(self.mean.shape, dtype=self.mean.dtype, generator=generator)
        return self.mean + noise * torch.exp(0.5 * self.log_var)


class LinearGaussianModel:
    """Joint model with linear decoders and a diagonal-Gaussian encoder.

    The encoder uses the exact posterior mean map and the diagonal of
    the exact posterior covariance (the full covariance is generally
    non-diagonal, so the encoder is deliberately an approximation).
    """

    def __init__(self, Ws, bs, seed=0):
        self.Ws = [torch.as_tensor(W, dtype=DTYPE) for W in Ws]
        self.bs = [torch.as_tensor(b, dtype=DTYPE) for b in bs]
        self.latent_dim = self.Ws[0].shape[1]
        self.families = ["gaussian_unit_variance"] * len(Ws)
        W = torch.cat(self.Ws, dim=0)
        self.W_stack = W
        self.b_stack = torch.cat(self.bs, dim=0)
        prec = torch.eye(self.latent_dim, dtype=DTYPE) + W.T @ W
        self.post_cov = torch.linalg.inv(prec)
        self.post_mean_map = self.post_cov @ W.T

    # --- joint-model protocol -------------------------------------
    def encode(self, xs):
        x = torch.cat([x.reshape(x.shape[0], -1) for x in xs], dim=1)
        mean = (x - self.b_stack) @ self.post_mean_map.T
        log_var = torch.log(torch.diag(self.post_cov)).expand_as(mean)
        return DiagGaussianStub(mean, log_var)

    def decode(self, z):
        return [z @ W.T + b for W, b in zip(self.Ws, self.bs)]

    # --- closed forms ---------------------------------------------
    def log_marginal(self, xs):
        """ln p(x_1, .., x_m) for a single (unbatched) observation."""
        x = torch.cat([torch.as_tensor(v, dtype=DTYPE).reshape(-1) for v in xs])
        cov = self.W_stack @ self.W_stack.T + torch.eye(len(x), dtype=DTYPE)
        diff = x - self.b_stack
        sign, logdet = torch.linalg.slogdet(cov)
        quad = diff @ torch.linalg.solve(cov, diff)
        return float(-0.5 * (len(x) * LOG_2PI + logdet + quad))

    def posterior(self, xs):
        """Exact (full-covariance) posterior for a single observation."""
        x = torch.cat([torch.as_tensor(v, dtype=DTYPE).reshape(-1) for v in xs])
        return self.post_mean_map @ (x - self.b_stack), self.post_cov

    def expected_elbo(self, xs):
        """E_q[ln p(x|z)] - KL(q || prior) in closed form (single obs)."""
        q = self.encode([torch.as_tensor(v, dtype=DTYPE).reshape(1, -1) for v in xs])
        mu_q = q.mean[0]
        var_q = torch.exp(q.log_var[0])
        x = torch.cat([torch.as_tensor(v, dtype=DTYPE).reshape(-1) for v in xs])
        resid = x - self.b_stack - self.W_stack @ mu_q
        trace_term = ((self.W_stack**2) * var_q.unsqueeze(0)).sum()
        recon = -0.5 * (resid @ resid + trace_term) - 0.5 * len(x) * LOG_2PI
        kl = 0.5 * (var_q + mu_q**2 - 1.0 - torch.log(var_q)).sum()
        return float(recon - kl)

    def kl_encoder_to_posterior(self, xs):
        """KL(diagonal encoder || exact posterior), closed form."""
        q = self.encode([torch.as_tensor(v, dtype=DTYPE).reshape(1, -1) for v in xs])
        mu_q, var_q = q.mean[0], torch.exp(q.log_var[0])
        mu_p, cov_p = self.posterior(xs)
        prec_p = torch.linalg.inv(cov_p)
        d = self.latent_dim
        diff = mu_p - mu_q
        kl = 0.5 * (
            torch.trace(prec_p @ torch.diag(var_q))
            + diff @ prec_p @ diff
            - d
            + torch.linalg.slogdet(cov_p)[1]
            - torch.log(var_q).sum()
        )
        return float(kl)

    def conditional_ll(self, target_idx, x_target, mean, cov):
        """ln integral N(x_t; W_t z + b_t, I) N(z; mean, cov) dz."""
        W = self.Ws[target_idx]
        x = torch.as_tensor(x_target, dtype=DTYPE).reshape(-1)
        cov = torch.as_tensor(cov, dtype=DTYPE)
        if cov.ndim == 1:
            cov = torch.diag(cov)
        pred_cov = W @ cov @ W.T + torch.eye(len(x), dtype=DTYPE)
        diff = x - self.bs[target_idx] - W @ torch.as_tensor(mean, dtype=DTYPE)
        sign, logdet = torch.linalg.slogdet(pred_cov)
        return float(-0.5 * (len(x) * LOG_2PI + logdet + diff @ torch.linalg.solve(pred_cov, diff)))


def random_model(m=1, d_x=3, d_z=2, seed=0, scale=0.8):
    rng = np.random.default_rng(seed)
    Ws = [rng.normal(scale=scale, size=(d_x, d_z)) for _ in range(m)]
    bs = [rng.normal(size=d_x) for _ in range(m)]
    return LinearGaussianModel(Ws, bs)
