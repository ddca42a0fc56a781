"""Model evaluation: likelihood estimators, coherence, FID, bound checks.

All estimators work in log space with log-sum-exp stabilization and can
report delta-method standard errors, so downstream checks can reason
about Monte Carlo noise instead of guessing tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from .joint import DiagGaussian, kl_to_standard_normal, standard_normal_log_prob
from .likelihoods import log_likelihood
from .networks import MlpClassifier
from .poe import HmcConfig, PoeTarget, hmc_sample
from .validation import as_tensor, check_fitted, derive_seed, new_generator, seeded_torch


def _log_mean_exp(logw: torch.Tensor) -> tuple[float, float]:
    """Log of the mean of exp(logw) plus a delta-method standard error."""
    n = logw.shape[0]
    shift = logw.max()
    w = torch.exp(logw - shift)
    mean = w.mean()
    value = float(shift + torch.log(mean))
    if n > 1:
        se = float(w.std(unbiased=True) / (mean * math.sqrt(n)))
    else:
        se = float("inf")
    return value, se


def estimate_joint_ll(
    joint_model,
    xs,
    n_is: int = 1000,
    seed: int = 0,
    batch: int = 1000,
    return_weights: bool = False,
):
    """Importance-sampling estimate of the joint log-likelihood of one sample.

    Draws latents from the joint encoder and averages the importance
    weights p(x|z) p(z) / q(z|X) in log space. Returns (estimate, se);
    with return_weights the per-sample log-weights come back too, for
    diagnostics dumps.
    """
    if n_is < 1:
        raise ValueError("n_is must be >= 1")
    xs = [as_tensor(x).unsqueeze(0) for x in xs]
    gen = new_generator(seed)
    with torch.no_grad():
        q = joint_model.encode(xs)
        logw = []
        done = 0
        while done < n_is:
            take = min(batch, n_is - done)
            noise = torch.randn(take, q.dim, dtype=q.mean.dtype, generator=gen)
            z = q.mean + noise * torch.exp(0.5 * q.log_var)
            params = joint_model.decode(z)
            lp = standard_normal_log_prob(z) - DiagGaussian(
                q.mean.expand(take, -1), q.log_var.expand(take, -1)
            ).log_prob(z)
            for i, x in enumerate(xs):
                lp = lp + log_likelihood(
                    params[i], x.expand(take, *x.shape[1:]), joint_model.families[i]
                )
            logw.append(lp)
            done += take
        all_logw = torch.cat(logw)
        value, se = _log_mean_exp(all_logw)
    if return_weights:
        return value, se, all_logw.numpy()
    return value, se


def estimate_cond_ll(
    joint_model,
    sampler,
    target_idx: int,
    x_target,
    n_mc: int = 1000,
    seed: int = 0,
    batch: int = 1000,
) -> tuple[float, float]:
    """Monte Carlo estimate of ln integral p(x_target | z) q(z) dz.

    `sampler(n, seed)` must return n latent draws from the conditioning
    posterior (a unimodal flow or an HMC product-of-experts run).
    Returns (estimate, se).
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    x = as_tensor(x_target).unsqueeze(0)
    z = as_tensor(sampler(n_mc, seed))
    with torch.no_grad():
        logp = []
        for start in range(0, n_mc, batch):
            zb = z[start : start + batch]
            params = joint_model.decode(zb)[target_idx]
            logp.append(
                log_likelihood(
                    params, x.expand(zb.shape[0], *x.shape[1:]), joint_model.families[target_idx]
                )
            )
        return _log_mean_exp(torch.cat(logp))


def posterior_sampler(stack, cond):
    """Adapter: a FlowStack + conditioning input as a latent sampler."""

    def _sample(n: int, seed: int):
        with torch.no_grad():
            return stack.sample(cond, n, generator=new_generator(seed))

    return _sample


def poe_sampler(target: PoeTarget, cfg: HmcConfig):
    """Adapter: an HMC run over a product-of-experts target as a sampler."""

    def _sample(n: int, seed: int):
        run_cfg = HmcConfig(**{**cfg.__dict__, "seed": seed})
        samples, _ = hmc_sample(target, run_cfg)
        idx = np.linspace(0, len(samples) - 1, n).round().astype(int)
        return samples[idx]

    return _sample


class ModalityClassifier(BaseEstimator, ClassifierMixin):
    """Small MLP label classifier; doubles as the FID feature extractor.

    A held-out fraction measures accuracy before the classifier may be
    used for coherence; use in coherence is refused below the floor.
    """

    def __init__(
        self,
        hidden: tuple[int, ...] = (256,),
        epochs: int = 20,
        lr: float = 1e-3,
        batch_size: int = 128,
        holdout_fraction: float = 0.2,
        accuracy_floor: float = 0.9,
        seed: int = 0,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.holdout_fraction = holdout_fraction
        self.accuracy_floor = accuracy_floor
        self.seed = seed

    def fit(self, X, y):
        x = as_tensor(X)
        x = x.reshape(x.shape[0], -1)
        y = torch.as_tensor(np.asarray(y), dtype=torch.long)
        self.classes_ = np.unique(y.numpy())
        n_classes = int(y.max()) + 1
        rng = np.random.default_rng(derive_seed(self.seed, "classifier-split"))
        perm = rng.permutation(len(x))
        n_hold = max(1, int(len(x) * self.holdout_fraction))
        hold, train = perm[:n_hold], perm[n_hold:]
        with seeded_torch(derive_seed(self.seed, "classifier-init")):
            self.net_ = MlpClassifier(x.shape[1], tuple(self.hidden), n_classes)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        loss_fn = torch.nn.CrossEntropyLoss()
        order_rng = np.random.default_rng(derive_seed(self.seed, "classifier-shuffle"))
        for epoch in range(self.epochs):
            order = order_rng.permutation(train)
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                logits = self.net_(x[idx])
                loss = loss_fn(logits, y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        with torch.no_grad():
            pred = self.net_(x[hold]).argmax(dim=1)
        self.accuracy_ = float((pred == y[hold]).double().mean())
        return self

    def predict(self, X) -> np.ndarray:
        check_fitted(self, "net_")
        x = as_tensor(X)
        with torch.no_grad():
            return self.net_(x.reshape(x.shape[0], -1)).argmax(dim=1).numpy()

    def features(self, X) -> np.ndarray:
        check_fitted(self, "net_")
        x = as_tensor(X)
        with torch.no_grad():
            return self.net_.features(x.reshape(x.shape[0], -1)).numpy()

    def require_coherence_ready(self) -> None:
        check_fitted(self, "net_")
        if self.accuracy_ < self.accuracy_floor:
            raise RuntimeError(
                f"classifier accuracy {self.accuracy_:.3f} below floor "
                f"{self.accuracy_floor:.2f}; not usable for coherence"
            )


def coherence(
    generate_fn,
    classifier: ModalityClassifier,
    source_inputs,
    labels,
    n_per_sample: int = 1,
    seed: int = 0,
) -> float:
    """Fraction of generations whose predicted label matches the source label.

    `generate_fn(source_inputs, draw_index, seed)` must return one
    generated target-modality batch aligned with `source_inputs`.
    """
    classifier.require_coherence_ready()
    labels = np.asarray(labels)
    hits, total = 0, 0
    for k in range(n_per_sample):
        generated = generate_fn(source_inputs, k, derive_seed(seed, f"coherence-{k}"))
        pred = classifier.predict(generated)
        hits += int((pred == labels).sum())
        total += len(labels)
    return hits / total


def _sym_sqrt_floor(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root with eigenvalues floored at zero."""
    mat = 0.5 * (mat + mat.T)
    eigvals, eigvecs = np.linalg.eigh(mat)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between two Gaussians given their moments."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    sigma1, sigma2 = np.asarray(sigma1, float), np.asarray(sigma2, float)
    s1_half = _sym_sqrt_floor(sigma1)
    cross = _sym_sqrt_floor(s1_half @ sigma2 @ s1_half)
    return float(((mu1 - mu2) ** 2).sum() + np.trace(sigma1 + sigma2 - 2.0 * cross))


def fid(features_real, features_gen) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.asarray(features_real, float)
    b = np.asarray(features_gen, float)
    d = a.shape[1]
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(
            f"insufficient samples for a {d}-dim feature covariance: {len(a)} vs {len(b)}"
        )
    return fid_from_moments(
        a.mean(axis=0), np.cov(a, rowvar=False), b.mean(axis=0), np.cov(b, rowvar=False)
    )


def vi_bound_check(
    joint_model,
    stacks: list,
    conds: list,
    xs,
    n_mc: int = 1000,
    seed: int = 0,
) -> tuple[float, float, bool, float]:
    """Check the two-modality predictive-likelihood bound on one pair.

    lhs sums the two conditional log-likelihood estimates; rhs is the
    ELBO plus the prior KL minus the summed joint-to-unimodal matching
    term, all estimated with n_mc draws. Returns (lhs, rhs, satisfied,
    combined_se); satisfied allows 3 combined standard errors of slack.
    """
    if len(stacks) != 2:
        raise ValueError("the bound check is defined for two modalities")
    xs = [as_tensor(x) for x in xs]
    lhs, var = 0.0, 0.0
    for tgt, src in ((0, 1), (1, 0)):
        sampler = posterior_sampler(stacks[src], conds[src])
        val, se = estimate_cond_ll(
            joint_model, sampler, tgt, xs[tgt], n_mc, derive_seed(seed, f"cond-{tgt}")
        )
        lhs += val
        var += se**2

    with torch.no_grad():
        batch = [x.unsqueeze(0) for x in xs]
        q = joint_model.encode(batch)
        gen = new_generator(derive_seed(seed, "rhs"))
        noise = torch.randn(n_mc, q.dim, dtype=q.mean.dtype, generator=gen)
        z = q.mean + noise * torch.exp(0.5 * q.log_var)
        recon = torch.zeros(n_mc, dtype=z.dtype)
        for i in range(2):
            params = joint_model.decode(z)[i]
            recon = recon + log_likelihood(
                params, batch[i].expand(n_mc, *batch[i].shape[1:]), joint_model.families[i]
            )
        kl_prior = float(kl_to_standard_normal(q))
        elbo_draws = recon - kl_prior
        q_rep = DiagGaussian(q.mean.expand(n_mc, -1), q.log_var.expand(n_mc, -1))
        match_draws = torch.zeros(n_mc, dtype=z.dtype)
        for i in range(2):
            cond = conds[i]
            match_draws = match_draws + (q_rep.log_prob(z) - stacks[i].log_density(z, cond))
        rhs_draws = elbo_draws + kl_prior - match_draws
        rhs = float(rhs_draws.mean())
        var += float(rhs_draws.var(unbiased=True) / n_mc)

    se = math.sqrt(var)
    return lhs, rhs, lhs >= rhs - 3.0 * se, se


@dataclass
class EvalReport:
    """Aggregated metrics for one trained model on one dataset."""

    model_id: str = ""
    dataset_id: str = ""
    seed: int = 0
    n_is: int = 0
    n_mc: int = 0
    joint_ll: float | None = None
    cond_ll: dict[str, float] = field(default_factory=dict)
    coherence: dict[str, float] = field(default_factory=dict)
    fid: dict[str, float] = field(default_factory=dict)
    vi_bound_violation_rate: float | None = None
    feature_extractor: str = ""
    extras: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        for key, val in self.coherence.items():
            if not (0.0 <= val <= 1.0):
                raise ValueError(f"coherence[{key}] = {val} outside [0, 1]")
        for group in (self.cond_ll, self.fid, self.extras):
            for key, val in group.items():
                if not math.isfinite(val):
                    raise ValueError(f"non-finite metric {key}={val}")

    def to_text(self) -> str:
        lines = [
            "# evaluation report",
            f"model_id={self.model_id}",
            f"dataset_id={self.dataset_id}",
            f"seed={self.seed}",
            f"n_is={self.n_is}",
            f"n_mc={self.n_mc}",
            f"feature_extractor={self.feature_extractor}",
        ]
        if self.joint_ll is not None:
            lines.append(f"joint_ll={self.joint_ll:.6f}")
        for name, table in (
            ("cond_ll", self.cond_ll),
            ("coherence", self.coherence),
            ("fid", self.fid),
            ("extras", self.extras),
        ):
            for key in sorted(table):
                lines.append(f"{name}.{key}={table[key]:.6f}")
        if self.vi_bound_violation_rate is not None:
            lines.append(f"vi_bound_violation_rate={self.vi_bound_violation_rate:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        report = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            if key in ("model_id", "dataset_id", "feature_extractor"):
                setattr(report, key, value)
            elif key in ("seed", "n_is", "n_mc"):
                setattr(report, key, int(value))
            elif key == "joint_ll":
                report.joint_ll = float(value)
            elif key == "vi_bound_violation_rate":
                report.vi_bound_violation_rate = float(value)
            else:
                group, sub = key.split(".", 1)
                getattr(report, group)[sub] = float(value)
        return report
