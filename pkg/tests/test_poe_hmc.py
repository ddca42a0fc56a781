"""Product-of-experts targets and the Hamiltonian sampler."""

import numpy as np
import pytest
import torch

from jnfvae.flows import FlowStack
from jnfvae.joint import standard_normal_log_prob
from jnfvae.poe import (
    DegenerateChainsError,
    FlowExpert,
    GaussianExpert,
    HmcConfig,
    PoeTarget,
    conditional_generate_subset,
    hmc_sample,
    leapfrog,
    potential_scale_reduction,
)
from jnfvae.validation import new_generator, seeded_torch

DT = torch.float64


def _random_gaussian_expert(d, gen):
    mean = torch.randn(d, dtype=DT, generator=gen)
    log_var = torch.log(0.3 + 0.5 * torch.rand(d, dtype=DT, generator=gen))
    return GaussianExpert(mean, log_var)


def _analytic_product(experts, with_prior_correction=True):
    """Moments of prod_i N(m_i, V_i) / p(z)^(S-1) for diagonal experts."""
    precisions = [torch.exp(-e.log_var) for e in experts]
    prec = sum(precisions)
    if with_prior_correction:
        prec = prec - (len(experts) - 1)
    var = 1.0 / prec
    mean = var * sum(p * e.mean for p, e in zip(precisions, experts))
    return mean, var


class TestPoeTarget:
    def test_single_expert_is_exact_passthrough(self):
        gen = new_generator(0)
        expert = _random_gaussian_expert(3, gen)
        target = PoeTarget([expert], 3)
        z = torch.randn(10, 3, dtype=DT, generator=gen)
        assert torch.equal(target.log_density(z), expert.log_density(z))

    def test_two_experts_match_analytic_product_up_to_constant(self):
        gen = new_generator(1)
        e1, e2 = _random_gaussian_expert(4, gen), _random_gaussian_expert(4, gen)
        target = PoeTarget([e1, e2], 4)
        mean, var = _analytic_product([e1, e2])
        analytic = GaussianExpert(mean, torch.log(var))
        z = torch.randn(100, 4, dtype=DT, generator=gen)
        diff = target.log_density(z) - analytic.log_density(z)
        assert float(diff.max() - diff.min()) < 1e-8

    def test_prior_experts_cancel_to_prior(self):
        zeros = torch.zeros(3, dtype=DT)
        target = PoeTarget([GaussianExpert(zeros, zeros)] * 2, 3)
        z = torch.randn(20, 3, dtype=DT, generator=new_generator(2))
        diff = target.log_density(z) - standard_normal_log_prob(z)
        assert float(diff.abs().max()) < 1e-12

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            PoeTarget([], 2)


class TestLeapfrog:
    def test_energy_drift_small_on_standard_normal(self):
        target = PoeTarget([GaussianExpert(torch.zeros(2, dtype=DT), torch.zeros(2, dtype=DT))], 2)
        gen = new_generator(3)
        z = torch.randn(16, 2, dtype=DT, generator=gen)
        v = torch.randn(16, 2, dtype=DT, generator=gen)
        z1, v1 = leapfrog(target, z, v, 0.01, 10)
        h0 = -target.log_density(z) + 0.5 * (v**2).sum(-1)
        h1 = -target.log_density(z1) + 0.5 * (v1**2).sum(-1)
        assert float((h1 - h0).abs().max()) < 1e-4

    def test_reversibility(self):
        gen = new_generator(4)
        experts = [_random_gaussian_expert(4, gen) for _ in range(2)]
        target = PoeTarget(experts, 4)
        z = torch.randn(8, 4, dtype=DT, generator=gen)
        v = torch.randn(8, 4, dtype=DT, generator=gen)
        z1, v1 = leapfrog(target, z, v, 0.1, 7)
        z2, v2 = leapfrog(target, z1, -v1, 0.1, 7)
        assert float((z2 - z).abs().max()) < 1e-6
        assert float((v2 + v).abs().max()) < 1e-6

    def test_zero_steps_rejected(self):
        target = PoeTarget([GaussianExpert(torch.zeros(2, dtype=DT), torch.zeros(2, dtype=DT))], 2)
        z = torch.zeros(1, 2, dtype=DT)
        with pytest.raises(ValueError):
            leapfrog(target, z, z.clone(), 0.1, 0)


class TestHmcSampler:
    def test_standard_normal_target(self):
        target = PoeTarget([GaussianExpert(torch.zeros(2, dtype=DT), torch.zeros(2, dtype=DT))], 2)
        cfg = HmcConfig(step_size=0.5, leapfrog_steps=10, n_chains=8, burn_in=200,
                        samples_per_chain=2000, seed=0, step_jitter=0.3)
        samples, diag = hmc_sample(target, cfg)
        assert float(np.abs(samples.mean(axis=0)).max()) < 0.05
        cov = np.cov(samples, rowvar=False)
        assert np.linalg.norm(cov - np.eye(2)) < 0.05
        assert diag.psrf.max() < 1.05

    def test_gaussian_poe_moments(self):
        gen = new_generator(5)
        experts = [_random_gaussian_expert(3, gen) for _ in range(2)]
        target = PoeTarget(experts, 3)
        mean, var = _analytic_product(experts)
        cfg = HmcConfig(step_size=0.3, leapfrog_steps=10, n_chains=8, burn_in=200,
                        samples_per_chain=1500, seed=2, step_jitter=0.3, thin=2)
        samples, _ = hmc_sample(target, cfg)
        assert float(np.abs(samples.mean(axis=0) - mean.numpy()).max()) < 0.05
        emp_var = samples.var(axis=0, ddof=1)
        assert np.abs(emp_var / var.numpy() - 1.0).max() < 0.05

    def test_deterministic_given_seed(self):
        gen = new_generator(6)
        target = PoeTarget([_random_gaussian_expert(2, gen)], 2)
        cfg = HmcConfig(step_size=0.3, leapfrog_steps=5, n_chains=4, burn_in=20,
                        samples_per_chain=50, seed=11)
        a, diag_a = hmc_sample(target, cfg)
        b, diag_b = hmc_sample(target, cfg)
        assert np.array_equal(a, b)
        assert np.array_equal(diag_a.acceptance_rates, diag_b.acceptance_rates)

    def test_mean_error_decays_like_root_n(self):
        # absolute error of the sample mean ~ n^(-1/2): log-log slope
        # close to -1/2 across three decades, averaged over replicas
        gen = new_generator(7)
        experts = [_random_gaussian_expert(2, gen) for _ in range(2)]
        target = PoeTarget(experts, 2)
        mean, _ = _analytic_product(experts)
        sizes = [100, 1000, 10000]
        errors = []
        for n in sizes:
            errs = []
            for rep in range(8):
                cfg = HmcConfig(step_size=0.4, leapfrog_steps=8, n_chains=4, burn_in=100,
                                samples_per_chain=max(1, n // 4), seed=100 + 17 * rep + n,
                                step_jitter=0.3)
                samples, _ = hmc_sample(target, cfg)
                errs.append(np.linalg.norm(samples.mean(axis=0) - mean.numpy()))
            errors.append(np.mean(errs))
        slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.15)

    def test_degenerate_chains_signal(self):
        # absurd step size: everything rejected
        gen = new_generator(8)
        experts = [_random_gaussian_expert(2, gen) for _ in range(2)]
        target = PoeTarget(experts, 2)
        cfg = HmcConfig(step_size=200.0, leapfrog_steps=10, n_chains=4, burn_in=10,
                        samples_per_chain=50, seed=0, step_jitter=0.0)
        with pytest.raises(DegenerateChainsError):
            hmc_sample(target, cfg)

    def test_acceptance_warning_outside_band(self):
        target = PoeTarget([GaussianExpert(torch.zeros(1, dtype=DT), torch.zeros(1, dtype=DT))], 1)
        cfg = HmcConfig(step_size=1e-5, leapfrog_steps=2, n_chains=2, burn_in=5,
                        samples_per_chain=20, seed=0)
        _, diag = hmc_sample(target, cfg)  # tiny step: acceptance ~ 1.0
        assert any("acceptance" in w for w in diag.warnings)

    def test_small_step_acceptance_matches_harmonic_theory(self):
        # detailed-balance sanity: on a Gaussian target the leapfrog
        # energy error is O(eps^2) per unit time, so at eps=0.01 the
        # acceptance probability is 1 up to ~1e-4
        target = PoeTarget([GaussianExpert(torch.zeros(2, dtype=DT), torch.zeros(2, dtype=DT))], 2)
        cfg = HmcConfig(step_size=0.01, leapfrog_steps=10, n_chains=8, burn_in=10,
                        samples_per_chain=200, seed=5, step_jitter=0.0)
        _, diag = hmc_sample(target, cfg)
        assert float(diag.acceptance_rates.mean()) > 0.9999

    def test_psrf_near_one_for_mixed_chains(self):
        rng = np.random.default_rng(0)
        chains = rng.normal(size=(4, 500, 3))
        assert np.all(potential_scale_reduction(chains) < 1.05)

    def test_psrf_large_for_separated_chains(self):
        rng = np.random.default_rng(1)
        chains = rng.normal(size=(4, 500, 1)) + np.arange(4).reshape(4, 1, 1) * 5
        assert potential_scale_reduction(chains)[0] > 2.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HmcConfig(step_size=-0.1).validate()
        with pytest.raises(ValueError):
            HmcConfig(leapfrog_steps=0).validate()
        with pytest.raises(ValueError):
            HmcConfig(thin=0).validate()


class _TinyDecoder:
    families = ["gaussian_unit_variance"]

    def decode(self, z):
        return [z * 2.0 + 1.0]


class TestConditionalGeneration:
    def test_n_zero_short_circuits(self):
        target = PoeTarget([GaussianExpert(torch.zeros(2, dtype=DT), torch.zeros(2, dtype=DT))], 2)
        out, diag = conditional_generate_subset(
            _TinyDecoder(), target, HmcConfig(samples_per_chain=5, burn_in=1), 0, 0
        )
        assert out.shape == (0,)
        assert diag is None

    def test_single_expert_matches_direct_sampling_distribution(self):
        # |S| = 1 degenerates to sampling the expert itself; compare the
        # HMC route with direct flow sampling via an energy-distance test
        with seeded_torch(10):
            stack = FlowStack(2, 2, n_blocks=1, made_hidden=(16, 16), base_hidden=(8,))
            for p in stack.parameters():
                p.data.add_(0.1 * torch.randn_like(p))
        cond = torch.tensor([0.4, -0.7], dtype=DT)
        with torch.no_grad():
            direct = stack.sample(cond, 2000, generator=new_generator(1)).numpy()
        target = PoeTarget([FlowExpert(stack, cond)], 2)
        cfg = HmcConfig(step_size=0.4, leapfrog_steps=8, n_chains=8, burn_in=150,
                        samples_per_chain=250, seed=3, step_jitter=0.3)
        samples, _ = hmc_sample(target, cfg)

        def energy_distance(a, b):
            def mean_dist(u, v):
                return np.mean(np.linalg.norm(u[:, None, :] - v[None, :, :], axis=-1))

            return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)

        observed = energy_distance(samples[:1000], direct[:1000])
        # permutation null at the 5% level
        pooled = np.concatenate([samples[:1000], direct[:1000]])
        rng = np.random.default_rng(0)
        null = []
        for _ in range(39):
            perm = rng.permutation(len(pooled))
            null.append(energy_distance(pooled[perm[:1000]], pooled[perm[1000:]]))
        assert observed <= np.quantile(null, 0.95) + 1e-3

    def test_generation_decodes_thinned_chain(self):
        target = PoeTarget([GaussianExpert(torch.zeros(2, dtype=DT), torch.zeros(2, dtype=DT))], 2)
        cfg = HmcConfig(step_size=0.5, leapfrog_steps=5, n_chains=4, burn_in=50,
                        samples_per_chain=100, seed=4)
        out, diag = conditional_generate_subset(_TinyDecoder(), target, cfg, 0, 16)
        assert out.shape == (16, 2)
        assert diag is not None
        assert np.isfinite(out).all()
