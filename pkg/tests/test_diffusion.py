import math

import numpy as np
import pytest
import torch

from onestep_vsr.core import ContractViolation, LatentGrid
from onestep_vsr.diffusion import (
    NoiseSchedule,
    SingularScheduleError,
    add_noise,
    one_step_denoise,
)

from conftest import assert_grad_close, central_difference


def rand_latent(rng, h, w, d, scale=1.0):
    return LatentGrid(torch.tensor(rng.normal(0, scale, size=(h, w, d))))


class TestSchedule:
    def test_variance_preserving_identity(self):
        sched = NoiseSchedule.cosine(T=100, alpha_final=0.5)
        assert sched.T == 100
        s = sched.alphas**2 + sched.betas**2
        assert float((s - 1.0).abs().max()) < 1e-12

    def test_alpha_final_respected(self):
        sched = NoiseSchedule.cosine(T=250, alpha_final=0.37)
        assert abs(float(sched.alphas[-1]) - 0.37) < 1e-12

    def test_alphas_monotone_decreasing(self):
        sched = NoiseSchedule.cosine(T=50, alpha_final=0.2)
        assert bool((sched.alphas[1:] <= sched.alphas[:-1]).all())

    def test_singular_final_alpha_rejected(self):
        with pytest.raises(SingularScheduleError):
            NoiseSchedule(torch.tensor([0.9, 0.0]), torch.tensor([0.1, 1.0]))

    def test_bad_construction_args(self):
        with pytest.raises(ContractViolation):
            NoiseSchedule.cosine(T=0)
        with pytest.raises(ContractViolation):
            NoiseSchedule.cosine(T=10, alpha_final=0.0)
        with pytest.raises(ContractViolation):
            NoiseSchedule(torch.tensor([0.5]), torch.tensor([0.5, 0.5]))


class TestAddNoise:
    def test_zero_beta_scales_only(self):
        sched = NoiseSchedule(torch.tensor([1.0, 0.9]), torch.tensor([0.0, 0.1]))
        rng = np.random.default_rng(0)
        z = rand_latent(rng, 3, 3, 2)
        eps = rand_latent(rng, 3, 3, 2)
        out = add_noise(z, 1, eps, sched)
        assert torch.equal(out.values, 1.0 * z.values)

    def test_zero_latent_gives_scaled_noise(self):
        sched = NoiseSchedule(torch.tensor([0.6]), torch.tensor([0.8]))
        rng = np.random.default_rng(1)
        z = LatentGrid(torch.zeros(2, 2, 3, dtype=torch.float64))
        eps = rand_latent(rng, 2, 2, 3)
        out = add_noise(z, 1, eps, sched)
        assert torch.allclose(out.values, 0.8 * eps.values, atol=1e-15)

    def test_matches_scalar_oracle(self):
        sched = NoiseSchedule.cosine(T=37, alpha_final=0.4)
        rng = np.random.default_rng(2)
        z = rand_latent(rng, 4, 4, 2)
        eps = rand_latent(rng, 4, 4, 2)
        out = add_noise(z, 37, eps, sched)
        a, b = sched.coeffs(37)
        expected = np.zeros((4, 4, 2))
        zn, en = z.values.numpy(), eps.values.numpy()
        for i in range(4):
            for j in range(4):
                for k in range(2):
                    expected[i, j, k] = a * zn[i, j, k] + b * en[i, j, k]
        assert np.abs(out.values.numpy() - expected).max() < 1e-12

    def test_step_bounds_enforced(self):
        sched = NoiseSchedule.cosine(T=10)
        z = LatentGrid(torch.zeros(2, 2, 1))
        with pytest.raises(ContractViolation):
            add_noise(z, 0, z, sched)
        with pytest.raises(ContractViolation):
            add_noise(z, 11, z, sched)

    def test_shape_mismatch_rejected(self):
        sched = NoiseSchedule.cosine(T=10)
        z = LatentGrid(torch.zeros(2, 2, 1))
        eps = LatentGrid(torch.zeros(2, 2, 2))
        with pytest.raises(ContractViolation):
            add_noise(z, 1, eps, sched)


class TestOneStepDenoise:
    def test_roundtrip_recovers_latent(self):
        sched = NoiseSchedule.cosine(T=64, alpha_final=0.25)
        rng = np.random.default_rng(3)
        z = rand_latent(rng, 4, 4, 3)
        eps = rand_latent(rng, 4, 4, 3)
        noisy = add_noise(z, 64, eps, sched)
        back = one_step_denoise(noisy, eps, sched)
        rel = float((back.values - z.values).abs().max() / z.values.abs().max())
        assert rel <= 1e-9

    def test_zero_prediction_divides(self):
        sched = NoiseSchedule.cosine(T=16, alpha_final=0.5)
        rng = np.random.default_rng(4)
        z = rand_latent(rng, 3, 2, 2)
        zero = LatentGrid(torch.zeros_like(z.values))
        out = one_step_denoise(z, zero, sched)
        assert torch.allclose(out.values, z.values / 0.5, atol=1e-15)

    def test_half_alpha_hand_value(self):
        # alpha_T = 0.5, beta_T = sqrt(0.75): (1 - sqrt(0.75)*0.8) / 0.5
        sched = NoiseSchedule.cosine(T=8, alpha_final=0.5)
        z = LatentGrid(torch.ones(2, 2, 1, dtype=torch.float64))
        eps = LatentGrid(torch.full((2, 2, 1), 0.8, dtype=torch.float64))
        out = one_step_denoise(z, eps, sched)
        expected = (1.0 - math.sqrt(0.75) * 0.8) / 0.5
        assert abs(expected - 0.61435935394489815) < 1e-12
        assert float((out.values - expected).abs().max()) < 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_jointly_linear_in_latents(self, seed):
        sched = NoiseSchedule.cosine(T=12, alpha_final=0.3)
        rng = np.random.default_rng(seed)
        z1, z2 = rand_latent(rng, 3, 3, 2), rand_latent(rng, 3, 3, 2)
        e1, e2 = rand_latent(rng, 3, 3, 2), rand_latent(rng, 3, 3, 2)
        a, b = 0.7, -1.3
        for op in (
            lambda z, e: add_noise(z, 12, e, sched).values,
            lambda z, e: one_step_denoise(z, e, sched).values,
        ):
            lhs = op(LatentGrid(a * z1.values + b * z2.values),
                     LatentGrid(a * e1.values + b * e2.values))
            rhs = a * op(z1, e1) + b * op(z2, e2)
            assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_gradient_is_constant_ratio(self):
        sched = NoiseSchedule.cosine(T=20, alpha_final=0.45)
        rng = np.random.default_rng(6)
        z = rand_latent(rng, 2, 2, 2)
        eps_t = torch.tensor(rng.normal(0, 1, size=(2, 2, 2)), requires_grad=True)
        out = one_step_denoise(z, LatentGrid(eps_t), sched).values.sum()
        (grad,) = torch.autograd.grad(out, eps_t)
        a, b = sched.coeffs(sched.T)
        assert torch.allclose(grad, torch.full_like(grad, -b / a), atol=1e-12)

        def fn(x):
            return one_step_denoise(z, LatentGrid(x), sched).values.sum()

        fd = central_difference(fn, eps_t)
        assert_grad_close(grad, fd, rel=1e-4)
