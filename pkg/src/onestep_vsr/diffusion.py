"""Noise schedule bookkeeping and the forward / one-step-reverse processes.

The forward process mixes a clean latent with noise as
alpha_t * z + beta_t * eps. The one-step reverse path inverts that mix at
the final step: (z - beta_T * eps_hat) / alpha_T. Only the final step's
coefficients are ever consumed at inference; the full table exists so the
forward process can be exercised at arbitrary t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import ContractViolation, LatentGrid


class SingularScheduleError(ValueError):
    """The schedule's final signal coefficient is zero; the one-step inverse is undefined."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step (alpha_t, beta_t) coefficient pairs for t = 1..T."""

    alphas: torch.Tensor
    betas: torch.Tensor

    def __post_init__(self):
        a, b = self.alphas, self.betas
        if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
            raise ContractViolation("alphas and betas must be equal-length 1-D tensors")
        if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
            raise ContractViolation("schedule coefficients must be finite")
        if not float(a[-1]) > 0.0:
            raise SingularScheduleError("alpha_T must be positive")

    @property
    def T(self) -> int:
        return self.alphas.shape[0]

    def coeffs(self, t: int) -> tuple[float, float]:
        if not 1 <= t <= self.T:
            raise ContractViolation(f"step index t={t} outside 1..{self.T}")
        return float(self.alphas[t - 1]), float(self.betas[t - 1])

    @classmethod
    def cosine(cls, T: int = 1000, alpha_final: float = 0.5) -> "NoiseSchedule":
        """Variance-preserving cosine ramp from alpha ~ 1 down to alpha_final.

        alpha_t = cos(theta * t / T), beta_t = sin(theta * t / T) with
        theta = arccos(alpha_final), so alpha_t^2 + beta_t^2 = 1 exactly and
        alpha_T = alpha_final.
        """
        if T < 1:
            raise ContractViolation("T must be >= 1")
        if not 0.0 < alpha_final <= 1.0:
            raise ContractViolation("alpha_final must lie in (0, 1]")
        theta = math.acos(alpha_final)
        ts = torch.arange(1, T + 1, dtype=torch.float64) / T
        return cls(torch.cos(theta * ts), torch.sin(theta * ts))


def add_noise(z: LatentGrid, t: int, eps: LatentGrid, sched: NoiseSchedule) -> LatentGrid:
    """Forward-noise a latent at step t: alpha_t * z + beta_t * eps."""
    if eps.values.shape != z.values.shape:
        raise ContractViolation("eps shape must equal latent shape")
    a, b = sched.coeffs(t)
    return LatentGrid(a * z.values + b * eps.values, z.source_frame_index)


def one_step_denoise(z_noisy: LatentGrid, predicted_eps: LatentGrid,
                     sched: NoiseSchedule) -> LatentGrid:
    """Single-evaluation reverse step: (z - beta_T * eps_hat) / alpha_T."""
    if predicted_eps.values.shape != z_noisy.values.shape:
        raise ContractViolation("predicted noise shape must equal latent shape")
    a, b = sched.coeffs(sched.T)
    if a == 0.0:
        raise SingularScheduleError("alpha_T is zero")
    return LatentGrid((z_noisy.values - b * predicted_eps.values) / a,
                      z_noisy.source_frame_index)
