"""Adjacent-frame adversarial losses and the focal MSE.

The discriminator scores patch-level features; its loss is a two-way
softmax contrast between the (real prev, real curr) pair and the
(real prev, fake curr) pair, per patch, with cosine-similarity logits
scaled by 1/tau. The generator maximizes similarity between its output's
features and the previous real frame's features. The same patch cosines
also drive a per-pixel focal weighting of the reconstruction MSE, so
poorly reconstructed regions receive more gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import ContractViolation, Frame, PixelMask


@dataclass(frozen=True)
class PatchFeatureGrid:
    """(P, Q, D) patch embeddings plus the pixel stride of one patch."""

    features: torch.Tensor
    patch_size: int

    def __post_init__(self):
        f = self.features
        if not isinstance(f, torch.Tensor) or f.ndim != 3:
            raise ContractViolation("patch features must be a (P, Q, D) tensor")
        if self.patch_size < 1:
            raise ContractViolation("patch_size must be >= 1")
        if not torch.isfinite(f).all():
            raise ContractViolation("patch features contain non-finite values")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]


@dataclass(frozen=True)
class AfatParams:
    """tau: contrast temperature (logits are cosine / tau). gamma: focal exponent."""

    tau: float = 100.0
    gamma: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractViolation("tau must be positive")
        if self.gamma < 0:
            raise ContractViolation("gamma must be >= 0")


def patch_cosine_grid(a: PatchFeatureGrid, b: PatchFeatureGrid) -> torch.Tensor:
    """Per-patch cosine similarity, a (P, Q) tensor in [-1, 1]."""
    fa, fb = a.features, b.features
    if fa.shape != fb.shape:
        raise ContractViolation("patch grids must share (P, Q, D)")
    na = fa.norm(dim=2)
    nb = fb.norm(dim=2)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ContractViolation("cosine similarity undefined for a zero feature vector")
    cos = (fa * fb).sum(dim=2) / (na * nb)
    return cos.clamp(-1.0, 1.0)


def discriminator_loss(
    f_prev_real: PatchFeatureGrid,
    f_curr_real: PatchFeatureGrid,
    f_curr_fake: PatchFeatureGrid,
    tau: float,
) -> torch.Tensor:
    """Patch-averaged two-way contrast: -log softmax of the real pair vs the fake pair."""
    if not tau > 0:
        raise ContractViolation("tau must be positive")
    sim_real = patch_cosine_grid(f_prev_real, f_curr_real) / tau
    sim_fake = patch_cosine_grid(f_prev_real, f_curr_fake) / tau
    # -log(e^r / (e^r + e^f)) == softplus(f - r), computed stably
    return F.softplus(sim_fake - sim_real).mean()


def generator_adv_loss(f_prev_real: PatchFeatureGrid, f_curr_fake: PatchFeatureGrid) -> torch.Tensor:
    """Negative mean patch cosine between previous real features and current fake features."""
    return -patch_cosine_grid(f_prev_real, f_curr_fake).mean()


def focal_modulator(
    f_prev_real: PatchFeatureGrid,
    f_curr_fake: PatchFeatureGrid,
    upsample_to: tuple[int, int],
) -> PixelMask:
    """Per-pixel quality score (1 - cosine)/2, patch-constant, in [0, 1].

    The (P, Q) patch grid is nearest-neighbor upsampled by the patch stride
    and cropped to the requested (H, W); the grid must cover it.
    """
    H, W = upsample_to
    p = f_prev_real.patch_size
    cos = patch_cosine_grid(f_prev_real, f_curr_fake)
    s = (1.0 - cos) / 2.0
    P, Q = s.shape
    if P * p < H or Q * p < W:
        raise ContractViolation(
            f"patch grid {P}x{Q} with stride {p} cannot cover {H}x{W}"
        )
    up = s.repeat_interleave(p, dim=0).repeat_interleave(p, dim=1)[:H, :W]
    return PixelMask(up, hard=False)


def focal_mse(
    pred: Frame,
    target: Frame,
    s: PixelMask,
    gamma: float,
    detach_weights: bool = True,
) -> torch.Tensor:
    """Mean over pixels of s^gamma times the channel-mean squared error.

    gamma = 0 reduces to plain MSE. The weighting is detached by default so
    it modulates but never becomes an optimization target itself.
    """
    if gamma < 0:
        raise ContractViolation("gamma must be >= 0")
    if pred.pixels.shape != target.pixels.shape:
        raise ContractViolation("pred and target must share one shape")
    if s.spatial_shape != (pred.height, pred.width):
        raise ContractViolation("modulator shape must match the frames")
    w = s.values.detach() if detach_weights else s.values
    w = w.to(pred.pixels.dtype).pow(gamma).unsqueeze(-1)
    sq = (pred.pixels - target.pixels) ** 2
    return (w * sq).mean()
