"""Multi-frame latent fusion.

Neighboring frames are warped to the current frame in pixel space, all
three frames are encoded, and per spatial site a tiny attention over the
three temporal slots blends them. There is deliberately no value
projection: the head-averaged attention weights are applied to the raw
latents so the fused feature stays in the autoencoder's latent space.
A hard warp-confidence mask gates fusion to well-aligned regions; where
the mask is 0 the current frame's latent passes through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .core import ContractViolation, Frame, LatentGrid, PixelMask, VideoClip, resample_mask, warp
from .flow import FlowEstimator, WarpConfidenceParams, binarize_confidence, warp_confidence


@dataclass(frozen=True)
class FusionInput:
    """The three aligned latents plus the latent-resolution hard gate mask."""

    z_prev_warped: LatentGrid
    z_curr: LatentGrid
    z_next_warped: LatentGrid
    hard_mask_latent: PixelMask

    def __post_init__(self):
        shape = self.z_curr.values.shape
        if self.z_prev_warped.values.shape != shape or self.z_next_warped.values.shape != shape:
            raise ContractViolation("the three latents must share one shape")
        if self.hard_mask_latent.spatial_shape != (shape[0], shape[1]):
            raise ContractViolation("mask spatial shape must match the latents")
        if not self.hard_mask_latent.hard:
            raise ContractViolation("fusion mask must be hard")


class LatentFusion(nn.Module):
    """Per-site multi-head attention over the 3 temporal slots (learned Q/K only).

    Projections are shared across the slots. Attention is head-averaged and
    applied to the unprojected latents; the three attended slots are then
    averaged and blended with the current latent through the hard mask.
    """

    def __init__(self, latent_dim: int, num_heads: int = 2, key_dim: int = 8,
                 init_std: float = 0.02):
        super().__init__()
        if num_heads < 1 or key_dim < 1:
            raise ContractViolation("num_heads and key_dim must be >= 1")
        self.latent_dim = latent_dim
        self.num_heads = num_heads
        self.key_dim = key_dim
        self.w_q = nn.Parameter(torch.randn(num_heads, key_dim, latent_dim) * init_std)
        self.w_k = nn.Parameter(torch.randn(num_heads, key_dim, latent_dim) * init_std)

    def attention(self, tokens: torch.Tensor) -> torch.Tensor:
        """Head-averaged row-stochastic 3x3 attention per site; tokens is (h, w, 3, d)."""
        wq = self.w_q.to(tokens.dtype)
        wk = self.w_k.to(tokens.dtype)
        q = torch.einsum("mkd,hwtd->mhwtk", wq, tokens)
        k = torch.einsum("mkd,hwtd->mhwtk", wk, tokens)
        logits = torch.einsum("mhwtk,mhwsk->mhwts", q, k) / math.sqrt(self.key_dim)
        return torch.softmax(logits, dim=-1).mean(dim=0)

    def forward(self, inp: FusionInput) -> LatentGrid:
        for z in (inp.z_prev_warped, inp.z_curr, inp.z_next_warped):
            if not torch.isfinite(z.values).all():
                raise ContractViolation("fusion input latent contains non-finite values")
        tokens = torch.stack(
            [inp.z_prev_warped.values, inp.z_curr.values, inp.z_next_warped.values], dim=2
        )
        attn = self.attention(tokens)  # (h, w, 3, 3)
        attended = torch.einsum("hwts,hwsd->hwtd", attn, tokens)
        fused = attended.mean(dim=2)
        gate = inp.hard_mask_latent.values.unsqueeze(-1) > 0.5
        out = torch.where(gate, fused, inp.z_curr.values)
        return LatentGrid(out, inp.z_curr.source_frame_index)


def attention_fuse(inp: FusionInput, params: LatentFusion) -> LatentGrid:
    """Functional alias for LatentFusion.forward."""
    return params(inp)


def build_fusion_input(
    clip: VideoClip,
    i: int,
    encoder: Callable[[Frame], LatentGrid],
    flow: FlowEstimator,
    conf: WarpConfidenceParams,
    vae_factor: int,
) -> FusionInput:
    """Warp the neighbors of frame i, encode, and build the latent gate mask.

    Warping happens in pixel space before encoding. A missing neighbor at a
    clip boundary is replaced by the current frame for the latent slot but
    dropped from the confidence sum. The hard pixel mask is downsampled by
    the autoencoder's spatial factor to latent resolution.
    """
    if not 0 <= i < len(clip):
        raise ContractViolation(f"frame index {i} outside clip of length {len(clip)}")
    cur = clip[i]

    warped = {}
    conf_neighbors = []
    for offset, direction in ((-1, "backward"), (+1, "forward")):
        j = i + offset
        if 0 <= j < len(clip):
            fl = flow.estimate(clip[j], cur, direction=direction)
            w = warp(clip[j], fl)
            warped[offset] = w
            conf_neighbors.append(w)
        else:
            warped[offset] = cur

    if conf_neighbors:
        soft = warp_confidence(cur, conf_neighbors, conf)
    else:
        soft = PixelMask(torch.ones(cur.height, cur.width, dtype=cur.pixels.dtype))
    hard = binarize_confidence(soft, conf.mu)
    hard_latent = resample_mask(hard, vae_factor, "down")

    return FusionInput(
        z_prev_warped=encoder(warped[-1]),
        z_curr=encoder(cur),
        z_next_warped=encoder(warped[+1]),
        hard_mask_latent=hard_latent,
    )
