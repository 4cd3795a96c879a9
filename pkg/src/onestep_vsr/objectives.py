"""Non-adversarial training objectives and the weighted total loss.

The warp loss penalizes the prediction's disagreement with the flow-warped
previous ground-truth frame, weighted per pixel by the exponential
alignment confidence of the ground truth itself; both the warp target and
the confidence are constants for the generator. The perceptual loss
compares unit-normalized deep features from a pluggable extractor; the
bundled toy extractor is a frozen random conv pyramid.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import ContractViolation, Frame, FlowField, warp


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN or infinite; training must abort with diagnostics."""

    def __init__(self, message: str, components: dict | None = None):
        super().__init__(message)
        self.components = components or {}


@dataclass(frozen=True)
class LossWeights:
    """Weights for the (gan, fmse, lpips, warp) total-loss combination."""

    w_gan: float = 1.0
    w_fmse: float = 1.0
    w_lpips: float = 2.0
    w_warp: float = 2.0

    def __post_init__(self):
        for name in ("w_gan", "w_fmse", "w_lpips", "w_warp"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")


def warp_loss(
    pred_curr: Frame,
    gt_prev: Frame,
    gt_curr: Frame,
    flow_hr: FlowField,
    alpha: float,
) -> torch.Tensor:
    """Confidence-weighted MSE between the prediction and the warped previous GT frame.

    Confidence is exp(-alpha * L1) of the ground-truth warp error (L1 summed
    over channels), so the penalty applies only where the flow alignment is
    trustworthy. Flow must come from the ground-truth frames; the warp
    target and the confidence carry no gradient.
    """
    shape = pred_curr.pixels.shape
    if gt_prev.pixels.shape != shape or gt_curr.pixels.shape != shape:
        raise ContractViolation("warp_loss frames must share one shape")
    warped = Frame(warp(gt_prev, flow_hr).pixels.detach(), gt_prev.frame_index)
    l1 = (gt_curr.pixels.detach() - warped.pixels).abs().sum(dim=2)
    conf = torch.exp(-alpha * l1).unsqueeze(-1)
    sq = (pred_curr.pixels - warped.pixels) ** 2
    return (conf * sq).mean()


class PerceptualFeatureExtractor(ABC):
    """Produces one or more feature maps per image; deterministic for fixed weights."""

    name: str = "abstract"

    @property
    @abstractmethod
    def num_layers(self) -> int: ...

    @abstractmethod
    def extract(self, frame: Frame) -> list[torch.Tensor]:
        """Feature maps as (C, H, W) tensors, coarse layers last."""


class ToyPerceptualNet(nn.Module, PerceptualFeatureExtractor):
    """Frozen random 3-layer conv pyramid standing in for a pretrained perceptual net."""

    def __init__(self, in_channels: int = 3, seed: int = 0):
        super().__init__()
        self.name = f"toy_perceptual_s{seed}"
        gen = torch.Generator().manual_seed(seed)
        widths = (8, 16, 32)
        convs = []
        c_in = in_channels
        for w in widths:
            conv = nn.Conv2d(c_in, w, kernel_size=3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.05)
            convs.append(conv)
            c_in = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def num_layers(self) -> int:
        return len(self.convs)

    def extract(self, frame: Frame) -> list[torch.Tensor]:
        x = frame.pixels.permute(2, 0, 1).unsqueeze(0).to(self.convs[0].weight.dtype)
        feats = []
        for k, conv in enumerate(self.convs):
            if k > 0:
                x = F.avg_pool2d(x, 2)
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x[0])
        return feats


def perceptual_loss(pred: Frame, target: Frame,
                    extractor: PerceptualFeatureExtractor) -> torch.Tensor:
    """Layer-averaged MSE between channel-unit-normalized feature maps."""
    if pred.pixels.shape != target.pixels.shape:
        raise ContractViolation("perceptual_loss frames must share one shape")
    total = None
    fp = extractor.extract(pred)
    ft = extractor.extract(target)
    for a, b in zip(fp, ft):
        na = a / (a.norm(dim=0, keepdim=True) + 1e-10)
        nb = b / (b.norm(dim=0, keepdim=True) + 1e-10)
        layer = ((na - nb) ** 2).mean()
        total = layer if total is None else total + layer
    return total / len(fp)


def total_loss(gan, fmse, lpips, warp_term, w: LossWeights) -> torch.Tensor:
    """Weighted sum of the four loss components; rejects non-finite inputs."""
    parts = {"gan": gan, "fmse": fmse, "lpips": lpips, "warp": warp_term}
    bad = {}
    for k, v in parts.items():
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            bad[k] = val
    if bad:
        raise NonFiniteLossError(f"non-finite loss components: {bad}", bad)
    return w.w_gan * gan + w.w_fmse * fmse + w.w_lpips * lpips + w.w_warp * warp_term
