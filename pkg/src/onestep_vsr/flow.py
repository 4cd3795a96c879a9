"""Optical flow estimation and warp-confidence masks.

The flow estimator is pluggable; the bundled fallback is an exhaustive
integer block-matching search that is deterministic and dependency-free.
Learned estimators can be dropped in behind the same interface.

Warp confidence is the shared exponential reliability measure
exp(-alpha * warp_error); thresholding it at mu yields the hard fusion
mask, and the same soft form weights the temporal-consistency loss.
"""

from __future__ import annotations

import hashlib
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import ContractViolation, Frame, FlowField, PixelMask

FLOW_CACHE_MAGIC = b"OFL1"


@dataclass(frozen=True)
class WarpConfidenceParams:
    """alpha scales the exponential warp-error penalty; mu is the fusion threshold."""

    alpha: float = 50.0
    mu: float = 0.4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractViolation("alpha must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ContractViolation("mu must lie in [0, 1]")


class FlowEstimator(ABC):
    """Estimates dense flow mapping dst-frame coordinates into the src frame."""

    name: str = "abstract"
    deterministic: bool = True

    @abstractmethod
    def estimate(self, src: Frame, dst: Frame, direction: str = "backward") -> FlowField:
        """Return flow such that warp(src, flow) aligns src content to dst."""


class BlockMatchingFlow(FlowEstimator):
    """Exhaustive integer block matching over a fixed search radius.

    For each block of the dst frame the displacement minimizing the mean
    absolute difference against the shifted src frame is taken; candidates
    are scanned in order of increasing |d|^2 so ties break toward zero
    displacement. Identical inputs give bit-identical flow fields.
    """

    def __init__(self, block_size: int = 8, radius: int = 4):
        if block_size < 1 or radius < 0:
            raise ContractViolation("block_size must be >= 1 and radius >= 0")
        self.block_size = block_size
        self.radius = radius
        self.name = f"block_match_b{block_size}_r{radius}"
        self.deterministic = True
        r = radius
        self._candidates = sorted(
            ((dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)),
            key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]),
        )

    def estimate(self, src: Frame, dst: Frame, direction: str = "backward") -> FlowField:
        if src.pixels.shape != dst.pixels.shape:
            raise ContractViolation("flow estimation requires same-shaped frames")
        H, W, _ = dst.pixels.shape
        bs = self.block_size
        s = src.pixels.to(torch.float32)
        d = dst.pixels.to(torch.float32)
        ys = torch.arange(H).view(H, 1).expand(H, W)
        xs = torch.arange(W).view(1, W).expand(H, W)

        best_cost = None
        best_dx = None
        best_dy = None
        for dx, dy in self._candidates:
            sy = (ys + dy).clamp(0, H - 1)
            sx = (xs + dx).clamp(0, W - 1)
            diff = (s[sy, sx] - d).abs().sum(dim=2)
            cost = F.avg_pool2d(
                diff.unsqueeze(0).unsqueeze(0),
                kernel_size=bs,
                stride=bs,
                ceil_mode=True,
                count_include_pad=False,
            )[0, 0]
            if best_cost is None:
                best_cost = cost
                best_dx = torch.full_like(cost, float(dx))
                best_dy = torch.full_like(cost, float(dy))
            else:
                better = cost < best_cost
                best_cost = torch.where(better, cost, best_cost)
                best_dx = torch.where(better, torch.full_like(cost, float(dx)), best_dx)
                best_dy = torch.where(better, torch.full_like(cost, float(dy)), best_dy)

        flow_block = torch.stack([best_dx, best_dy], dim=2)
        flow_full = flow_block.repeat_interleave(bs, dim=0).repeat_interleave(bs, dim=1)
        return FlowField(flow_full[:H, :W].contiguous(), direction)


class ZeroFlow(FlowEstimator):
    """Always-zero displacement; useful as a static-scene baseline."""

    name = "zero"
    deterministic = True

    def estimate(self, src: Frame, dst: Frame, direction: str = "backward") -> FlowField:
        if src.pixels.shape != dst.pixels.shape:
            raise ContractViolation("flow estimation requires same-shaped frames")
        H, W, _ = dst.pixels.shape
        return FlowField(torch.zeros(H, W, 2), direction)


def estimate_flow(src: Frame, dst: Frame, estimator: FlowEstimator | None = None,
                  direction: str = "backward") -> FlowField:
    """Estimate dense flow mapping dst coordinates into src (block matching by default)."""
    if estimator is None:
        estimator = BlockMatchingFlow()
    return estimator.estimate(src, dst, direction)


# ---------------------------------------------------------------------------
# Warp confidence
# ---------------------------------------------------------------------------


def warp_confidence(current: Frame, warped_neighbors: list[Frame],
                    params: WarpConfidenceParams) -> PixelMask:
    """Soft per-pixel alignment confidence exp(-alpha * sum of L1 warp errors).

    The L1 error is summed over channels and over the provided warped
    neighbors; boundary frames simply contribute fewer terms. Values are
    in (0, 1] and equal 1 exactly where every neighbor matches.
    """
    if not warped_neighbors:
        raise ContractViolation("warp_confidence needs at least one warped neighbor")
    cur = current.pixels
    err = torch.zeros(cur.shape[0], cur.shape[1], dtype=cur.dtype)
    for nb in warped_neighbors:
        if nb.pixels.shape != cur.shape:
            raise ContractViolation("warped neighbors must match the current frame shape")
        err = err + (nb.pixels - cur).abs().sum(dim=2)
    return PixelMask(torch.exp(-params.alpha * err), hard=False)


def binarize_confidence(soft: PixelMask, mu: float) -> PixelMask:
    """Hard mask: 1 where confidence is strictly greater than mu, else 0."""
    if soft.hard:
        raise ContractViolation("binarize_confidence expects a soft mask")
    v = soft.values
    return PixelMask((v > mu).to(v.dtype), hard=True)


# ---------------------------------------------------------------------------
# Flow caching
#
# Disk format: b"OFL1" magic, then H and W as little-endian uint32, then the
# dx plane and the dy plane as little-endian float32, row-major.
# ---------------------------------------------------------------------------


def write_flow_file(flow: FlowField, path: str | Path) -> None:
    H, W = flow.spatial_shape
    v = flow.vectors.detach().to(torch.float32).numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FLOW_CACHE_MAGIC)
        fh.write(struct.pack("<II", H, W))
        fh.write(np.ascontiguousarray(v[:, :, 0], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(v[:, :, 1], dtype="<f4").tobytes())


def read_flow_file(path: str | Path, direction: str = "backward") -> FlowField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLOW_CACHE_MAGIC:
            raise IOError(f"bad flow file magic {magic!r} in {path}")
        H, W = struct.unpack("<II", fh.read(8))
        plane = H * W * 4
        dx = np.frombuffer(fh.read(plane), dtype="<f4").reshape(H, W)
        dy = np.frombuffer(fh.read(plane), dtype="<f4").reshape(H, W)
    vec = torch.from_numpy(np.stack([dx, dy], axis=2).astype(np.float32))
    return FlowField(vec, direction)


def _frame_digest(frame: Frame) -> str:
    arr = frame.pixels.detach().to(torch.float32).numpy()
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


class CachedFlow(FlowEstimator):
    """Memoizes another estimator, keyed by frame-pair content hashes.

    Results always live in an in-process dict; when a cache directory is
    given they are also persisted in the raw-plane flow file format.
    """

    def __init__(self, base: FlowEstimator, cache_dir: str | Path | None = None):
        self.base = base
        self.name = f"cached({base.name})"
        self.deterministic = base.deterministic
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._memory: dict[tuple[str, str], FlowField] = {}

    def _key(self, src: Frame, dst: Frame) -> tuple[str, str]:
        return (_frame_digest(src), _frame_digest(dst))

    def estimate(self, src: Frame, dst: Frame, direction: str = "backward") -> FlowField:
        key = self._key(src, dst)
        hit = self._memory.get(key)
        if hit is not None:
            return FlowField(hit.vectors, direction)
        if self.cache_dir is not None:
            path = self.cache_dir / f"{self.base.name}_{key[0][:16]}_{key[1][:16]}.flow"
            if path.exists():
                flow = read_flow_file(path, direction)
                self._memory[key] = flow
                return flow
        flow = self.base.estimate(src, dst, direction)
        self._memory[key] = flow
        if self.cache_dir is not None:
            write_flow_file(flow, path)
        return flow
