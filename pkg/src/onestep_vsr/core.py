"""Foundational value types and geometric primitives.

Frames, clips, latent grids, flow fields and masks are thin immutable
wrappers around CPU torch tensors; every operation here is a pure function
of its inputs. Pixel values live in [0, 1]. Image tensors are (H, W, C),
flow fields are (H, W, 2) with channel 0 = dx (columns) and channel 1 = dy
(rows), latents are (h, w, d).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0

FRAME_FILE_PATTERN = "frame_{:06d}.png"
_FRAME_FILE_RE = re.compile(r"frame_(\d+)\.(png|PNG)$")


class ContractViolation(ValueError):
    """An operation or constructor received inputs that break its contract."""


@dataclass(frozen=True)
class Frame:
    """One image of a video: (H, W, C) float tensor, values in [0, 1], C in {1, 3}."""

    pixels: torch.Tensor
    frame_index: int = 0

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, torch.Tensor) or p.ndim != 3 or p.shape[2] not in (1, 3):
            raise ContractViolation(
                f"frame pixels must be an (H, W, C) tensor with C in {{1, 3}}, got "
                f"{getattr(p, 'shape', type(p))}"
            )
        if self.frame_index < 0:
            raise ContractViolation("frame_index must be >= 0")
        pd = p.detach()
        if not torch.isfinite(pd).all():
            raise ContractViolation("frame contains non-finite pixel values")
        if float(pd.min()) < 0.0 or float(pd.max()) > 1.0:
            raise ContractViolation("frame pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class VideoClip:
    """An ordered sequence of same-shaped frames with consecutive indices."""

    frames: tuple[Frame, ...]
    scale_tag: str = "hr"  # "hr" | "lr"

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ContractViolation("a clip needs at least one frame")
        if self.scale_tag not in ("hr", "lr"):
            raise ContractViolation(f"scale_tag must be 'hr' or 'lr', got {self.scale_tag!r}")
        first = self.frames[0]
        for k, f in enumerate(self.frames):
            if f.pixels.shape != first.pixels.shape:
                raise ContractViolation("all frames in a clip must share H, W, C")
            if f.frame_index != first.frame_index + k:
                raise ContractViolation("clip frame indices must be consecutive")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def channels(self) -> int:
        return self.frames[0].channels


@dataclass(frozen=True)
class LatentGrid:
    """A per-frame feature grid in autoencoder latent space: (h, w, d)."""

    values: torch.Tensor
    source_frame_index: int = 0

    def __post_init__(self):
        v = self.values
        if not isinstance(v, torch.Tensor) or v.ndim != 3:
            raise ContractViolation("latent values must be an (h, w, d) tensor")
        if not torch.isfinite(v).all():
            raise ContractViolation("latent contains non-finite values")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class FlowField:
    """Dense per-pixel displacement: (H, W, 2) with (dx, dy) in pixels."""

    vectors: torch.Tensor
    direction: str = "backward"  # "backward" | "forward"

    def __post_init__(self):
        v = self.vectors
        if not isinstance(v, torch.Tensor) or v.ndim != 3 or v.shape[2] != 2:
            raise ContractViolation("flow vectors must be an (H, W, 2) tensor")
        if self.direction not in ("backward", "forward"):
            raise ContractViolation("flow direction must be 'backward' or 'forward'")
        if not torch.isfinite(v).all():
            raise ContractViolation("flow contains non-finite values")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.vectors.shape[0], self.vectors.shape[1]


@dataclass(frozen=True)
class PixelMask:
    """An (H, W) weighting grid. Hard masks are {0, 1}, soft masks lie in [0, 1]."""

    values: torch.Tensor
    hard: bool = False

    def __post_init__(self):
        v = self.values
        if not isinstance(v, torch.Tensor) or v.ndim != 2:
            raise ContractViolation("mask values must be an (H, W) tensor")
        vd = v.detach()
        if not torch.isfinite(vd).all():
            raise ContractViolation("mask contains non-finite values")
        if self.hard:
            if not bool(((vd == 0) | (vd == 1)).all()):
                raise ContractViolation("hard mask must contain only {0, 1}")
        elif float(vd.min()) < 0.0 or float(vd.max()) > 1.0:
            raise ContractViolation("soft mask values must lie in [0, 1]")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]


# ---------------------------------------------------------------------------
# Geometric primitives
# ---------------------------------------------------------------------------


def warp(frame: Frame, flow: FlowField) -> Frame:
    """Backward-warp a frame by a dense flow field.

    Output pixel (x, y) is the bilinear sample of the input at
    (x + dx, y + dy); sample coordinates are clamped to the image border.
    Linear in the pixel values for a fixed flow.
    """
    H, W, _ = frame.pixels.shape
    if flow.spatial_shape != (H, W):
        raise ContractViolation(
            f"flow shape {flow.spatial_shape} does not match frame shape {(H, W)}"
        )
    p = frame.pixels
    dtype = p.dtype if p.dtype.is_floating_point else torch.float32
    vec = flow.vectors.to(dtype)
    ys = torch.arange(H, dtype=dtype).view(H, 1).expand(H, W)
    xs = torch.arange(W, dtype=dtype).view(1, W).expand(H, W)
    sx = (xs + vec[..., 0]).clamp(0.0, float(W - 1))
    sy = (ys + vec[..., 1]).clamp(0.0, float(H - 1))
    x0 = sx.floor().long()
    y0 = sy.floor().long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    fx = (sx - x0.to(dtype)).unsqueeze(-1)
    fy = (sy - y0.to(dtype)).unsqueeze(-1)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    # guard against 1-ulp overshoot of the convex combination
    return Frame(out.clamp(0.0, 1.0), frame.frame_index)


def resample_mask(mask: PixelMask, factor: int, direction: str) -> PixelMask:
    """Change mask resolution by an integer factor.

    Up: nearest-neighbor replication. Down: area mean over factor x factor
    blocks, re-binarized at 0.5 (strictly-greater) when the input is hard.
    Non-divisible sizes are reflect-padded before downsampling.
    """
    if factor < 1:
        raise ContractViolation("resample factor must be >= 1")
    if direction not in ("up", "down"):
        raise ContractViolation("direction must be 'up' or 'down'")
    v = mask.values
    if factor == 1:
        return PixelMask(v.clone(), mask.hard)
    if direction == "up":
        out = v.repeat_interleave(factor, dim=0).repeat_interleave(factor, dim=1)
        return PixelMask(out, mask.hard)
    H, W = v.shape
    pad_h = (-H) % factor
    pad_w = (-W) % factor
    if pad_h or pad_w:
        if pad_h >= H or pad_w >= W:
            raise ContractViolation("mask too small to reflect-pad for this factor")
        v = F.pad(v.unsqueeze(0).unsqueeze(0), (0, pad_w, 0, pad_h), mode="reflect")[0, 0]
    Hp, Wp = v.shape
    out = v.reshape(Hp // factor, factor, Wp // factor, factor).mean(dim=(1, 3))
    if mask.hard:
        out = (out > 0.5).to(v.dtype)
    return PixelMask(out, mask.hard)


def psnr(a: Frame, b: Frame) -> float:
    """Peak signal-to-noise ratio in dB with MAX = 1.0, capped at 100 dB."""
    if a.pixels.shape != b.pixels.shape:
        raise ContractViolation("psnr requires frames of identical shape")
    diff = a.pixels.detach().double() - b.pixels.detach().double()
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


# ---------------------------------------------------------------------------
# Resolution-change helpers shared by the data pipeline and the model harness
# ---------------------------------------------------------------------------


def upsample_frame(frame: Frame, factor: int, mode: str = "bilinear") -> Frame:
    """Upscale a frame by an integer factor (bilinear or nearest)."""
    if factor < 1:
        raise ContractViolation("upsample factor must be >= 1")
    if factor == 1:
        return frame
    x = frame.pixels.permute(2, 0, 1).unsqueeze(0)
    if mode == "nearest":
        y = F.interpolate(x, scale_factor=factor, mode="nearest")
    else:
        y = F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
    return Frame(y[0].permute(1, 2, 0).clamp(0.0, 1.0), frame.frame_index)


def downsample_frame_area(frame: Frame, factor: int) -> Frame:
    """Area (block-mean) downsample by an integer factor; dims must divide."""
    if factor < 1:
        raise ContractViolation("downsample factor must be >= 1")
    H, W, _ = frame.pixels.shape
    if H % factor or W % factor:
        raise ContractViolation("frame dims must be divisible by the downsample factor")
    if factor == 1:
        return frame
    x = frame.pixels.permute(2, 0, 1).unsqueeze(0)
    y = F.avg_pool2d(x, kernel_size=factor, stride=factor)
    return Frame(y[0].permute(1, 2, 0), frame.frame_index)


def upsample_clip(clip: VideoClip, factor: int, mode: str = "bilinear") -> VideoClip:
    return VideoClip(tuple(upsample_frame(f, factor, mode) for f in clip.frames), clip.scale_tag)


# ---------------------------------------------------------------------------
# Frame directory I/O
#
# Clips are stored as directories of lossless PNGs named frame_000001.png,
# frame_000002.png, ... in display order. On disk, 8-bit values map to
# [0, 1] via /255 and 16-bit via /65535.
# ---------------------------------------------------------------------------


def save_frame(frame: Frame, path: str | Path, bit_depth: int = 8) -> None:
    """Write a frame as a lossless 8- or 16-bit PNG."""
    if bit_depth not in (8, 16):
        raise ContractViolation("bit_depth must be 8 or 16")
    arr = frame.pixels.detach().to(torch.float64).numpy()
    maxv = 255 if bit_depth == 8 else 65535
    q = np.clip(np.round(arr * maxv), 0, maxv)
    q = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    if q.shape[2] == 3:
        q = q[:, :, ::-1]  # cv2 writes BGR
    else:
        q = q[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), q):
        raise IOError(f"failed to write image {path}")


def load_frame(path: str | Path, frame_index: int = 0) -> Frame:
    """Read an 8- or 16-bit image file into a [0, 1] float32 frame."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        arr = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        arr = raw.astype(np.float32) / 65535.0
    else:
        raise ContractViolation(f"unsupported image dtype {raw.dtype} in {path}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    elif arr.shape[2] >= 3:
        arr = arr[:, :, 2::-1]  # BGR(A) -> RGB
    return Frame(torch.from_numpy(np.ascontiguousarray(arr)), frame_index)


def save_clip(clip: VideoClip, directory: str | Path, bit_depth: int = 8) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(clip.frames):
        save_frame(f, directory / FRAME_FILE_PATTERN.format(k + 1), bit_depth)


def load_clip(directory: str | Path, scale_tag: str = "hr") -> VideoClip:
    directory = Path(directory)
    files = sorted(
        (p for p in directory.iterdir() if _FRAME_FILE_RE.search(p.name)),
        key=lambda p: int(_FRAME_FILE_RE.search(p.name).group(1)),
    )
    if not files:
        raise IOError(f"no frame_*.png files in {directory}")
    frames = tuple(load_frame(p, k) for k, p in enumerate(files))
    return VideoClip(frames, scale_tag)
