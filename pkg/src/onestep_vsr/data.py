"""Clip ingestion, synthetic degradation, and procedural demo videos.

The degradation pipeline follows the blur -> resize -> noise (optionally
twice) -> exact-scale resize -> compression recipe used for real-world
super-resolution data synthesis. All degradation parameters are sampled
once per clip so every frame of a clip sees the same blur, scales and
quality (temporally consistent degradation); only the additive noise field
is redrawn per frame. Randomness derives from (seed, clip_key), so samples
are reproducible and order-independent.

Compression is modeled as 8x8 block-DCT quantization instead of an
external codec. The quantization table is the standard 8x8 luminance
table scaled by floor((table * scale + 50) / 100) clipped to [1, 255],
with scale = 5000/quality for quality < 50 and 200 - 2*quality otherwise,
applied identically to every channel (no chroma handling). quality >= 100
bypasses compression entirely (lossless).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import ContractViolation, Frame, VideoClip, FlowField, load_clip, warp

# Standard 8x8 luminance quantization table.
_BASE_QUANT = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n).reshape(n, 1)
    x = np.arange(n).reshape(1, n)
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0, :] = math.sqrt(1.0 / n)
    return m


_DCT8 = _dct_matrix(8)


@dataclass(frozen=True)
class DegradationConfig:
    """Ranges for the synthetic degradation pipeline (4x end-to-end)."""

    blur_kind: str = "gaussian"  # "gaussian" | "none"
    blur_sigma: tuple[float, float] = (0.2, 2.0)
    scale_range: tuple[float, float] = (0.3, 1.2)
    interps: tuple[str, ...] = ("area", "bilinear", "bicubic")
    noise_sigma: tuple[float, float] = (0.0, 0.06)
    quality: tuple[int, int] = (40, 95)
    second_pass: bool = True
    sr_scale: int = 4
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.blur_sigma, self.scale_range, self.noise_sigma, self.quality):
            if hi < lo:
                raise ContractViolation("degradation ranges must satisfy lo <= hi")
        if not self.interps:
            raise ContractViolation("interpolation set must be non-empty")
        if self.sr_scale < 1:
            raise ContractViolation("sr_scale must be >= 1")

    @classmethod
    def identity(cls, sr_scale: int = 4) -> "DegradationConfig":
        """Delta blur, no rescale, no noise, lossless: LR is the exact area downsample."""
        return cls(
            blur_kind="none",
            blur_sigma=(0.0, 0.0),
            scale_range=(1.0, 1.0),
            interps=("area",),
            noise_sigma=(0.0, 0.0),
            quality=(100, 100),
            second_pass=False,
            sr_scale=sr_scale,
        )


@dataclass(frozen=True)
class DegradationParams:
    """One clip's concrete degradation draw (identical across its frames)."""

    sigmas: tuple[float, ...]
    scales: tuple[float, ...]
    interps: tuple[str, ...]
    noise_sigmas: tuple[float, ...]
    quality: int


def sample_degradation_params(cfg: DegradationConfig, clip_key: int = 0) -> DegradationParams:
    rng = np.random.default_rng([cfg.seed, clip_key])
    passes = 2 if cfg.second_pass else 1
    sigmas, scales, interps, noises = [], [], [], []
    for _ in range(passes):
        sigmas.append(float(rng.uniform(*cfg.blur_sigma)))
        scales.append(float(rng.uniform(*cfg.scale_range)))
        interps.append(cfg.interps[int(rng.integers(len(cfg.interps)))])
        noises.append(float(rng.uniform(*cfg.noise_sigma)))
    quality = int(rng.integers(cfg.quality[0], cfg.quality[1] + 1))
    return DegradationParams(tuple(sigmas), tuple(scales), tuple(interps), tuple(noises), quality)


# -- primitive degradations -------------------------------------------------


def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (k / k.sum()).to(torch.float32)


def gaussian_blur(frame: Frame, sigma: float) -> Frame:
    """Separable gaussian blur with reflect padding; sigma <= 0 is the identity."""
    if sigma <= 0:
        return frame
    k = gaussian_kernel1d(sigma)
    r = (k.shape[0] - 1) // 2
    x = frame.pixels.permute(2, 0, 1).unsqueeze(0).to(torch.float32)
    c = x.shape[1]
    kh = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = F.pad(x, (r, r, 0, 0), mode="reflect")
    x = F.conv2d(x, kh, groups=c)
    x = F.pad(x, (0, 0, r, r), mode="reflect")
    x = F.conv2d(x, kv, groups=c)
    return Frame(x[0].permute(1, 2, 0).clamp(0.0, 1.0), frame.frame_index)


def resize(frame: Frame, size: tuple[int, int], interp: str) -> Frame:
    """Resize to (H, W) with area / bilinear / bicubic interpolation."""
    H, W = size
    if (H, W) == (frame.height, frame.width):
        return frame
    x = frame.pixels.permute(2, 0, 1).unsqueeze(0).to(torch.float32)
    if interp == "area":
        if H <= frame.height and W <= frame.width:
            y = F.interpolate(x, size=(H, W), mode="area")
        else:
            y = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=False)
    elif interp in ("bilinear", "bicubic"):
        y = F.interpolate(x, size=(H, W), mode=interp, align_corners=False)
    else:
        raise ContractViolation(f"unknown interpolation {interp!r}")
    return Frame(y[0].permute(1, 2, 0).clamp(0.0, 1.0), frame.frame_index)


def add_gaussian_noise(frame: Frame, sigma: float, rng: np.random.Generator) -> Frame:
    if sigma <= 0:
        return frame
    noise = rng.normal(0.0, sigma, size=tuple(frame.pixels.shape)).astype(np.float32)
    out = frame.pixels.to(torch.float32) + torch.from_numpy(noise)
    return Frame(out.clamp(0.0, 1.0), frame.frame_index)


def quantization_table(quality: int) -> np.ndarray:
    if not 1 <= quality <= 99:
        raise ContractViolation("quantization table defined for quality in [1, 99]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    q = np.floor((_BASE_QUANT * scale + 50.0) / 100.0)
    return np.clip(q, 1.0, 255.0)


def dct_compress(frame: Frame, quality: int) -> Frame:
    """Block-DCT quantization stand-in for codec compression; quality >= 100 is lossless."""
    if quality >= 100:
        return frame
    q = quantization_table(quality)
    arr = frame.pixels.detach().to(torch.float64).numpy() * 255.0 - 128.0
    H, W, C = arr.shape
    pad_h = (-H) % 8
    pad_w = (-W) % 8
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    Hp, Wp = arr.shape[:2]
    blocks = arr.reshape(Hp // 8, 8, Wp // 8, 8, C).transpose(0, 2, 4, 1, 3)
    coeffs = np.einsum("ij,bqcjk,lk->bqcil", _DCT8, blocks, _DCT8)
    coeffs = np.round(coeffs / q) * q
    recon = np.einsum("ji,bqcjk,kl->bqcil", _DCT8, coeffs, _DCT8)
    out = recon.transpose(0, 3, 1, 4, 2).reshape(Hp, Wp, C)[:H, :W]
    out = np.clip((out + 128.0) / 255.0, 0.0, 1.0).astype(np.float32)
    return Frame(torch.from_numpy(out), frame.frame_index)


# -- pipeline ---------------------------------------------------------------


def degrade_frame(frame: Frame, params: DegradationParams, cfg: DegradationConfig,
                  rng: np.random.Generator) -> Frame:
    H, W = frame.height, frame.width
    target = (H // cfg.sr_scale, W // cfg.sr_scale)
    out = frame
    for sigma, scale, interp, nsigma in zip(
        params.sigmas, params.scales, params.interps, params.noise_sigmas
    ):
        if cfg.blur_kind == "gaussian":
            out = gaussian_blur(out, sigma)
        if scale != 1.0:
            size = (max(target[0], round(out.height * scale)),
                    max(target[1], round(out.width * scale)))
            out = resize(out, size, interp)
        out = add_gaussian_noise(out, nsigma, rng)
    out = resize(out, target, "area")
    out = dct_compress(out, params.quality)
    return Frame(out.pixels, frame.frame_index)


def degrade_clip(hr: VideoClip, cfg: DegradationConfig, clip_key: int = 0) -> VideoClip:
    """Produce the LR counterpart of an HR clip (deterministic under cfg.seed)."""
    if hr.height % cfg.sr_scale or hr.width % cfg.sr_scale:
        raise ContractViolation("HR dims must be divisible by the SR scale")
    params = sample_degradation_params(cfg, clip_key)
    rng = np.random.default_rng([cfg.seed, clip_key, 1])
    frames = tuple(degrade_frame(f, params, cfg, rng) for f in hr.frames)
    return VideoClip(frames, "lr")


# -- procedural demo content -------------------------------------------------


def _demo_pattern(size: tuple[int, int], channels: int, rng: np.random.Generator) -> Frame:
    """Wrap-periodic sinusoid plaid + smooth blobs + fine seeded texture."""
    H, W = size
    ys = np.arange(H).reshape(H, 1)
    xs = np.arange(W).reshape(1, W)
    img = np.zeros((H, W, channels), dtype=np.float64)
    for c in range(channels):
        for _ in range(4):
            fx = float(rng.integers(1, 9))
            fy = float(rng.integers(1, 9))
            px = rng.uniform(0, 2 * np.pi)
            py = rng.uniform(0, 2 * np.pi)
            img[:, :, c] += np.sin(2 * np.pi * fx * xs / W + px) * np.sin(
                2 * np.pi * fy * ys / H + py
            )

    def _blurred_noise(sigma: float) -> np.ndarray:
        rough = rng.normal(0.0, 1.0, size=(H, W, channels))
        span = rough.max() - rough.min() + 1e-12
        base = Frame(torch.from_numpy(((rough - rough.min()) / span).astype(np.float32)))
        out = gaussian_blur(base, sigma).pixels.numpy().astype(np.float64)
        return out - out.mean()

    img += 5.0 * _blurred_noise(max(1.0, min(H, W) / 32.0))  # large-scale blobs
    img += 2.5 * _blurred_noise(0.8)  # fine local texture
    lo, hi = img.min(), img.max()
    img = 0.1 + 0.8 * (img - lo) / (hi - lo + 1e-12)
    return Frame(torch.from_numpy(img.astype(np.float32)))


def _rotation_flow(size: tuple[int, int], degrees: float) -> FlowField:
    H, W = size
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    theta = math.radians(degrees)
    ys = torch.arange(H, dtype=torch.float32).view(H, 1).expand(H, W) - cy
    xs = torch.arange(W, dtype=torch.float32).view(1, W).expand(H, W) - cx
    sx = math.cos(theta) * xs - math.sin(theta) * ys + cx
    sy = math.sin(theta) * xs + math.cos(theta) * ys + cy
    base_x = torch.arange(W, dtype=torch.float32).view(1, W).expand(H, W)
    base_y = torch.arange(H, dtype=torch.float32).view(H, 1).expand(H, W)
    return FlowField(torch.stack([sx - base_x, sy - base_y], dim=2))


def make_demo_clip(kind: str, frames: int, size: tuple[int, int], seed: int = 0,
                   shift: tuple[int, int] = (2, 0), channels: int = 3,
                   rotate_degrees: float = 2.0) -> VideoClip:
    """Deterministic moving-texture HR clip with known ground-truth motion.

    kind "static": identical frames. kind "shift": the pattern translates by
    `shift` = (dx, dy) pixels per frame with wraparound. kind "rotate": the
    pattern rotates about the center by `rotate_degrees` per frame.
    """
    if size[0] < 16 or size[1] < 16:
        raise ContractViolation("demo clips must be at least 16x16")
    if frames < 1:
        raise ContractViolation("demo clips need at least one frame")
    if kind not in ("static", "shift", "rotate"):
        raise ContractViolation(f"unknown demo kind {kind!r}")
    rng = np.random.default_rng(seed)
    base = _demo_pattern(size, channels, rng)
    out = []
    for k in range(frames):
        if kind == "static" or k == 0:
            f = Frame(base.pixels.clone(), k)
        elif kind == "shift":
            arr = np.roll(base.pixels.numpy(), (k * shift[1], k * shift[0]), axis=(0, 1))
            f = Frame(torch.from_numpy(arr.copy()), k)
        else:
            flow = _rotation_flow(size, -rotate_degrees * k)
            f = Frame(warp(base, flow).pixels, k)
        out.append(f)
    return VideoClip(tuple(out), "hr")


def make_demo_dataset(n_clips: int, frames: int, size: tuple[int, int],
                      deg: DegradationConfig, seed: int = 0) -> list[tuple[VideoClip, VideoClip]]:
    """A list of (HR, LR) demo pairs: shifting textures with varied motion."""
    shifts = [(2, 0), (-2, 0), (0, 2), (0, -2), (1, 1), (-1, 1), (2, 1), (-1, -2)]
    pairs = []
    for k in range(n_clips):
        hr = make_demo_clip("shift", frames, size, seed=seed * 1000 + k,
                            shift=shifts[k % len(shifts)])
        lr = degrade_clip(hr, deg, clip_key=k)
        pairs.append((hr, lr))
    return pairs


# -- disk-backed dataset -----------------------------------------------------


@dataclass
class ClipDataset:
    """Fixed-length (HR, LR) windows cut from clip directories under a root.

    Layout: root/<clip_name>/frame_000001.png ... Every sample is a random
    crop (seeded by (seed, sample index)) of `clip_len` consecutive frames;
    the LR side is synthesized with the degradation config.
    """

    root: Path
    clip_len: int = 3
    crop: int = 64
    stride: int = 3
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    seed: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        if self.crop % self.degradation.sr_scale:
            raise ContractViolation("crop size must be divisible by the SR scale")
        self._index: list[tuple[Path, int]] = []
        for clip_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            n = len(list(clip_dir.glob("frame_*.png")))
            for start in range(0, max(n - self.clip_len + 1, 0), self.stride):
                self._index.append((clip_dir, start))
        if not self._index:
            raise ContractViolation(f"no usable clips under {self.root}")

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, i: int) -> tuple[VideoClip, VideoClip]:
        clip_dir, start = self._index[i]
        full = load_clip(clip_dir, "hr")
        frames = full.frames[start: start + self.clip_len]
        rng = np.random.default_rng([self.seed, i])
        H, W = frames[0].height, frames[0].width
        if H < self.crop or W < self.crop:
            raise ContractViolation(f"clip {clip_dir} smaller than crop {self.crop}")
        y0 = int(rng.integers(0, H - self.crop + 1))
        x0 = int(rng.integers(0, W - self.crop + 1))
        cropped = tuple(
            Frame(f.pixels[y0: y0 + self.crop, x0: x0 + self.crop].clone(), k)
            for k, f in enumerate(frames)
        )
        hr = VideoClip(cropped, "hr")
        lr = degrade_clip(hr, self.degradation, clip_key=i)
        return hr, lr

    def materialize(self) -> list[tuple[VideoClip, VideoClip]]:
        return [self[i] for i in range(len(self))]
