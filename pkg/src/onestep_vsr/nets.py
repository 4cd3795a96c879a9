"""Toy-scale substitute networks behind stable interfaces.

Each network stands in for a large pretrained counterpart: a small conv
autoencoder for the latent-space VAE, a 3-level UNet with a bottleneck
self-attention for the noise predictor, and a strided-conv patch embedder
for the feature discriminator. The VAE encoder and the UNet carry low-rank
adapters on their 1x1 convolutions and attention projections; base weights
stay frozen during super-resolution training and the VAE decoder is frozen
throughout. Adapters are zero-initialized on the up-projection so a fresh
adapter contributes exactly nothing.

Checkpoints are zip archives holding a manifest.json (schema version, run
config snapshot, per-component sha256 hashes, array index) plus one raw
little-endian float32 file per parameter under params/.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ContractViolation, Frame, LatentGrid
from .adversarial import PatchFeatureGrid

CHECKPOINT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Low-rank adapters
# ---------------------------------------------------------------------------


class LoraLinear(nn.Module):
    """Frozen linear layer plus a trainable rank-r delta B @ A (B zero-init)."""

    def __init__(self, in_features: int, out_features: int, rank: int, bias: bool = True):
        super().__init__()
        if rank < 1:
            raise ContractViolation("adapter rank must be >= 1")
        self.rank = rank
        self.base = nn.Linear(in_features, out_features, bias=bias)
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.randn(rank, in_features) / in_features**0.5)
        self.lora_b = nn.Parameter(torch.zeros(out_features, rank))

    def delta_weight(self) -> torch.Tensor:
        return self.lora_b @ self.lora_a

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b)


class LoraConv1x1(nn.Module):
    """Frozen 1x1 conv plus a trainable rank-r channel-mixing delta."""

    def __init__(self, in_channels: int, out_channels: int, rank: int,
                 bias: bool = True, zero_base: bool = False):
        super().__init__()
        if rank < 1:
            raise ContractViolation("adapter rank must be >= 1")
        self.rank = rank
        self.base = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=bias)
        if zero_base:
            with torch.no_grad():
                self.base.weight.zero_()
                if bias:
                    self.base.bias.zero_()
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.randn(rank, in_channels) / in_channels**0.5)
        self.lora_b = nn.Parameter(torch.zeros(out_channels, rank))

    def delta_weight(self) -> torch.Tensor:
        return self.lora_b @ self.lora_a

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        down = F.conv2d(x, self.lora_a.unsqueeze(-1).unsqueeze(-1))
        return y + F.conv2d(down, self.lora_b.unsqueeze(-1).unsqueeze(-1))


def _is_adapter_name(name: str) -> bool:
    return "lora_a" in name or "lora_b" in name


def adapter_parameters(module: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in module.named_parameters() if _is_adapter_name(n)]


def base_parameters(module: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in module.named_parameters() if not _is_adapter_name(n)]


# ---------------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------------


class ToyVAE(nn.Module):
    """Two-level conv autoencoder with a fixed spatial factor of 4.

    The encoder's 1x1 layers carry low-rank adapters; everything else is a
    frozen base once `freeze_for_training` has been called (construction
    already freezes). The decoder ends in a sigmoid so outputs land in
    [0, 1]; encode is deterministic (mean only, no sampling).
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 16,
                 latent_channels: int = 4, lora_rank: int = 8):
        super().__init__()
        self.spatial_factor = 4
        self.latent_channels = latent_channels
        self.in_channels = in_channels
        bc = base_channels
        self.enc_conv1 = nn.Conv2d(in_channels, bc, 3, stride=2, padding=1)
        self.enc_mix1 = LoraConv1x1(bc, bc, lora_rank)
        self.enc_conv2 = nn.Conv2d(bc, 2 * bc, 3, stride=2, padding=1)
        self.enc_conv3 = nn.Conv2d(2 * bc, 2 * bc, 3, padding=1)
        self.enc_head = LoraConv1x1(2 * bc, latent_channels, lora_rank)

        self.dec_conv1 = nn.Conv2d(latent_channels, 2 * bc, 3, padding=1)
        self.dec_conv2 = nn.Conv2d(2 * bc, bc, 3, padding=1)
        self.dec_conv3 = nn.Conv2d(bc, in_channels, 3, padding=1)
        self.freeze_for_training()

    # -- parameter groups ---------------------------------------------------

    def encoder_modules(self) -> list[nn.Module]:
        return [self.enc_conv1, self.enc_mix1, self.enc_conv2, self.enc_conv3, self.enc_head]

    def decoder_modules(self) -> list[nn.Module]:
        return [self.dec_conv1, self.dec_conv2, self.dec_conv3]

    def encoder_adapter_parameters(self) -> list[nn.Parameter]:
        out = []
        for m in self.encoder_modules():
            out.extend(adapter_parameters(m))
        return out

    def encoder_base_parameters(self) -> list[nn.Parameter]:
        out = []
        for m in self.encoder_modules():
            out.extend(base_parameters(m))
        return out

    def decoder_parameters(self) -> list[nn.Parameter]:
        out = []
        for m in self.decoder_modules():
            out.extend(m.parameters())
        return out

    def freeze_for_training(self) -> None:
        """Only encoder adapters remain trainable; decoder and bases freeze."""
        for p in self.parameters():
            p.requires_grad_(False)
        for p in self.encoder_adapter_parameters():
            p.requires_grad_(True)

    def unfreeze_for_pretraining(self) -> None:
        """Train encoder + decoder base weights; adapters stay out of pretraining."""
        for p in self.parameters():
            p.requires_grad_(True)
        for p in self.encoder_adapter_parameters():
            p.requires_grad_(False)

    # -- forward ------------------------------------------------------------

    def _encode_nchw(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.enc_conv1(x))
        h = self.enc_mix1(h)
        h = F.silu(self.enc_conv2(h))
        h = F.silu(self.enc_conv3(h))
        return self.enc_head(h)

    def _decode_nchw(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.dec_conv1(z))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.dec_conv2(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.dec_conv3(h))

    def encode(self, frame: Frame) -> LatentGrid:
        s = self.spatial_factor
        x = frame.pixels.permute(2, 0, 1).unsqueeze(0).to(self.enc_conv1.weight.dtype)
        pad_h = (-x.shape[2]) % s
        pad_w = (-x.shape[3]) % s
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        z = self._encode_nchw(x)
        return LatentGrid(z[0].permute(1, 2, 0), frame.frame_index)

    def decode(self, z: LatentGrid) -> Frame:
        if z.channels != self.latent_channels:
            raise ContractViolation(
                f"latent has {z.channels} channels, decoder expects {self.latent_channels}"
            )
        x = z.values.permute(2, 0, 1).unsqueeze(0).to(self.dec_conv1.weight.dtype)
        y = self._decode_nchw(x).clamp(0.0, 1.0)
        return Frame(y[0].permute(1, 2, 0), z.source_frame_index)


def pretrain_autoencoder(vae: ToyVAE, frames: list[Frame], steps: int = 300,
                         lr: float = 2e-3, log_every: int = 0) -> float:
    """Fit the VAE base weights by plain reconstruction MSE; returns the final loss.

    Stands in for loading pretrained autoencoder weights. Adapters are kept
    out of the fit and the usual freeze (adapters-only trainable) is
    restored afterwards.
    """
    if not frames:
        raise ContractViolation("pretraining needs at least one frame")
    vae.unfreeze_for_pretraining()
    batch = torch.stack([f.pixels.permute(2, 0, 1) for f in frames]).to(torch.float32)
    opt = torch.optim.Adam([p for p in vae.parameters() if p.requires_grad], lr=lr)
    loss_val = float("nan")
    for step in range(steps):
        opt.zero_grad()
        recon = vae._decode_nchw(vae._encode_nchw(batch))
        loss = F.mse_loss(recon, batch)
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
        if log_every and (step + 1) % log_every == 0:
            print(f"vae pretrain step {step + 1}: mse {loss_val:.6f}")
    vae.freeze_for_training()
    return loss_val


# ---------------------------------------------------------------------------
# Noise-prediction UNet
# ---------------------------------------------------------------------------


def _timestep_embedding(t: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-torch.arange(half, dtype=dtype) * (torch.log(torch.tensor(10000.0)) / max(half - 1, 1)))
    args = t * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class ToyUNet(nn.Module):
    """3-level noise-prediction UNet; one self-attention block at the bottleneck.

    Base weights are frozen at construction; only the low-rank adapters on
    the per-level 1x1 mixing convs, the attention projections and the output
    head train. The output head's base is zero so a fresh network predicts
    zero noise. `invocations` counts forward evaluations.
    """

    def __init__(self, latent_channels: int = 4, widths: tuple[int, int, int] = (16, 24, 32),
                 lora_rank: int = 8, cond_dim: int = 8, time_dim: int = 16):
        super().__init__()
        w0, w1, w2 = widths
        d = latent_channels
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.invocations = 0

        self.enc0 = nn.Conv2d(d, w0, 3, padding=1)
        self.mix0 = LoraConv1x1(w0, w0, lora_rank)
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.mix1 = LoraConv1x1(w1, w1, lora_rank)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mix2 = LoraConv1x1(w2, w2, lora_rank)

        self.emb_proj = nn.Linear(time_dim + cond_dim, w2)
        self.attn_q = LoraLinear(w2, w2, lora_rank)
        self.attn_k = LoraLinear(w2, w2, lora_rank)
        self.attn_v = LoraLinear(w2, w2, lora_rank)
        self.attn_out = LoraLinear(w2, w2, lora_rank)

        self.up1 = nn.Conv2d(w2 + w1, w1, 3, padding=1)
        self.mix_up1 = LoraConv1x1(w1, w1, lora_rank)
        self.up0 = nn.Conv2d(w1 + w0, w0, 3, padding=1)
        self.mix_up0 = LoraConv1x1(w0, w0, lora_rank)
        self.out_smooth = nn.Conv2d(w0, w0, 3, padding=1)
        self.out_head = LoraConv1x1(w0, latent_channels, lora_rank, zero_base=True)

        for p in base_parameters(self):
            p.requires_grad_(False)

    def adapter_parameters(self) -> list[nn.Parameter]:
        return adapter_parameters(self)

    def base_parameters(self) -> list[nn.Parameter]:
        return base_parameters(self)

    def forward(self, z: torch.Tensor, t: int, c: torch.Tensor | None = None) -> torch.Tensor:
        """z: (1, d, h, w) latent state; t: step index; c: optional conditioning vector."""
        self.invocations += 1
        dtype = self.enc0.weight.dtype
        if c is None:
            c = torch.zeros(self.cond_dim, dtype=dtype)
        emb_in = torch.cat([_timestep_embedding(t, self.time_dim, dtype), c.to(dtype)])
        emb = self.emb_proj(emb_in)

        h0 = F.silu(self.mix0(F.silu(self.enc0(z))))
        h1 = F.silu(self.mix1(F.silu(self.down1(h0))))
        h2 = F.silu(self.mix2(F.silu(self.down2(h1))))

        h2 = h2 + emb.view(1, -1, 1, 1)
        n, ch, hh, ww = h2.shape
        tokens = h2.flatten(2).transpose(1, 2)  # (1, hw, ch)
        q = self.attn_q(tokens)
        k = self.attn_k(tokens)
        v = self.attn_v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) / (ch ** 0.5), dim=-1)
        tokens = tokens + self.attn_out(attn @ v)
        h2 = tokens.transpose(1, 2).reshape(n, ch, hh, ww)

        u1 = F.interpolate(h2, scale_factor=2, mode="nearest")
        u1 = F.silu(self.mix_up1(F.silu(self.up1(torch.cat([u1, h1], dim=1)))))
        u0 = F.interpolate(u1, scale_factor=2, mode="nearest")
        u0 = F.silu(self.mix_up0(F.silu(self.up0(torch.cat([u0, h0], dim=1)))))
        return self.out_head(F.silu(self.out_smooth(u0)))

    def predict_noise(self, z: LatentGrid, t: int, c: torch.Tensor | None = None) -> LatentGrid:
        x = z.values.permute(2, 0, 1).unsqueeze(0).to(self.enc0.weight.dtype)
        eps = self.forward(x, t, c)
        return LatentGrid(eps[0].permute(1, 2, 0), z.source_frame_index)


# ---------------------------------------------------------------------------
# Patch discriminator
# ---------------------------------------------------------------------------


class PatchDiscriminator(nn.Module):
    """Fully-convolutional patch embedder with total stride = patch_size.

    Three conv layers (the first log2(patch_size) of them strided) followed
    by a 1x1 projection to the feature dimension; every parameter trains.
    """

    def __init__(self, in_channels: int = 3, patch_size: int = 4, feature_dim: int = 16,
                 width: int = 32):
        super().__init__()
        if patch_size < 2 or patch_size & (patch_size - 1):
            raise ContractViolation("patch_size must be a power of two >= 2")
        n_strided = patch_size.bit_length() - 1
        if n_strided > 3:
            raise ContractViolation("patch_size up to 8 supported by the toy discriminator")
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        layers = []
        c_in = in_channels
        for k in range(3):
            stride = 2 if k < n_strided else 1
            c_out = width if k > 0 else width // 2
            # bias-free convs + per-site channel normalization: a shared
            # content-independent feature component would push all patch
            # cosines toward 1 and stall the contrastive signal. Normalizing
            # across channels at each site removes it while staying exactly
            # shift-equivariant.
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False))
            c_in = c_out
        self.convs = nn.ModuleList(layers)
        self.head = nn.Conv2d(c_in, feature_dim, 1, bias=False)

    @staticmethod
    def _channel_norm(x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        sigma = x.std(dim=1, keepdim=True, unbiased=False)
        return (x - mu) / (sigma + 1e-6)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.leaky_relu(self._channel_norm(conv(x)), 0.2)
        return self.head(x)

    def extract(self, frame: Frame) -> PatchFeatureGrid:
        if frame.height <= self.patch_size and frame.width <= self.patch_size:
            raise ContractViolation("frame must be larger than one patch")
        x = frame.pixels.permute(2, 0, 1).unsqueeze(0).to(self.head.weight.dtype)
        f = self.forward(x)
        return PatchFeatureGrid(f[0].permute(1, 2, 0), self.patch_size)


# ---------------------------------------------------------------------------
# Parameter hashing and checkpointing
# ---------------------------------------------------------------------------


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().to(torch.float32).numpy(), dtype="<f4").tobytes()


def hash_parameters(params) -> str:
    """sha256 over little-endian float32 bytes; accepts a module or an iterable."""
    if isinstance(params, nn.Module):
        items = sorted(params.named_parameters(), key=lambda kv: kv[0])
        tensors = [p for _, p in items]
    else:
        tensors = list(params)
    h = hashlib.sha256()
    for t in tensors:
        h.update(_tensor_bytes(t))
    return h.hexdigest()


def _write_zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    # fixed timestamp so identical contents give byte-identical archives
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module],
                    config: dict, extra: dict | None = None) -> None:
    """Write a schema-versioned zip of named float32 parameter arrays."""
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": config,
        "hashes": {name: hash_parameters(mod) for name, mod in modules.items()},
        "params": {},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for comp, mod in sorted(modules.items()):
            for pname, p in sorted(mod.named_parameters(), key=lambda kv: kv[0]):
                full = f"{comp}.{pname}"
                manifest["params"][full] = {
                    "shape": list(p.shape),
                    "dtype": "float32-le",
                }
                _write_zip_entry(zf, f"params/{full}.f32", _tensor_bytes(p))
        _write_zip_entry(
            zf, "manifest.json",
            json.dumps(manifest, indent=2, sort_keys=True).encode(),
        )


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read a checkpoint; returns (manifest, {component.param: tensor})."""
    arrays: dict[str, torch.Tensor] = {}
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise IOError(
                f"unsupported checkpoint schema {manifest.get('schema_version')}"
            )
        for full, meta in manifest["params"].items():
            raw = zf.read(f"params/{full}.f32")
            arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()
            arrays[full] = torch.from_numpy(arr)
    return manifest, arrays


def load_module_parameters(module: nn.Module, component: str,
                           arrays: dict[str, torch.Tensor]) -> None:
    """Copy checkpoint arrays into a module's parameters in place."""
    with torch.no_grad():
        for pname, p in module.named_parameters():
            full = f"{component}.{pname}"
            if full not in arrays:
                raise IOError(f"checkpoint missing parameter {full}")
            if tuple(arrays[full].shape) != tuple(p.shape):
                raise IOError(f"checkpoint shape mismatch for {full}")
            p.copy_(arrays[full].to(p.dtype))
