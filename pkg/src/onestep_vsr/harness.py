"""Training loop, inference, evaluation metrics, and run configuration.

One training step runs a discriminator update on detached generator
outputs, then a generator update on the weighted total objective
(alternating scheme; a simultaneous single-snapshot scheme is available as
a config switch). The generator path per frame is: bilinear-upsample the
degraded input to target resolution, encode, fuse with warped-neighbor
latents behind the hard confidence gate, predict noise once at the final
schedule step, invert the mix, decode. Adversarial and warp terms are
skipped on each clip's first frame (no previous ground truth); the focal
MSE falls back to plain MSE there.
"""

from __future__ import annotations

import dataclasses
import json
import time
import typing
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adversarial import discriminator_loss, focal_modulator, focal_mse, generator_adv_loss
from .core import ContractViolation, Frame, VideoClip, psnr, upsample_clip, warp
from .data import DegradationConfig
from .diffusion import NoiseSchedule, one_step_denoise
from .flow import BlockMatchingFlow, CachedFlow, FlowEstimator, WarpConfidenceParams
from .fusion import LatentFusion, build_fusion_input
from .nets import (
    PatchDiscriminator,
    ToyUNet,
    ToyVAE,
    hash_parameters,
    load_checkpoint,
    load_module_parameters,
    pretrain_autoencoder,
    save_checkpoint,
)
from .objectives import LossWeights, NonFiniteLossError, ToyPerceptualNet, perceptual_loss, total_loss, warp_loss


@dataclass
class RunConfig:
    """Every knob of a run. Defaults follow the reference training recipe;
    `RunConfig.toy()` is the CPU desk-scale profile used by the test suite."""

    seed: int = 0
    scale: int = 4
    clip_len: int = 3
    crop: int = 512
    batch_size: int = 8
    epochs: int = 150
    max_steps: int = 0  # > 0 overrides epochs
    update_scheme: str = "alternating"  # "alternating" | "simultaneous"
    use_fusion: bool = True
    detach_modulator: bool = True

    g_lr: float = 1e-5
    g_weight_decay: float = 1e-8
    d_lr: float = 5e-4
    d_warmup: int = 500

    tau: float = 100.0
    gamma: float = 2.0
    mu: float = 0.4
    conf_alpha: float = 50.0
    w_gan: float = 1.0
    w_fmse: float = 1.0
    w_lpips: float = 2.0
    w_warp: float = 2.0

    lora_rank: int = 32
    latent_channels: int = 4
    vae_channels: int = 16
    unet_widths: tuple[int, int, int] = (16, 24, 32)
    patch_size: int = 4
    disc_feature_dim: int = 16
    disc_width: int = 32
    num_heads: int = 2
    key_dim: int = 8
    cond_dim: int = 8
    schedule_steps: int = 1000
    schedule_alpha_final: float = 0.8
    perceptual_seed: int = 7

    flow_block: int = 8
    flow_radius: int = 4

    vae_pretrain_steps: int = 300
    vae_pretrain_lr: float = 2e-3

    deg_blur_sigma: tuple[float, float] = (0.2, 1.2)
    deg_scale_range: tuple[float, float] = (0.5, 1.0)
    deg_interps: tuple[str, ...] = ("area", "bilinear", "bicubic")
    deg_noise_sigma: tuple[float, float] = (0.0, 0.04)
    deg_quality: tuple[int, int] = (60, 95)
    deg_second_pass: bool = False

    data_root: str = ""
    out_dir: str = "runs/run0"

    def __post_init__(self):
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.d_warmup < 1:
            raise ContractViolation("d_warmup must be >= 1")
        if self.update_scheme not in ("alternating", "simultaneous"):
            raise ContractViolation("update_scheme must be 'alternating' or 'simultaneous'")
        if self.max_steps > 0 and self.d_warmup > self.max_steps:
            raise ContractViolation("warmup cannot exceed total iterations")

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale profile: small crops, larger stepsizes, short warmup."""
        values = dict(
            crop=64,
            batch_size=2,
            max_steps=200,
            g_lr=2e-3,
            d_lr=1e-3,
            d_warmup=50,
            tau=1.0,
            lora_rank=8,
            schedule_alpha_final=0.1,
            vae_pretrain_steps=300,
        )
        values.update(overrides)
        if values["max_steps"] > 0 and "d_warmup" not in overrides:
            values["d_warmup"] = min(values["d_warmup"], values["max_steps"])
        return cls(**values)

    def degradation(self) -> DegradationConfig:
        return DegradationConfig(
            blur_kind="gaussian",
            blur_sigma=self.deg_blur_sigma,
            scale_range=self.deg_scale_range,
            interps=self.deg_interps,
            noise_sigma=self.deg_noise_sigma,
            quality=self.deg_quality,
            second_pass=self.deg_second_pass,
            sr_scale=self.scale,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_gan, self.w_fmse, self.w_lpips, self.w_warp)

    def confidence(self) -> WarpConfidenceParams:
        return WarpConfidenceParams(self.conf_alpha, self.mu)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)

    def to_file(self, path: str | Path) -> None:
        """Write the key = value config file format."""
        lines = ["# onestep-vsr run configuration"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Parse the documented key = value format ('#' starts a comment)."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        hints = typing.get_type_hints(cls)
        kwargs: dict = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ContractViolation(f"{path}:{lineno}: unknown config key {key!r}")
            kwargs[key] = _parse_config_value(value, hints[key], key)
        return cls(**kwargs)


def _parse_config_value(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        elem = args[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(elem(p) for p in parts)
    if hint is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ContractViolation(f"config key {key!r}: cannot parse bool from {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def discriminator_lr(cfg: RunConfig, iteration: int) -> float:
    """Linear warmup to the target rate: lr(k) = d_lr * min(k, warmup) / warmup."""
    return cfg.d_lr * min(iteration, cfg.d_warmup) / cfg.d_warmup


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------


class TrainingState:
    """Owns the networks, optimizers, schedule, flow cache and loss history."""

    def __init__(self, cfg: RunConfig, vae: ToyVAE, unet: ToyUNet, fusion: LatentFusion,
                 disc: PatchDiscriminator, perceptual: ToyPerceptualNet,
                 schedule: NoiseSchedule, flow: FlowEstimator):
        self.cfg = cfg
        self.vae = vae
        self.unet = unet
        self.fusion = fusion
        self.disc = disc
        self.perceptual = perceptual
        self.schedule = schedule
        self.flow = flow
        self.step = 0
        self.history: list[dict] = []
        gen_params = (
            vae.encoder_adapter_parameters()
            + unet.adapter_parameters()
            + list(fusion.parameters())
        )
        self.g_opt = torch.optim.AdamW(gen_params, lr=cfg.g_lr, weight_decay=cfg.g_weight_decay)
        self.d_opt = torch.optim.SGD(disc.parameters(), lr=cfg.d_lr)

    @classmethod
    def initialize(cls, cfg: RunConfig, pretrain_frames: list[Frame] | None = None,
                   verbose: bool = False) -> "TrainingState":
        seed_everything(cfg.seed)
        vae = ToyVAE(3, cfg.vae_channels, cfg.latent_channels, cfg.lora_rank)
        unet = ToyUNet(cfg.latent_channels, cfg.unet_widths, cfg.lora_rank, cfg.cond_dim)
        fusion = LatentFusion(cfg.latent_channels, cfg.num_heads, cfg.key_dim)
        disc = PatchDiscriminator(3, cfg.patch_size, cfg.disc_feature_dim, cfg.disc_width)
        perceptual = ToyPerceptualNet(3, cfg.perceptual_seed)
        schedule = NoiseSchedule.cosine(cfg.schedule_steps, cfg.schedule_alpha_final)
        flow = CachedFlow(BlockMatchingFlow(cfg.flow_block, cfg.flow_radius))
        if pretrain_frames and cfg.vae_pretrain_steps > 0:
            pretrain_autoencoder(vae, pretrain_frames, cfg.vae_pretrain_steps,
                                 cfg.vae_pretrain_lr,
                                 log_every=50 if verbose else 0)
        return cls(cfg, vae, unet, fusion, disc, perceptual, schedule, flow)

    def modules(self) -> dict[str, torch.nn.Module]:
        return {
            "vae": self.vae,
            "unet": self.unet,
            "fusion": self.fusion,
            "discriminator": self.disc,
        }

    def component_hashes(self) -> dict[str, str]:
        """Content hashes of each trainability partition."""
        return {
            "vae_encoder_base": hash_parameters(self.vae.encoder_base_parameters()),
            "vae_encoder_adapters": hash_parameters(self.vae.encoder_adapter_parameters()),
            "vae_decoder": hash_parameters(self.vae.decoder_parameters()),
            "unet_base": hash_parameters(self.unet.base_parameters()),
            "unet_adapters": hash_parameters(self.unet.adapter_parameters()),
            "fusion": hash_parameters(self.fusion),
            "discriminator": hash_parameters(self.disc),
        }


def save_state(state: TrainingState, path: str | Path) -> None:
    extra = {"step": state.step}
    save_checkpoint(path, state.modules(), state.cfg.to_dict(), extra)


def load_state(path: str | Path) -> TrainingState:
    manifest, arrays = load_checkpoint(path)
    cfg = RunConfig.from_dict(manifest["config"])
    state = TrainingState.initialize(cfg, pretrain_frames=None)
    for comp, mod in state.modules().items():
        load_module_parameters(mod, comp, arrays)
    state.step = int(manifest.get("extra", {}).get("step", 0))
    return state


# ---------------------------------------------------------------------------
# Generator forward path
# ---------------------------------------------------------------------------


def generate_frame(state: TrainingState, model_input: VideoClip, i: int) -> Frame:
    """Run the one-step path for frame i of an already-upsampled input clip."""
    cfg = state.cfg
    if cfg.use_fusion:
        fin = build_fusion_input(
            model_input, i, state.vae.encode, state.flow, cfg.confidence(),
            state.vae.spatial_factor,
        )
        z = state.fusion(fin)
    else:
        z = state.vae.encode(model_input[i])
    eps = state.unet.predict_noise(z, state.schedule.T)
    z_hat = one_step_denoise(z, eps, state.schedule)
    return state.vae.decode(z_hat)


def infer_clip(lr: VideoClip, state: TrainingState) -> VideoClip:
    """Upscale a degraded clip; exactly one noise prediction per frame."""
    model_input = upsample_clip(lr, state.cfg.scale)
    with torch.no_grad():
        frames = tuple(generate_frame(state, model_input, i) for i in range(len(lr)))
    return VideoClip(frames, "hr")


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


def _mean_or_zero(terms: list[torch.Tensor]) -> torch.Tensor:
    if not terms:
        return torch.tensor(0.0)
    return torch.stack(terms).mean()


def discriminator_phase(state: TrainingState, batch: list[tuple[VideoClip, VideoClip]],
                        inputs: list[VideoClip], iteration: int,
                        apply_step: bool = True) -> torch.Tensor:
    """Accumulate the contrastive loss on detached generator outputs and
    (optionally) apply the warmup-scheduled update. Generator parameters are
    untouched."""
    cfg = state.cfg
    with torch.no_grad():
        fakes = [[generate_frame(state, up, i) for i in range(len(up))] for up in inputs]
    d_terms = []
    for (hr, _), fake_frames in zip(batch, fakes):
        for i in range(1, len(hr)):
            f_prev = state.disc.extract(hr[i - 1])
            f_real = state.disc.extract(hr[i])
            f_fake = state.disc.extract(fake_frames[i])
            d_terms.append(discriminator_loss(f_prev, f_real, f_fake, cfg.tau))
    d_loss = _mean_or_zero(d_terms)
    for group in state.d_opt.param_groups:
        group["lr"] = discriminator_lr(cfg, iteration)
    if d_terms:
        state.d_opt.zero_grad()
        d_loss.backward()
        if apply_step:
            state.d_opt.step()
    return d_loss


def generator_phase(state: TrainingState, batch: list[tuple[VideoClip, VideoClip]],
                    inputs: list[VideoClip]) -> dict[str, torch.Tensor]:
    """Compute the weighted total objective and update the generator-side
    parameters; the discriminator is frozen for the duration."""
    cfg = state.cfg
    for p in state.disc.parameters():
        p.requires_grad_(False)
    try:
        gan_terms, fmse_terms, lpips_terms, warp_terms = [], [], [], []
        for (hr, _), up in zip(batch, inputs):
            for i in range(len(hr)):
                pred = generate_frame(state, up, i)
                gt = hr[i]
                lpips_terms.append(perceptual_loss(pred, gt, state.perceptual))
                if i == 0:
                    # no previous ground truth: adversarial and warp terms are
                    # skipped and the focal weighting degenerates to plain MSE
                    fmse_terms.append(((pred.pixels - gt.pixels) ** 2).mean())
                    continue
                gt_prev = hr[i - 1]
                f_prev = state.disc.extract(gt_prev)
                f_fake = state.disc.extract(pred)
                gan_terms.append(generator_adv_loss(f_prev, f_fake))
                s = focal_modulator(f_prev, f_fake, (gt.height, gt.width))
                fmse_terms.append(
                    focal_mse(pred, gt, s, cfg.gamma, detach_weights=cfg.detach_modulator)
                )
                flow_hr = state.flow.estimate(gt_prev, gt, "backward")
                warp_terms.append(warp_loss(pred, gt_prev, gt, flow_hr, cfg.conf_alpha))
        parts = {
            "gan": _mean_or_zero(gan_terms),
            "fmse": _mean_or_zero(fmse_terms),
            "lpips": _mean_or_zero(lpips_terms),
            "warp": _mean_or_zero(warp_terms),
        }
        g_total = total_loss(parts["gan"], parts["fmse"], parts["lpips"], parts["warp"],
                             cfg.loss_weights())
        state.g_opt.zero_grad()
        g_total.backward()
        state.g_opt.step()
        parts["g_total"] = g_total
        return parts
    finally:
        for p in state.disc.parameters():
            p.requires_grad_(True)


def train_step(state: TrainingState, batch: list[tuple[VideoClip, VideoClip]]) -> dict:
    """One discriminator update then one generator update on a batch of clip pairs.

    Under update_scheme "simultaneous" both gradients are taken against the
    same parameter snapshot and the discriminator step is applied after the
    generator's.
    """
    if not batch:
        raise ContractViolation("train_step needs a non-empty batch")
    cfg = state.cfg
    iteration = state.step + 1
    inputs = [upsample_clip(lr, cfg.scale) for _, lr in batch]

    alternating = cfg.update_scheme == "alternating"
    d_loss = discriminator_phase(state, batch, inputs, iteration, apply_step=alternating)
    parts = generator_phase(state, batch, inputs)
    if not alternating:
        state.d_opt.step()

    state.step = iteration
    scalars = {"step": iteration, "d_loss": float(d_loss.detach())}
    for key in ("g_total", "gan", "fmse", "lpips", "warp"):
        scalars[key] = float(parts[key].detach())
    scalars["d_lr"] = discriminator_lr(cfg, iteration)
    state.history.append(scalars)
    return scalars


def train(state: TrainingState, dataset: list[tuple[VideoClip, VideoClip]],
          out_dir: str | Path | None = None, verbose: bool = False) -> list[dict]:
    """Run the configured number of steps over the dataset; returns the history.

    Non-finite losses abort with a diagnostics snapshot written next to the
    run outputs (when out_dir is given) before the error propagates.
    """
    cfg = state.cfg
    if cfg.max_steps > 0:
        total_steps = cfg.max_steps
    else:
        total_steps = cfg.epochs * max(len(dataset) // max(cfg.batch_size, 1), 1)
    order_rng = np.random.default_rng([cfg.seed, 0xBA7C4])
    queue: list[int] = []
    try:
        while state.step < total_steps:
            if len(queue) < cfg.batch_size:
                queue.extend(order_rng.permutation(len(dataset)).tolist())
            idx, queue = queue[: cfg.batch_size], queue[cfg.batch_size:]
            scalars = train_step(state, [dataset[k] for k in idx])
            if verbose and (state.step % 10 == 0 or state.step == total_steps):
                print(
                    f"step {scalars['step']:5d}  g_total {scalars['g_total']:.4f}  "
                    f"d_loss {scalars['d_loss']:.4f}"
                )
    except NonFiniteLossError as err:
        if out_dir is not None:
            snap = {
                "error": str(err),
                "components": err.components,
                "step": state.step,
                "history": state.history,
            }
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "diagnostics.json").write_text(json.dumps(snap, indent=2))
        raise
    return state.history


# ---------------------------------------------------------------------------
# Metrics and evaluation
# ---------------------------------------------------------------------------


def warping_error(clip: VideoClip, flow: FlowEstimator, alpha: float = 50.0) -> float:
    """Temporal-consistency metric, reported x1e3 as is conventional.

    For each consecutive pair, the previous frame is warped forward and the
    squared error against the current frame is averaged with per-pixel
    weights exp(-alpha * L1 warp error), normalized by the weight mass.
    """
    if len(clip) < 2:
        raise ContractViolation("warping error needs at least two frames")
    vals = []
    for i in range(1, len(clip)):
        fl = flow.estimate(clip[i - 1], clip[i], "backward")
        warped = warp(clip[i - 1], fl).pixels
        cur = clip[i].pixels
        l1 = (cur - warped).abs().sum(dim=2)
        conf = torch.exp(-alpha * l1)
        sq = ((cur - warped) ** 2).mean(dim=2)
        vals.append(float((conf * sq).sum() / conf.sum()))
    return float(np.mean(vals)) * 1e3


def clip_psnr(pred: VideoClip, ref: VideoClip) -> float:
    if len(pred) != len(ref):
        raise ContractViolation("clips must have equal length for PSNR")
    return float(np.mean([psnr(p, r) for p, r in zip(pred.frames, ref.frames)]))


@dataclass
class EvalReport:
    """Per-clip and aggregate metrics; aggregates are means of per-clip values."""

    clips: list[dict] = field(default_factory=list)
    psnr: float | None = None
    warping_error: float | None = None
    loss_history: list[dict] | None = None
    timings: dict = field(default_factory=dict)

    def to_json(self, include_timings: bool = True) -> str:
        d = dataclasses.asdict(self)
        if not include_timings:
            d.pop("timings")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate(pairs: list[tuple[VideoClip, VideoClip | None]],
             flow: FlowEstimator | None = None, conf_alpha: float = 50.0,
             loss_history: list[dict] | None = None) -> EvalReport:
    """Compute per-clip PSNR (reference required) and warping error (none needed)."""
    if flow is None:
        flow = CachedFlow(BlockMatchingFlow())
    t0 = time.perf_counter()
    report = EvalReport(loss_history=loss_history)
    for k, (out_clip, ref_clip) in enumerate(pairs):
        entry: dict = {"clip": f"clip_{k:03d}"}
        if ref_clip is not None:
            if (ref_clip.height, ref_clip.width) != (out_clip.height, out_clip.width):
                raise ContractViolation("reference shape must match the output clip")
            entry["psnr"] = clip_psnr(out_clip, ref_clip)
        else:
            warnings.warn(f"clip_{k:03d}: no reference given, PSNR omitted")
            entry["psnr"] = None
        entry["warping_error"] = (
            warping_error(out_clip, flow, conf_alpha) if len(out_clip) >= 2 else None
        )
        report.clips.append(entry)
    psnrs = [c["psnr"] for c in report.clips if c["psnr"] is not None]
    warps = [c["warping_error"] for c in report.clips if c["warping_error"] is not None]
    report.psnr = float(np.mean(psnrs)) if psnrs else None
    report.warping_error = float(np.mean(warps)) if warps else None
    report.timings = {"evaluate_seconds": time.perf_counter() - t0}
    return report


def save_loss_plot(history: list[dict], path: str | Path) -> None:
    """Write a PNG of the per-step loss curves."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(8, 5))
    for key in ("g_total", "d_loss", "gan", "fmse", "lpips", "warp"):
        ax.plot(steps, [h[key] for h in history], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
