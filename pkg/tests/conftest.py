import numpy as np
import pytest
import torch

from onestep_vsr.core import Frame, VideoClip


def rand_frame(rng: np.random.Generator, h: int, w: int, c: int = 3,
               lo: float = 0.05, hi: float = 0.95, dtype=torch.float64,
               index: int = 0) -> Frame:
    arr = rng.uniform(lo, hi, size=(h, w, c))
    return Frame(torch.tensor(arr, dtype=dtype), index)


def rand_clip(rng: np.random.Generator, n: int, h: int, w: int, c: int = 3,
              dtype=torch.float64, scale_tag: str = "hr") -> VideoClip:
    return VideoClip(tuple(rand_frame(rng, h, w, c, dtype=dtype, index=k) for k in range(n)),
                     scale_tag)


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar fn(x) w.r.t. every element of x."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def assert_grad_close(analytic: torch.Tensor, numeric: torch.Tensor,
                      rel: float = 1e-4) -> None:
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-8)
    err = float((analytic - numeric).abs().max()) / scale
    assert err <= rel, f"gradient mismatch: relative error {err:.3e} > {rel:.0e}"


@pytest.fixture(scope="session")
def pretrained_vae_setup():
    """A small trained autoencoder plus the frames it was fitted on."""
    from onestep_vsr.data import make_demo_clip
    from onestep_vsr.nets import ToyVAE, pretrain_autoencoder

    torch.manual_seed(0)
    frames = []
    for seed in range(4):
        clip = make_demo_clip("shift", 2, (64, 64), seed=seed)
        frames.extend(clip.frames)
    vae = ToyVAE(3, 16, 4, lora_rank=4)
    pretrain_autoencoder(vae, frames, steps=300, lr=2e-3)
    return vae, frames
