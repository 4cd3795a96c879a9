"""One-step diffusion video super-resolution at configurable (toy) scale."""

from .core import (
    ContractViolation,
    Frame,
    FlowField,
    LatentGrid,
    PixelMask,
    VideoClip,
    load_clip,
    load_frame,
    psnr,
    resample_mask,
    save_clip,
    save_frame,
    upsample_clip,
    warp,
)
from .flow import (
    BlockMatchingFlow,
    CachedFlow,
    FlowEstimator,
    WarpConfidenceParams,
    binarize_confidence,
    estimate_flow,
    warp_confidence,
)
from .diffusion import NoiseSchedule, SingularScheduleError, add_noise, one_step_denoise
from .fusion import FusionInput, LatentFusion, attention_fuse, build_fusion_input
from .adversarial import (
    AfatParams,
    PatchFeatureGrid,
    discriminator_loss,
    focal_modulator,
    focal_mse,
    generator_adv_loss,
    patch_cosine_grid,
)
from .objectives import (
    LossWeights,
    NonFiniteLossError,
    PerceptualFeatureExtractor,
    ToyPerceptualNet,
    perceptual_loss,
    total_loss,
    warp_loss,
)
from .nets import (
    LoraConv1x1,
    LoraLinear,
    PatchDiscriminator,
    ToyUNet,
    ToyVAE,
    hash_parameters,
    load_checkpoint,
    pretrain_autoencoder,
    save_checkpoint,
)
from .data import (
    ClipDataset,
    DegradationConfig,
    degrade_clip,
    make_demo_clip,
    make_demo_dataset,
)
from .harness import (
    EvalReport,
    RunConfig,
    TrainingState,
    evaluate,
    generate_frame,
    infer_clip,
    load_state,
    save_state,
    train,
    train_step,
    warping_error,
)

__version__ = "0.1.0"
