"""Volumetric super-resolution with a small latent diffusion prior.

Train a toy latent diffusion model over synthetic 3D volumes, then
reconstruct corrupted (slice-masked, region-masked, or k-space
undersampled) inputs by gradient-based search over the model's latent
spaces: either through the full deterministic sampling chain plus decoder,
or through the decoder alone.
"""

from .autoencoder import (
    AutoencoderConfig,
    LatentPosterior,
    VolumeAutoencoder,
    decode,
    encode,
    load_autoencoder,
    perceptual_loss,
    save_autoencoder,
    train_autoencoder,
)
from .corruption import (
    CorruptionSpec,
    apply_corruption,
    kspace_spec,
    kspace_undersample,
    observation_mask,
    region_mask,
    region_spec,
    slice_mask,
    slice_spec,
)
from .diffusion import (
    ConditionalDenoiser,
    DenoiserConfig,
    DiffusionTrainConfig,
    NoiseSchedule,
    TimestepSubsequence,
    ddim_sample,
    ddim_step,
    diffusion_training_loss,
    forward_noising,
    load_denoiser,
    predicted_x0,
    save_denoiser,
    train_denoiser,
)
from .harness import ExperimentConfig, run_pipeline
from .inversion import (
    InversionConfig,
    InversionDivergedError,
    InversionResult,
    invert_decoder,
    invert_ldm,
    mean_latent,
    reconstruction_loss,
)
from .metrics import MetricReport, cubic_interpolate, evaluate_cohort, psnr, ssim
from .volume import (
    Conditioning,
    Latent,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    load_latent,
    load_volume,
    make_phantom,
    normalize_intensity,
    save_latent,
    save_volume,
)

__version__ = "0.1.0"
