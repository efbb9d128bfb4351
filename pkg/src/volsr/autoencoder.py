"""Compression stage: 3D convolutional variational autoencoder.

The encoder maps a volume to a diagonal Gaussian posterior over a small 3D
latent grid (one-eighth of the volume edge length per axis); the decoder
maps latents back to volumes through a sigmoid, so decoded intensities
always lie in [0, 1]. Training minimizes L1 + perceptual + KL. The
perceptual distance is computed from the encoder's own multi-scale
activations (with the raw intensities as scale zero, making it a
pseudometric that vanishes only on identical inputs).

All modules run in float64 so analytic gradients can be checked against
central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .volume import Latent, Volume

CHECKPOINT_FORMAT = "volsr-autoencoder"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AutoencoderConfig:
    volume_shape: tuple = (32, 32, 32)
    base_channels: int = 8
    learning_rate: float = 3e-3
    kl_weight: float = 1e-6
    perceptual_weight: float = 0.1
    epochs: int = 80
    batch_size: int = 16
    augment_flips: bool = True
    seed: int = 0
    latent_shape: tuple = ()  # derived from volume_shape when empty

    def __post_init__(self):
        shape = tuple(int(s) for s in self.volume_shape)
        if len(shape) != 3 or any(s % 8 != 0 or s <= 0 for s in shape):
            raise ValueError(f"volume shape must be positive multiples of 8, got {shape}")
        object.__setattr__(self, "volume_shape", shape)
        derived = tuple(s // 8 for s in shape)
        latent = tuple(int(s) for s in self.latent_shape) if self.latent_shape else derived
        if latent != derived:
            raise ValueError(f"latent shape {latent} inconsistent with volume shape {shape} (expected {derived})")
        object.__setattr__(self, "latent_shape", latent)
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")


class VolumeAutoencoder(nn.Module):
    """Three-level strided conv encoder/decoder with a 1-channel latent."""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        c = config.base_channels

        def norm(ch):
            return nn.GroupNorm(math.gcd(ch, 4), ch)

        self.enc1 = nn.Conv3d(1, c, 3, stride=2, padding=1)
        self.enc_n1 = norm(c)
        self.enc2 = nn.Conv3d(c, 2 * c, 3, stride=2, padding=1)
        self.enc_n2 = norm(2 * c)
        self.enc3 = nn.Conv3d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.enc_n3 = norm(4 * c)
        self.enc_head = nn.Conv3d(4 * c, 2, 3, padding=1)
        # Full-resolution stride-1 conv3d is the single-core bottleneck, so
        # the last level keeps few channels and ends in a pointwise conv.
        out_c = max(c // 2, 2)
        self.dec_in = nn.Conv3d(1, 4 * c, 3, padding=1)
        self.dec_n0 = norm(4 * c)
        self.dec1 = nn.ConvTranspose3d(4 * c, 2 * c, 4, stride=2, padding=1)
        self.dec_n1 = norm(2 * c)
        self.dec2 = nn.ConvTranspose3d(2 * c, c, 4, stride=2, padding=1)
        self.dec_n2 = norm(c)
        self.dec3 = nn.ConvTranspose3d(c, out_c, 4, stride=2, padding=1)
        self.dec_n3 = norm(out_c)
        self.dec_out = nn.Conv3d(out_c, 1, 1)
        self.act = nn.SiLU()
        self.double()
        # Start the posterior near-deterministic so early reconstruction
        # learning is not drowned by unit-scale latent noise.
        with torch.no_grad():
            self.enc_head.bias[1] = -6.0

    # -- tensor-level core ---------------------------------------------------

    def _check_volume_batch(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[None, None]
        elif x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"expected volume tensor (D,H,W) or (B,1,D,H,W), got {tuple(x.shape)}")
        if tuple(x.shape[-3:]) != self.config.volume_shape:
            raise ValueError(f"volume shape {tuple(x.shape[-3:])} != configured {self.config.volume_shape}")
        return x

    def _check_latent_batch(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 3:
            z = z[None, None]
        elif z.dim() != 5 or z.shape[1] != 1:
            raise ValueError(f"expected latent tensor (d,h,w) or (B,1,d,h,w), got {tuple(z.shape)}")
        if tuple(z.shape[-3:]) != self.config.latent_shape:
            raise ValueError(f"latent shape {tuple(z.shape[-3:])} != configured {self.config.latent_shape}")
        return z

    def encode_t(self, x: torch.Tensor):
        """Posterior (mean, logvar) tensors for a volume batch."""
        x = self._check_volume_batch(x)
        h = self.act(self.enc_n1(self.enc1(x)))
        h = self.act(self.enc_n2(self.enc2(h)))
        h = self.act(self.enc_n3(self.enc3(h)))
        out = self.enc_head(h)
        return out[:, 0:1], out[:, 1:2]

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        z = self._check_latent_batch(z)
        h = self.act(self.dec_n0(self.dec_in(z)))
        h = self.act(self.dec_n1(self.dec1(h)))
        h = self.act(self.dec_n2(self.dec2(h)))
        h = self.act(self.dec_n3(self.dec3(h)))
        x = torch.sigmoid(self.dec_out(h))
        return x[0, 0] if squeeze else x

    def features(self, x: torch.Tensor):
        """Multi-scale feature maps used by the perceptual distance.

        Scale 0 is the raw volume; deeper scales are the encoder's
        activations after each strided convolution.
        """
        x = self._check_volume_batch(x)
        h1 = self.act(self.enc_n1(self.enc1(x)))
        h2 = self.act(self.enc_n2(self.enc2(h1)))
        h3 = self.act(self.enc_n3(self.enc3(h2)))
        return [x, h1, h2, h3]

    def perceptual_t(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        fa = self.features(a)
        fb = self.features(b)
        total = torch.zeros((), dtype=a.dtype, device=a.device)
        for xa, xb in zip(fa, fb):
            total = total + torch.mean((xa - xb) ** 2)
        return total


@dataclass(frozen=True)
class LatentPosterior:
    """Diagonal Gaussian over the latent grid: mean and log-variance."""

    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        lv = np.asarray(self.logvar, dtype=np.float64)
        if m.shape != lv.shape:
            raise ValueError("mean and logvar shapes differ")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(lv))):
            raise ValueError("posterior parameters must be finite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "logvar", lv)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(self.mean.shape)
        return self.mean + np.exp(0.5 * self.logvar) * eps


def _volume_to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    if isinstance(x, Volume):
        x = x.data
    # Volume data is frozen; copy so torch gets a writable buffer.
    return torch.from_numpy(np.array(x, dtype=np.float64))


def encode(ae: VolumeAutoencoder, x) -> LatentPosterior:
    """Encode a Volume (or array) to its latent posterior."""
    t = _volume_to_tensor(x)
    with torch.no_grad():
        mean, logvar = ae.encode_t(t if t.dim() == 5 else t[None, None])
    return LatentPosterior(mean[0, 0].numpy(), logvar[0, 0].numpy())


def decode(ae: VolumeAutoencoder, z, spacing=(1.0, 1.0, 1.0), meta=None) -> Volume:
    """Decode a Latent (or array) to a Volume with intensities in [0, 1]."""
    if isinstance(z, Latent):
        z = z.data
    t = z if isinstance(z, torch.Tensor) else torch.from_numpy(np.array(z, dtype=np.float64))
    with torch.no_grad():
        x = ae.decode_t(t)
    return Volume(data=x.numpy(), spacing=spacing, meta=dict(meta or {}))


def perceptual_loss(ae: VolumeAutoencoder, a, b) -> float:
    """Symmetric multi-scale feature distance; zero iff the inputs match."""
    ta = _volume_to_tensor(a)
    tb = _volume_to_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    with torch.no_grad():
        return float(ae.perceptual_t(ta, tb))


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent entries, averaged over the batch."""
    per_sample = 0.5 * torch.sum(mean**2 + torch.exp(logvar) - 1.0 - logvar, dim=(1, 2, 3, 4))
    return per_sample.mean()


def autoencoder_losses(ae: VolumeAutoencoder, batch: torch.Tensor, generator: torch.Generator = None):
    """(l1, perceptual, kl) training losses on a volume batch."""
    mean, logvar = ae.encode_t(batch)
    if generator is None:
        eps = torch.zeros_like(mean)
    else:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = mean + torch.exp(0.5 * logvar) * eps
    recon = ae.decode_t(z)
    l1 = torch.mean(torch.abs(recon - batch))
    perc = ae.perceptual_t(recon, batch)
    kl = kl_divergence(mean, logvar)
    return l1, perc, kl


def train_autoencoder(volumes, config: AutoencoderConfig, val_volumes=None):
    """Train the autoencoder on a set of volumes.

    Deterministic given ``config.seed``. Returns ``(model, history)`` where
    history holds one record per epoch (train loss plus held-out L1/KL when
    ``val_volumes`` is given).
    """
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ValueError(f"need at least 2 training volumes, got {len(volumes)}")
    data = torch.stack([_volume_to_tensor(v) for v in volumes])[:, None]
    val = None
    if val_volumes:
        val = torch.stack([_volume_to_tensor(v) for v in val_volumes])[:, None]

    torch.manual_seed(config.seed)
    model = VolumeAutoencoder(config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    history = []
    n = data.shape[0]
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    step_idx = 0
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            batch = data[perm[start : start + config.batch_size]]
            if config.augment_flips:
                dims = [d + 2 for d in range(3) if int(torch.randint(0, 2, (1,), generator=gen))]
                if dims:
                    batch = torch.flip(batch, dims=dims)
            # cosine decay to 5% of the base rate sharpens the final fit
            frac = step_idx / max(total_steps - 1, 1)
            for group in opt.param_groups:
                group["lr"] = config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))
            l1, perc, kl = autoencoder_losses(model, batch, generator=gen)
            loss = l1 + config.perceptual_weight * perc + config.kl_weight * kl
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_idx += 1
            epoch_loss += float(loss.detach())
            batches += 1
        record = {"epoch": epoch, "train_loss": epoch_loss / max(batches, 1)}
        if val is not None and (epoch % 5 == 4 or epoch == config.epochs - 1):
            record.update(held_out_losses(model, val))
        history.append(record)
    model.eval()
    return model, history


def held_out_losses(ae: VolumeAutoencoder, volumes) -> dict:
    """Deterministic (posterior-mean) L1 and KL on held-out volumes."""
    if isinstance(volumes, torch.Tensor):
        batch = volumes
    else:
        batch = torch.stack([_volume_to_tensor(v) for v in volumes])[:, None]
    with torch.no_grad():
        mean, logvar = ae.encode_t(batch)
        recon = ae.decode_t(mean)
        l1 = float(torch.mean(torch.abs(recon - batch)))
        kl = float(kl_divergence(mean, logvar))
    return {"val_l1": l1, "val_kl": kl}


def save_autoencoder(ae: VolumeAutoencoder, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(ae.config),
        "state_dict": ae.state_dict(),
    }
    torch.save(payload, p)
    return p


def load_autoencoder(path) -> VolumeAutoencoder:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an autoencoder checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    cfg_dict = dict(payload["config"])
    cfg_dict["volume_shape"] = tuple(cfg_dict["volume_shape"])
    cfg_dict["latent_shape"] = tuple(cfg_dict.get("latent_shape") or ())
    model = VolumeAutoencoder(AutoencoderConfig(**cfg_dict))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
