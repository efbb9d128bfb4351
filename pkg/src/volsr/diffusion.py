"""Latent diffusion prior: noise schedule, conditional denoiser, DDIM.

The schedule stores the cumulative signal coefficients alpha_{1:T} in (0, 1],
strictly decreasing, with alpha_0 == 1 by convention. Forward noising is
z_t = sqrt(alpha_t) z_0 + sqrt(1 - alpha_t) eps, and deterministic sampling
walks a strictly increasing timestep subsequence backwards:

    z_prev = sqrt(alpha_prev) * predicted_x0 + sqrt(1 - alpha_prev) * eps_hat

No noise is injected at inference, so sampling is a pure, differentiable
function of the terminal latent and the conditioning vector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .volume import Conditioning, Latent

CHECKPOINT_FORMAT = "volsr-denoiser"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing cumulative alphas in (0, 1]."""

    alphas: np.ndarray  # alpha_t for t = 1..t_train

    def __post_init__(self):
        arr = np.asarray(self.alphas, dtype=np.float64).reshape(-1).copy()
        if arr.size < 1:
            raise ValueError("schedule must contain at least one timestep")
        if arr.min() <= 0.0 or arr.max() > 1.0:
            raise ValueError("alphas must lie in (0, 1]")
        if np.any(np.diff(arr) >= 0):
            raise ValueError("alphas must be strictly decreasing in t")
        arr.flags.writeable = False
        object.__setattr__(self, "alphas", arr)

    @property
    def t_train(self) -> int:
        return int(self.alphas.size)

    def alpha(self, t: int) -> float:
        """alpha_t with the alpha_0 == 1 convention."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.t_train:
            raise ValueError(f"timestep {t} outside [0, {self.t_train}]")
        return float(self.alphas[t - 1])

    @staticmethod
    def scaled_linear(t_train: int = 1000, beta_start: float = 0.0015, beta_end: float = 0.0195) -> "NoiseSchedule":
        """Cumulative product of (1 - beta_t) with betas linear in sqrt space."""
        sqrt_betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), t_train, dtype=np.float64)
        return NoiseSchedule(alphas=np.cumprod(1.0 - sqrt_betas**2))


@dataclass(frozen=True)
class TimestepSubsequence:
    """Strictly increasing subset of {1..t_train} ending at t_train."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(int(t) for t in self.steps)
        if not steps:
            raise ValueError("timestep subsequence must be nonempty")
        if any(t < 1 for t in steps):
            raise ValueError("timesteps must be >= 1")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("timesteps must be strictly increasing")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)

    def validate_for(self, schedule: NoiseSchedule) -> None:
        if self.steps[-1] != schedule.t_train:
            raise ValueError(f"subsequence must end at t_train={schedule.t_train}, ends at {self.steps[-1]}")

    @staticmethod
    def evenly_spaced(t_train: int, n_steps: int) -> "TimestepSubsequence":
        if not 1 <= n_steps <= t_train:
            raise ValueError(f"need 1 <= n_steps <= t_train, got {n_steps} vs {t_train}")
        # descending linspace so the t_train endpoint is always included
        steps = np.unique(np.round(np.linspace(t_train, 1, n_steps)).astype(int))
        if steps.size != n_steps:
            raise ValueError(f"cannot place {n_steps} distinct steps in 1..{t_train}")
        return TimestepSubsequence(steps=tuple(int(t) for t in steps))


@dataclass(frozen=True)
class DenoiserConfig:
    latent_shape: tuple = (4, 4, 4)
    cond_dim: int = 4
    channels: int = 32
    blocks: int = 2
    time_embed_dim: int = 16
    hidden_dim: int = 64

    def __post_init__(self):
        shape = tuple(int(s) for s in self.latent_shape)
        if len(shape) != 3 or any(s <= 0 for s in shape):
            raise ValueError(f"latent shape must be three positive ints, got {self.latent_shape}")
        object.__setattr__(self, "latent_shape", shape)
        if self.cond_dim < 1 or self.channels < 1 or self.blocks < 1:
            raise ValueError("cond_dim, channels, and blocks must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ConditionalDenoiser(nn.Module):
    """Noise predictor eps(z_t, t, cond) over the latent grid.

    Conditioning and timestep enter as per-channel biases computed by a
    small MLP from the sinusoidal time embedding concatenated with the
    covariate vector, so the output is differentiable in both z_t and cond.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.in_conv = nn.Conv3d(1, c, 3, padding=1)
        self.blocks = nn.ModuleList(nn.Conv3d(c, c, 3, padding=1) for _ in range(config.blocks))
        self.out_conv = nn.Conv3d(c, 1, 3, padding=1)
        self.cond_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim + config.cond_dim, config.hidden_dim),
            nn.SiLU(),
            nn.Linear(config.hidden_dim, config.blocks * c),
        )
        self.act = nn.SiLU()
        self.register_buffer("latent_scale", torch.ones((), dtype=torch.float64))
        self.double()

    def _coerce(self, z: torch.Tensor, t, cond):
        squeeze = z.dim() == 3
        if squeeze:
            z = z[None, None]
        elif z.dim() != 5 or z.shape[1] != 1:
            raise ValueError(f"expected latent tensor (d,h,w) or (B,1,d,h,w), got {tuple(z.shape)}")
        if tuple(z.shape[-3:]) != self.config.latent_shape:
            raise ValueError(f"latent shape {tuple(z.shape[-3:])} != configured {self.config.latent_shape}")
        b = z.shape[0]
        if isinstance(cond, Conditioning):
            cond = np.array(cond.values)
        cond = torch.as_tensor(np.array(cond), dtype=z.dtype) if not isinstance(cond, torch.Tensor) else cond
        if cond.dim() == 1:
            cond = cond[None, :].expand(b, -1)
        if cond.shape != (b, self.config.cond_dim):
            raise ValueError(f"conditioning shape {tuple(cond.shape)} != ({b}, {self.config.cond_dim})")
        if isinstance(t, torch.Tensor):
            tv = t.to(dtype=z.dtype).reshape(-1)
            tv = tv.expand(b) if tv.numel() == 1 else tv
        else:
            tv = torch.full((b,), float(t), dtype=z.dtype)
        if tv.shape != (b,):
            raise ValueError(f"timestep batch shape {tuple(tv.shape)} != ({b},)")
        return z, tv, cond, squeeze

    def forward(self, z: torch.Tensor, t, cond) -> torch.Tensor:
        z, tv, cond, squeeze = self._coerce(z, t, cond)
        emb = torch.cat([_sinusoidal_embedding(tv, self.config.time_embed_dim), cond], dim=1)
        biases = self.cond_mlp(emb).reshape(z.shape[0], self.config.blocks, self.config.channels)
        h = self.act(self.in_conv(z))
        for i, conv in enumerate(self.blocks):
            h = self.act(conv(h) + biases[:, i, :, None, None, None])
        out = self.out_conv(h)
        return out[0, 0] if squeeze else out


def forward_noising(schedule: NoiseSchedule, z0, t: int, eps):
    """z_t = sqrt(alpha_t) z_0 + sqrt(1 - alpha_t) eps for 1 <= t <= t_train."""
    if not 1 <= int(t) <= schedule.t_train:
        raise ValueError(f"timestep {t} outside [1, {schedule.t_train}]")
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    a = schedule.alpha(int(t))
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def diffusion_training_loss(denoiser, schedule: NoiseSchedule, z0: torch.Tensor, cond, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm between the injected and the predicted noise."""
    z_t = forward_noising(schedule, z0, t, eps)
    pred = denoiser(z_t, t, cond)
    if tuple(pred.shape) != tuple(eps.shape):
        raise ValueError(f"denoiser output shape {tuple(pred.shape)} != noise shape {tuple(eps.shape)}")
    return torch.sum((eps - pred) ** 2)


def predicted_x0(denoiser, schedule: NoiseSchedule, z_t: torch.Tensor, cond, t: int) -> torch.Tensor:
    """(z_t - sqrt(1 - alpha_t) eps_hat) / sqrt(alpha_t)."""
    a = schedule.alpha(int(t))
    if a <= 0.0:
        raise ValueError("singular schedule endpoint: alpha_t must be positive")
    eps_hat = denoiser(z_t, t, cond)
    return (z_t - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)


def ddim_step(denoiser, schedule: NoiseSchedule, z_t: torch.Tensor, cond, t: int, t_prev: int) -> torch.Tensor:
    """One deterministic reverse step from t to t_prev < t (t_prev may be 0)."""
    t = int(t)
    t_prev = int(t_prev)
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got t_prev={t_prev}, t={t}")
    a_t = schedule.alpha(t)
    a_prev = schedule.alpha(t_prev)
    if a_t <= 0.0:
        raise ValueError("singular schedule endpoint: alpha_t must be positive")
    eps_hat = denoiser(z_t, t, cond)
    x0 = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps_hat


def ddim_sample(denoiser, schedule: NoiseSchedule, z_terminal: torch.Tensor, cond, subseq: TimestepSubsequence) -> torch.Tensor:
    """Deterministically map a terminal latent to a clean latent.

    Folds ddim_step over the subsequence from its largest timestep down,
    with a final hop to t = 0 (alpha_0 == 1). Pure and differentiable in
    both the terminal latent and the conditioning.
    """
    if not isinstance(subseq, TimestepSubsequence):
        subseq = TimestepSubsequence(steps=tuple(subseq))
    subseq.validate_for(schedule)
    z = z_terminal
    steps = list(subseq.steps)
    for t, t_prev in zip(reversed(steps), reversed([0] + steps[:-1])):
        z = ddim_step(denoiser, schedule, z, cond, t, t_prev)
    return z


@dataclass(frozen=True)
class DiffusionTrainConfig:
    denoiser: DenoiserConfig = DenoiserConfig()
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    normalize_latents: bool = True
    seed: int = 0


def train_denoiser(latents, conditionings, schedule: NoiseSchedule, config: DiffusionTrainConfig, val_fraction: float = 0.0):
    """Train the noise predictor on clean latent codes with conditioning.

    Latents are rescaled to unit standard deviation before diffusion (the
    factor is stored in the model's ``latent_scale`` buffer; divide sampled
    codes by it before decoding). Deterministic given ``config.seed``.
    Returns ``(model, history)`` with one record per logging interval.
    """
    latents = [np.asarray(z.data if isinstance(z, Latent) else z, dtype=np.float64) for z in latents]
    if len(latents) < 2:
        raise ValueError(f"need at least 2 training latents, got {len(latents)}")
    conds = [c.values if isinstance(c, Conditioning) else np.asarray(c, dtype=np.float64) for c in conditionings]
    if len(conds) != len(latents):
        raise ValueError("latents and conditionings differ in length")

    z_data = torch.as_tensor(np.stack(latents), dtype=torch.float64)[:, None]
    c_data = torch.as_tensor(np.stack(conds), dtype=torch.float64)

    torch.manual_seed(config.seed)
    model = ConditionalDenoiser(config.denoiser)
    scale = 1.0
    if config.normalize_latents:
        std = float(z_data.std())
        if std > 0:
            scale = 1.0 / std
    model.latent_scale.fill_(scale)
    z_data = z_data * scale

    n_val = int(round(val_fraction * z_data.shape[0]))
    z_val, c_val = z_data[:n_val], c_data[:n_val]
    z_trn, c_trn = z_data[n_val:], c_data[n_val:]

    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    alphas = torch.from_numpy(np.array(schedule.alphas))
    history = []
    log_every = max(config.steps // 20, 1)
    running = 0.0
    for step in range(config.steps):
        frac = step / max(config.steps - 1, 1)
        for group in opt.param_groups:
            group["lr"] = config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))
        idx = torch.randint(0, z_trn.shape[0], (config.batch_size,), generator=gen)
        t = torch.randint(1, schedule.t_train + 1, (config.batch_size,), generator=gen)
        z0 = z_trn[idx]
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
        a = alphas[t - 1][:, None, None, None, None]
        z_t = torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps
        pred = model(z_t, t, c_trn[idx])
        loss = torch.sum((eps - pred) ** 2, dim=(1, 2, 3, 4)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        running += float(loss.detach())
        if (step + 1) % log_every == 0:
            record = {"step": step + 1, "train_loss": running / log_every}
            if n_val:
                record["val_loss"] = held_out_denoiser_loss(model, z_val, c_val, schedule, seed=config.seed)
            history.append(record)
            running = 0.0
    model.eval()
    return model, history


def held_out_denoiser_loss(model, z_val: torch.Tensor, c_val: torch.Tensor, schedule: NoiseSchedule, seed: int = 0) -> float:
    """Mean per-sample squared-L2 denoising loss on a fixed noise draw."""
    gen = torch.Generator().manual_seed(seed + 2)
    t = torch.randint(1, schedule.t_train + 1, (z_val.shape[0],), generator=gen)
    eps = torch.randn(z_val.shape, generator=gen, dtype=torch.float64)
    a = torch.from_numpy(np.array(schedule.alphas))[t - 1][:, None, None, None, None]
    with torch.no_grad():
        pred = model(torch.sqrt(a) * z_val + torch.sqrt(1.0 - a) * eps, t, c_val)
        return float(torch.sum((eps - pred) ** 2, dim=(1, 2, 3, 4)).mean())


def save_denoiser(model: ConditionalDenoiser, schedule: NoiseSchedule, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "alphas": np.asarray(schedule.alphas),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, p)
    return p


def load_denoiser(path):
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    cfg_dict = dict(payload["config"])
    cfg_dict["latent_shape"] = tuple(cfg_dict["latent_shape"])
    model = ConditionalDenoiser(DenoiserConfig(**cfg_dict))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    schedule = NoiseSchedule(alphas=payload["alphas"])
    return model, schedule
