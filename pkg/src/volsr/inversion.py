"""Gradient-based search over the generative model's latent spaces.

Two reconstruction routes are implemented. ``invert_ldm`` optimizes the
terminal noise code and the conditioning vector through the full
deterministic sampling chain plus the decoder; ``invert_decoder`` optimizes
a clean latent through the decoder alone, initialized by default at the
mean latent code (the average of many deterministic samples). Both minimize

    lambda_perc * L_perc(f(decode(.)), observed) + lambda_mae * mean|f(decode(.)) - observed|

with Adam, tracking the best-loss iterate, and return the reconstruction
decoded from the returned latent(s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .autoencoder import VolumeAutoencoder
from .corruption import CorruptionSpec, apply_corruption
from .diffusion import ConditionalDenoiser, NoiseSchedule, TimestepSubsequence, ddim_sample
from .volume import Conditioning, Latent, Volume


class InversionDivergedError(RuntimeError):
    """Raised when the inversion loss becomes non-finite.

    Carries the per-step loss trace up to the failure for diagnosis.
    """

    def __init__(self, step: int, loss: float, trace):
        self.step = step
        self.loss = loss
        self.trace = list(trace)
        super().__init__(f"non-finite loss {loss} at step {step}; trace={self.trace[-5:]}")


@dataclass(frozen=True)
class InversionConfig:
    """Optimization settings shared by both inversion routes."""

    mode: str = "ldm"  # "ldm" or "decoder"
    steps: int = 600
    lr: float = 0.07
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_perc: float = 1.0
    lambda_mae: float = 1.0
    t_infer: int = 46
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("ldm", "decoder"):
            raise ValueError(f"mode must be 'ldm' or 'decoder', got {self.mode!r}")
        if self.steps < 1:
            raise ValueError("step count must be >= 1")
        if self.lr <= 0:
            raise ValueError("step size must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.lambda_perc < 0 or self.lambda_mae < 0:
            raise ValueError("loss weights must be non-negative")
        if self.t_infer < 1:
            raise ValueError("t_infer must be >= 1")


@dataclass(frozen=True)
class InversionResult:
    """Best-loss latent(s), reconstruction, and optimization trace."""

    latent: Latent
    conditioning: Optional[Conditioning]
    volume: Volume
    loss_trace: np.ndarray
    best_step: int
    mode: str
    meta: dict = field(default_factory=dict)


def reconstruction_loss(xhat, observed, spec: CorruptionSpec, lambda_perc: float = 1.0, lambda_mae: float = 1.0, perceptual=None):
    """Corrupted-domain loss between a candidate volume and the observation.

    ``observed`` must already be in the operator's range (masked
    representation on the full grid). The L1 term is the mean absolute
    difference over the full grid; the perceptual term is evaluated by the
    supplied callable on the corrupted pair. Returns a torch scalar when
    given tensors (differentiable in ``xhat``), else a float.
    """
    if lambda_perc < 0 or lambda_mae < 0:
        raise ValueError("loss weights must be non-negative")
    want_float = not isinstance(xhat, torch.Tensor)
    if isinstance(xhat, Volume):
        xhat = xhat.data
    if isinstance(observed, Volume):
        observed = observed.data
    x = xhat if isinstance(xhat, torch.Tensor) else torch.from_numpy(np.array(xhat, dtype=np.float64))
    y = observed if isinstance(observed, torch.Tensor) else torch.from_numpy(np.array(observed, dtype=np.float64))
    if tuple(x.shape) != tuple(y.shape):
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    fx = apply_corruption(spec, x)
    loss = lambda_mae * torch.mean(torch.abs(fx - y))
    if lambda_perc != 0.0:
        if perceptual is None:
            raise ValueError("lambda_perc > 0 requires a perceptual callable")
        loss = loss + lambda_perc * perceptual(fx, y)
    return float(loss) if want_float else loss


def generate_volume_t(ae: VolumeAutoencoder, denoiser: ConditionalDenoiser, schedule: NoiseSchedule, z_terminal: torch.Tensor, cond, subseq: TimestepSubsequence) -> torch.Tensor:
    """Differentiable terminal-latent -> volume map: decode(DDIM(...))."""
    z0 = ddim_sample(denoiser, schedule, z_terminal, cond, subseq)
    return ae.decode_t(z0 / denoiser.latent_scale)


def generate_volume(ae, denoiser, schedule, z_terminal, cond, subseq, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Non-differentiable convenience wrapper returning a Volume."""
    zt = z_terminal.data if isinstance(z_terminal, Latent) else z_terminal
    zt = zt if isinstance(zt, torch.Tensor) else torch.from_numpy(np.array(zt, dtype=np.float64))
    with torch.no_grad():
        x = generate_volume_t(ae, denoiser, schedule, zt, cond, subseq)
    return Volume(data=x.numpy(), spacing=spacing)


def mean_latent(denoiser: ConditionalDenoiser, schedule: NoiseSchedule, cond, subseq: TimestepSubsequence, num_samples: int, seed: int = 0, batch_size: int = 64) -> torch.Tensor:
    """Average of deterministic samples from i.i.d. standard-normal terminals.

    Deterministic given the seed (and batch size). Returned in the
    denoiser's scaled latent space; divide by ``denoiser.latent_scale``
    before decoding.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    shape = denoiser.config.latent_shape
    total = torch.zeros((1, 1) + shape, dtype=torch.float64)
    done = 0
    with torch.no_grad():
        while done < num_samples:
            b = min(batch_size, num_samples - done)
            z_term = torch.randn((b, 1) + shape, generator=gen, dtype=torch.float64)
            cond_b = cond.values if isinstance(cond, Conditioning) else cond
            cond_b = torch.from_numpy(np.array(cond_b, dtype=np.float64))[None, :].expand(b, -1)
            z0 = ddim_sample(denoiser, schedule, z_term, cond_b, subseq)
            total = total + z0.sum(dim=0, keepdim=True)
            done += b
    return (total / num_samples)[0, 0]


def _check_observed(ae: VolumeAutoencoder, observed: Volume) -> torch.Tensor:
    if tuple(observed.shape) != ae.config.volume_shape:
        raise ValueError(f"observed shape {observed.shape} != model volume shape {ae.config.volume_shape}")
    return torch.from_numpy(np.array(observed.data, dtype=np.float64))


def _optimize(params, closure, cfg: InversionConfig):
    """Adam loop tracking the best (lowest-loss) iterate.

    The loss of iterate j is evaluated before its update, so the trace has
    exactly ``cfg.steps`` entries and the best iterate is chosen among the
    evaluated ones.
    """
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    trace = []
    best_loss = math.inf
    best_step = -1
    best_state = None
    for step in range(cfg.steps):
        loss = closure()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise InversionDivergedError(step, value, trace)
        trace.append(value)
        if value < best_loss:
            best_loss = value
            best_step = step
            best_state = [p.detach().clone() for p in params]
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            for p in params:
                if getattr(p, "_clamp_unit", False):
                    p.clamp_(0.0, 1.0)
    return np.asarray(trace, dtype=np.float64), best_step, best_state


def invert_ldm(ae: VolumeAutoencoder, denoiser: ConditionalDenoiser, schedule: NoiseSchedule, observed: Volume, spec: CorruptionSpec, cfg: InversionConfig) -> InversionResult:
    """Reconstruct by optimizing the terminal noise code and conditioning.

    The terminal code starts from a seeded standard-normal draw and the
    conditioning at 0.5 per entry; every step runs the full deterministic
    chain plus decoder, evaluates the corrupted-domain loss against
    ``observed``, and applies an Adam update to both, clamping the
    conditioning back to [0, 1]. Deterministic given ``cfg.seed``.
    """
    if cfg.mode != "ldm":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'ldm'")
    target = _check_observed(ae, observed)
    subseq = TimestepSubsequence.evenly_spaced(schedule.t_train, cfg.t_infer)
    gen = torch.Generator().manual_seed(cfg.seed)
    z_term = torch.randn(denoiser.config.latent_shape, generator=gen, dtype=torch.float64, requires_grad=True)
    cond = torch.full((denoiser.config.cond_dim,), 0.5, dtype=torch.float64, requires_grad=True)
    cond._clamp_unit = True

    def closure():
        x = generate_volume_t(ae, denoiser, schedule, z_term, cond, subseq)
        return reconstruction_loss(x, target, spec, cfg.lambda_perc, cfg.lambda_mae, perceptual=ae.perceptual_t)

    trace, best_step, (best_z, best_cond) = _optimize([z_term, cond], closure, cfg)
    with torch.no_grad():
        x_best = generate_volume_t(ae, denoiser, schedule, best_z, best_cond, subseq)
    return InversionResult(
        latent=Latent(data=best_z.numpy(), role="terminal"),
        conditioning=Conditioning(best_cond.numpy()),
        volume=Volume(data=x_best.numpy(), spacing=observed.spacing),
        loss_trace=trace,
        best_step=best_step,
        mode="ldm",
        meta={"seed": cfg.seed, "t_infer": cfg.t_infer, "final_loss": float(trace[best_step])},
    )


def invert_decoder(ae: VolumeAutoencoder, observed: Volume, spec: CorruptionSpec, cfg: InversionConfig, z_init) -> InversionResult:
    """Reconstruct by optimizing a clean latent through the decoder alone.

    ``z_init`` is the starting latent in decoder space (typically the mean
    latent code divided by the denoiser's latent scale). No conditioning
    and no sampling chain are involved.
    """
    if cfg.mode != "decoder":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'decoder'")
    target = _check_observed(ae, observed)
    if isinstance(z_init, Latent):
        z_init = z_init.data
    if isinstance(z_init, torch.Tensor):
        z0 = z_init.detach().to(torch.float64).clone().requires_grad_(True)
    else:
        z0 = torch.from_numpy(np.array(z_init, dtype=np.float64)).requires_grad_(True)
    if tuple(z0.shape) != ae.config.latent_shape:
        raise ValueError(f"z_init shape {tuple(z0.shape)} != latent shape {ae.config.latent_shape}")

    def closure():
        return reconstruction_loss(ae.decode_t(z0), target, spec, cfg.lambda_perc, cfg.lambda_mae, perceptual=ae.perceptual_t)

    trace, best_step, (best_z,) = _optimize([z0], closure, cfg)
    with torch.no_grad():
        x_best = ae.decode_t(best_z)
    return InversionResult(
        latent=Latent(data=best_z.numpy(), role="clean"),
        conditioning=None,
        volume=Volume(data=x_best.numpy(), spacing=observed.spacing),
        loss_trace=trace,
        best_step=best_step,
        mode="decoder",
        meta={"seed": cfg.seed, "final_loss": float(trace[best_step])},
    )
