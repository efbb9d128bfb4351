"""Volume quality metrics (PSNR, 3D SSIM) and the cubic slice-fill baseline.

SSIM uses the canonical Gaussian-window formulation extended to 3D
(sigma=1.5, 11-wide window, stabilizers C1=(0.01*peak)^2, C2=(0.03*peak)^2)
with the local map computed in 'valid' mode and averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import correlate

from .volume import Volume


def _as_array(v) -> np.ndarray:
    if isinstance(v, Volume):
        return np.asarray(v.data, dtype=np.float64)
    return np.asarray(v, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB: 10*log10(peak^2 / MSE).

    Identical inputs are reported as the +inf sentinel.
    """
    x = _as_array(a)
    y = _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized separable 3D Gaussian window."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {size}")
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return g[:, None, None] * g[None, :, None] * g[None, None, :]


def ssim(a, b, window_size: int = 11, sigma: float = 1.5, peak: float = 1.0) -> float:
    """Mean structural similarity over a 3D Gaussian sliding window.

    The local SSIM map is evaluated wherever the window fully fits inside
    the volume and averaged. ssim(a, a) == 1 for any a.
    """
    x = _as_array(a)
    y = _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if any(s < window_size for s in x.shape):
        raise ValueError(f"window size {window_size} exceeds volume shape {x.shape}")
    kernel = gaussian_window(window_size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def win(arr):
        return correlate(arr, kernel, mode="valid")

    mu_x = win(x)
    mu_y = win(y)
    var_x = win(x * x) - mu_x * mu_x
    var_y = win(y * y) - mu_y * mu_y
    cov = win(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def _retained_indices(mask: np.ndarray, axis: int) -> np.ndarray:
    other = tuple(ax for ax in range(3) if ax != axis)
    per_slice = mask.sum(axis=other)
    full = math.prod(mask.shape[ax] for ax in other)
    retained = np.nonzero(per_slice == full)[0]
    partial = np.nonzero((per_slice > 0) & (per_slice < full))[0]
    if partial.size:
        raise ValueError("mask is not a slice pattern: partially observed slices present")
    return retained


def cubic_interpolate(masked: Volume, mask: np.ndarray, axis: int) -> Volume:
    """Fill missing slices by 1D cubic-spline interpolation along an axis.

    Retained slices (all-ones in the mask) are preserved exactly; missing
    slices are interpolated through the retained slice values with a
    not-a-knot cubic spline, which reproduces polynomial profiles up to
    degree 3 exactly. Slices beyond the outermost retained indices are
    filled by the spline's polynomial extrapolation.
    """
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != masked.shape:
        raise ValueError(f"mask shape {m.shape} != volume shape {masked.shape}")
    retained = _retained_indices(m, axis)
    if retained.size < 2:
        raise ValueError(f"need at least 2 retained slices, got {retained.size}")
    data = np.moveaxis(np.asarray(masked.data, dtype=np.float64), axis, 0)
    spline = CubicSpline(retained, data[retained], axis=0)
    out = spline(np.arange(data.shape[0]))
    out[retained] = data[retained]
    return masked.with_data(np.moveaxis(out, 0, axis))


def central_crop(arr: np.ndarray, size) -> np.ndarray:
    """Centered crop of the trailing three dimensions."""
    if np.isscalar(size):
        size = (int(size),) * 3
    size = tuple(int(s) for s in size)
    if any(s <= 0 or s > d for s, d in zip(size, arr.shape[-3:])):
        raise ValueError(f"crop size {size} invalid for shape {arr.shape}")
    starts = [(d - s) // 2 for d, s in zip(arr.shape[-3:], size)]
    sl = tuple(slice(st, st + s) for st, s in zip(starts, size))
    return arr[(Ellipsis,) + sl]


def _mean_se(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return mean, se


@dataclass(frozen=True)
class MetricReport:
    """Per-case PSNR/SSIM with cohort mean and standard error."""

    method: str
    corruption: str
    psnr_values: tuple
    ssim_values: tuple
    psnr_mean: float
    psnr_se: float
    ssim_mean: float
    ssim_se: float

    @property
    def n(self) -> int:
        return len(self.psnr_values)

    def format_row(self) -> str:
        return (
            f"{self.method:<12s}  SSIM {self.ssim_mean:.4f} +/- {self.ssim_se:.4f}  "
            f"PSNR {self.psnr_mean:.2f} +/- {self.psnr_se:.2f}"
        )


def evaluate_cohort(truths, reconstructions, region=24, method: str = "", corruption: str = "") -> MetricReport:
    """Compute PSNR and SSIM over paired volumes inside a central crop.

    ``region`` is the edge length (or 3-tuple) of the centered evaluation
    crop. Cohort statistics are mean and standard error (sample std / sqrt(n);
    zero for a single case).
    """
    truths = list(truths)
    reconstructions = list(reconstructions)
    if len(truths) != len(reconstructions):
        raise ValueError(f"paired lists differ in length: {len(truths)} vs {len(reconstructions)}")
    if not truths:
        raise ValueError("cohort must contain at least one pair")
    psnr_vals = []
    ssim_vals = []
    for t, r in zip(truths, reconstructions):
        tc = central_crop(_as_array(t), region)
        rc = central_crop(_as_array(r), region)
        psnr_vals.append(psnr(tc, rc))
        ssim_vals.append(ssim(tc, rc))
    p_mean, p_se = _mean_se(psnr_vals)
    s_mean, s_se = _mean_se(ssim_vals)
    return MetricReport(
        method=method,
        corruption=corruption,
        psnr_values=tuple(psnr_vals),
        ssim_values=tuple(ssim_vals),
        psnr_mean=p_mean,
        psnr_se=p_se,
        ssim_mean=s_mean,
        ssim_se=s_se,
    )
