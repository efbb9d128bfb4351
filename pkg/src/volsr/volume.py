"""Core volumetric data types, phantom generation, and file I/O.

A :class:`Volume` is a 3D scalar intensity grid with physical voxel spacing.
Volumes are immutable after construction and normalized volumes carry
intensities in [0, 1]. The on-disk format is a raw little-endian float array
plus a sidecar JSON header (shape, dtype, spacing, meta), which round-trips
bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

_SUPPORTED_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
_FORMAT_NAME = "volsr-volume"
_FORMAT_VERSION = 1


class VolumeFormatError(ValueError):
    """Raised when a volume file or its header cannot be parsed."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


@dataclass(frozen=True)
class Volume:
    """A 3D scalar intensity grid with voxel spacing in mm.

    Parameters
    ----------
    data : ndarray
        3D float array (D, H, W). Stored read-only.
    spacing : tuple of float
        Positive voxel edge lengths in mm, one per axis.
    meta : dict
        Free-form JSON-serializable annotations.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if any(s <= 0 for s in arr.shape):
            raise ValueError(f"volume dimensions must be positive, got {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        else:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive lengths, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        """New Volume sharing this one's spacing and meta."""
        return Volume(data=data, spacing=self.spacing, meta=dict(self.meta))

    def equals(self, other: "Volume") -> bool:
        """Bit-exact equality of data, spacing, and meta."""
        return (
            self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and self.spacing == other.spacing
            and self.meta == other.meta
        )


LATENT_ROLES = ("clean", "noisy", "terminal")


@dataclass(frozen=True)
class Latent:
    """A 3D real-valued array in the autoencoder's latent space.

    The role flag records what the values represent: a clean code z_0, a
    partially noised z_t, or a terminal noise code z_T.
    """

    data: np.ndarray
    role: str = "clean"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64).copy()
        if arr.ndim != 3:
            raise ValueError(f"latent data must be 3D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        if self.role not in LATENT_ROLES:
            raise ValueError(f"latent role must be one of {LATENT_ROLES}, got {self.role!r}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class Conditioning:
    """Vector of scalar covariates in [0, 1] injected into the denoiser."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).reshape(-1).copy()
        if arr.size == 0:
            raise ValueError("conditioning vector must be nonempty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("conditioning values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"conditioning values must lie in [0, 1], got {arr}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size

    @staticmethod
    def constant(value: float, dim: int = 4) -> "Conditioning":
        return Conditioning(np.full(dim, value, dtype=np.float64))


def normalize_intensity(v: Volume) -> Volume:
    """Affinely rescale intensities so min maps to 0 and max to 1.

    Rank order is preserved. Idempotent on already-normalized volumes.

    Raises
    ------
    ValueError
        If the volume is constant ("degenerate intensity range") or contains
        non-finite values.
    """
    data = v.data
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite intensities")
    lo = data.min()
    hi = data.max()
    if hi <= lo:
        raise ValueError("degenerate intensity range: volume is constant")
    return v.with_data((data - lo) / (hi - lo))


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a synthetic multi-ellipsoid volume.

    Phantom generation is a pure function of the spec: the same spec (and in
    particular the same seed) always produces a bit-identical volume.
    ``smooth_sigma`` may be a scalar or a per-axis triple (anisotropic
    smoothing, e.g. sharper through-plane than in-plane).
    """

    shape: tuple = (32, 32, 32)
    count_range: tuple = (3, 8)
    intensity_bands: tuple = ((0.25, 0.45), (0.55, 0.75), (0.8, 1.0))
    smooth_sigma: object = 1.2
    band_axis: Optional[int] = None  # modulate intensity by strata along this axis
    band_count_range: tuple = (2, 4)
    band_level_range: tuple = (0.45, 1.0)
    band_sigma: float = 0.3
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or any(s <= 0 for s in shape):
            raise ValueError(f"phantom grid size must be three positive ints, got {self.shape}")
        object.__setattr__(self, "shape", shape)
        lo, hi = self.count_range
        if not (1 <= lo <= hi):
            raise ValueError(f"invalid ellipsoid count range {self.count_range}")
        object.__setattr__(self, "count_range", (int(lo), int(hi)))
        bands = tuple((float(a), float(b)) for a, b in self.intensity_bands)
        if not bands or any(not (0.0 <= a <= b <= 1.0) for a, b in bands):
            raise ValueError(f"intensity bands must be nested in [0, 1], got {self.intensity_bands}")
        object.__setattr__(self, "intensity_bands", bands)
        sigma = self.smooth_sigma
        sigma = (float(sigma),) * 3 if np.isscalar(sigma) else tuple(float(s) for s in sigma)
        if len(sigma) != 3 or any(s < 0 for s in sigma):
            raise ValueError(f"smooth_sigma must be a non-negative scalar or triple, got {self.smooth_sigma}")
        object.__setattr__(self, "smooth_sigma", sigma)
        if self.band_axis is not None:
            if self.band_axis not in (0, 1, 2):
                raise ValueError(f"band_axis must be 0, 1, 2, or None, got {self.band_axis}")
            blo, bhi = self.band_count_range
            if not (1 <= blo <= bhi):
                raise ValueError(f"invalid band count range {self.band_count_range}")
            object.__setattr__(self, "band_count_range", (int(blo), int(bhi)))
            levels = tuple(float(x) for x in self.band_level_range)
            if not (0.0 < levels[0] <= levels[1] <= 1.0):
                raise ValueError(f"band levels must be nested in (0, 1], got {self.band_level_range}")
            object.__setattr__(self, "band_level_range", levels)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    # QR of a Gaussian matrix with sign-fixed diagonal gives a uniform rotation.
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def make_phantom(spec: PhantomSpec) -> Volume:
    """Generate a smooth multi-ellipsoid phantom volume in [0, 1].

    Ellipsoids are painted back-to-front at intensities drawn from the spec's
    bands, the result is Gaussian-smoothed and affinely normalized to [0, 1].
    Per-phantom covariates (ellipsoid count, foreground fraction, mean
    intensity, mean ellipsoid extent — all scaled to [0, 1]) are stored under
    ``meta["covariates"]`` for use as denoiser conditioning.
    """
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    lo, hi = spec.count_range
    n_ell = int(rng.integers(lo, hi + 1))

    grid = np.stack(
        np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"),
        axis=-1,
    )
    vol = np.zeros(shape, dtype=np.float64)
    extents = []
    for _ in range(n_ell):
        center = np.array([rng.uniform(0.25 * s, 0.75 * s) for s in shape])
        semi = np.array([rng.uniform(0.10 * s, 0.28 * s) for s in shape])
        rot = _random_rotation(rng)
        band = spec.intensity_bands[int(rng.integers(0, len(spec.intensity_bands)))]
        intensity = rng.uniform(*band)
        rel = (grid - center) @ rot.T
        q = np.sum((rel / semi) ** 2, axis=-1)
        vol[q <= 1.0] = intensity
        extents.append(float(np.mean(semi / np.asarray(shape))))

    if any(s > 0 for s in spec.smooth_sigma):
        vol = gaussian_filter(vol, sigma=spec.smooth_sigma)

    if spec.band_axis is not None:
        # Multiplicative strata applied after smoothing keep the band steps
        # sharp along the axis while leaving the in-plane geometry smooth.
        length = shape[spec.band_axis]
        n_bands = int(rng.integers(spec.band_count_range[0], spec.band_count_range[1] + 1))
        n_cuts = min(n_bands - 1, max(length - 4, 0))
        cuts = np.sort(rng.choice(np.arange(2, length - 2), size=n_cuts, replace=False)) if n_cuts else []
        profile = np.empty(length)
        edges = [0, *cuts, length]
        for lo_edge, hi_edge in zip(edges[:-1], edges[1:]):
            profile[lo_edge:hi_edge] = rng.uniform(*spec.band_level_range)
        if spec.band_sigma > 0:
            profile = gaussian_filter1d(profile, spec.band_sigma)
        expand = [1, 1, 1]
        expand[spec.band_axis] = length
        vol = vol * profile.reshape(expand)

    span = vol.max() - vol.min()
    if span <= 0:
        # All ellipsoids fell outside the grid (possible for tiny grids); use
        # a deterministic low-frequency fallback so the contract still holds.
        vol = np.sin(grid[..., 0] / max(shape[0], 2)) + np.sin(grid[..., 1] / max(shape[1], 2))
    vol = (vol - vol.min()) / (vol.max() - vol.min())

    count_span = max(hi - lo, 1)
    covariates = [
        (n_ell - lo) / count_span,
        float(np.mean(vol > 0.5)),
        float(np.mean(vol)),
        min(1.0, float(np.mean(extents)) / 0.3) if extents else 0.0,
    ]
    meta = {
        "phantom_seed": int(spec.seed),
        "ellipsoids": n_ell,
        "covariates": [float(c) for c in covariates],
    }
    return Volume(data=vol, spacing=spec.spacing, meta=meta)


def conditioning_from_volume(v: Volume, dim: int = 4) -> Conditioning:
    """Read the covariate vector stored in a phantom's meta."""
    cov = v.meta.get("covariates")
    if cov is None:
        raise ValueError("volume meta carries no 'covariates' entry")
    arr = np.asarray(cov, dtype=np.float64)
    if arr.size != dim:
        raise ValueError(f"expected {dim} covariates, got {arr.size}")
    return Conditioning(arr)


def _header_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_volume(v: Volume, path) -> Path:
    """Write a volume as raw little-endian floats plus a JSON sidecar header.

    ``path`` names the raw data file; the header is written next to it as
    ``<name>.json``. The volume's own dtype (float32 or float64) is preserved
    so that ``load_volume(save_volume(v)) == v`` bit-exactly.
    """
    p = Path(path)
    dtype_code = "<f4" if v.data.dtype == np.float32 else "<f8"
    header = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "dtype": dtype_code,
        "shape": list(v.data.shape),
        "spacing": list(v.spacing),
        "meta": v.meta,
    }
    try:
        header_text = json.dumps(header, sort_keys=True, indent=1)
    except TypeError as exc:
        raise ValueError(f"volume meta is not JSON-serializable: {exc}") from exc
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(np.ascontiguousarray(v.data, dtype=_SUPPORTED_DTYPES[dtype_code]).tobytes())
    _header_path(p).write_text(header_text + "\n")
    return p


def load_volume(path) -> Volume:
    """Load a volume saved by :func:`save_volume`.

    Raises
    ------
    VolumeFormatError
        On missing/malformed header, unknown format or dtype, or a data file
        whose size does not match the declared shape (e.g. truncated).
    """
    p = Path(path)
    hp = _header_path(p)
    if not p.exists():
        raise VolumeFormatError(p, "data file does not exist")
    if not hp.exists():
        raise VolumeFormatError(hp, "header file does not exist")
    try:
        header = json.loads(hp.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(hp, f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != _FORMAT_NAME:
        raise VolumeFormatError(hp, "not a volume header")
    if header.get("version") != _FORMAT_VERSION:
        raise VolumeFormatError(hp, f"unsupported format version {header.get('version')!r}")
    dtype_code = header.get("dtype")
    if dtype_code not in _SUPPORTED_DTYPES:
        raise VolumeFormatError(hp, f"unsupported dtype {dtype_code!r}")
    try:
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        meta = header.get("meta", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(hp, f"malformed header fields: {exc}") from exc
    dtype = _SUPPORTED_DTYPES[dtype_code]
    raw = p.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(p, f"data file has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return Volume(data=data, spacing=spacing, meta=meta)


def save_latent(z: Latent, path) -> Path:
    """Persist a latent using the raw-plus-header volume format."""
    v = Volume(data=z.data, spacing=(1.0, 1.0, 1.0), meta={"kind": "latent", "role": z.role})
    return save_volume(v, path)


def load_latent(path) -> Latent:
    v = load_volume(path)
    if v.meta.get("kind") != "latent":
        raise VolumeFormatError(path, "file does not hold a latent")
    return Latent(data=v.data, role=v.meta.get("role", "clean"))
