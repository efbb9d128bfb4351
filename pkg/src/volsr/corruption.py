"""Known-a-priori corruption operators applied to high-resolution volumes.

Three operator families are supported:

* ``slice_mask`` — thick-slice acquisition: keep one slice in every ``k``
  along an axis, zero the rest (missing slices stay on the full-resolution
  grid as zeros, so the operator applies identically to generated volumes
  and to stored inputs).
* ``region_mask`` — arbitrary binary region masks (tumour/lesion filling).
* ``kspace_mask`` — Fourier-domain undersampling: transform, keep a binary
  set of frequency bins, transform back, take the real part.

All operators are linear, idempotent projections and accept either numpy
arrays, torch tensors (differentiable), or :class:`~volsr.volume.Volume`
values; batch dimensions ahead of the trailing 3 spatial dims broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .volume import Volume

KINDS = ("slice_mask", "region_mask", "kspace_mask")


def _is_binary(arr: np.ndarray) -> bool:
    return bool(np.all((arr == 0) | (arr == 1)))


def _reflect_indices(n: int) -> np.ndarray:
    # DFT frequency negation: bin i maps to (-i) mod n.
    return (-np.arange(n)) % n


def hermitian_symmetrize(keep: np.ndarray) -> np.ndarray:
    """OR a binary frequency mask with its reflection about the DC bin.

    A Hermitian-symmetric keep mask makes the image-space operator (with the
    final real-part cast) an exact linear projection on real volumes.
    """
    reflected = keep[np.ix_(*[_reflect_indices(n) for n in keep.shape])]
    return np.maximum(keep, reflected)


@dataclass(frozen=True)
class CorruptionSpec:
    """Declarative description of a corruption operator.

    Use the :func:`slice_spec`, :func:`region_spec`, :func:`kspace_spec`
    constructors rather than instantiating directly.
    """

    kind: str
    axis: int = 0
    k: int = 1
    offset: int = 0
    mask: Optional[np.ndarray] = None  # region mask (image space), binary
    keep: Optional[np.ndarray] = None  # k-space keep mask, binary, symmetric

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "slice_mask":
            if self.axis not in (0, 1, 2):
                raise ValueError(f"axis must be 0, 1, or 2, got {self.axis}")
            if int(self.k) < 1:
                raise ValueError(f"slice factor k must be >= 1, got {self.k}")
            if not (0 <= int(self.offset) < int(self.k)):
                raise ValueError(f"offset must lie in [0, k), got {self.offset}")
            object.__setattr__(self, "k", int(self.k))
            object.__setattr__(self, "offset", int(self.offset))
        elif self.kind == "region_mask":
            if self.mask is None:
                raise ValueError("region_mask spec requires a mask volume")
            m = np.asarray(self.mask, dtype=np.float64)
            if m.ndim != 3:
                raise ValueError("region mask must be 3D")
            if not _is_binary(m):
                raise ValueError("region mask must be binary (0/1)")
            m = m.copy()
            m.flags.writeable = False
            object.__setattr__(self, "mask", m)
        else:  # kspace_mask
            if self.keep is None:
                raise ValueError("kspace_mask spec requires a keep mask")
            kmask = np.asarray(self.keep, dtype=np.float64)
            if kmask.ndim != 3:
                raise ValueError("k-space keep mask must be 3D")
            if not _is_binary(kmask):
                raise ValueError("k-space keep mask must be binary (0/1)")
            kmask = hermitian_symmetrize(kmask)
            kmask.flags.writeable = False
            object.__setattr__(self, "keep", kmask)

    # -- config (de)serialization -------------------------------------------

    def to_config(self) -> dict:
        if self.kind == "slice_mask":
            return {"kind": self.kind, "axis": self.axis, "k": self.k, "offset": self.offset}
        key = "mask" if self.kind == "region_mask" else "keep"
        return {"kind": self.kind, key: getattr(self, key).tolist()}

    @staticmethod
    def from_config(cfg: dict, base_dir=None) -> "CorruptionSpec":
        """Build a spec from a config mapping; mask arrays may be inline
        lists or ``*_path`` references to saved volumes."""
        from .volume import load_volume  # local import to avoid cycle at module load
        from pathlib import Path

        cfg = dict(cfg)
        kind = cfg.get("kind")
        if kind == "slice_mask":
            return slice_spec(
                axis=int(cfg.get("axis", 0)),
                k=int(cfg.get("k", 1)),
                offset=int(cfg.get("offset", 0)),
            )
        for key, maker in (("mask", region_spec), ("keep", kspace_spec)):
            if kind == ("region_mask" if key == "mask" else "kspace_mask"):
                if f"{key}_path" in cfg:
                    path = Path(cfg[f"{key}_path"])
                    if base_dir is not None and not path.is_absolute():
                        path = Path(base_dir) / path
                    arr = load_volume(path).data
                elif key in cfg:
                    arr = np.asarray(cfg[key], dtype=np.float64)
                else:
                    raise ValueError(f"{kind} config requires {key!r} or {key}_path")
                return maker(arr)
        raise ValueError(f"unknown corruption kind {kind!r}")


def slice_spec(axis: int, k: int, offset: int = 0) -> CorruptionSpec:
    return CorruptionSpec(kind="slice_mask", axis=axis, k=k, offset=offset)


def region_spec(mask: np.ndarray) -> CorruptionSpec:
    return CorruptionSpec(kind="region_mask", mask=mask)


def kspace_spec(keep: np.ndarray) -> CorruptionSpec:
    return CorruptionSpec(kind="kspace_mask", keep=keep)


def slice_observation_mask(shape: tuple, axis: int, k: int, offset: int = 0) -> np.ndarray:
    """Binary volume marking the voxels retained by a slice mask."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    if k < 1:
        raise ValueError(f"slice factor k must be >= 1, got {k}")
    if k > shape[axis]:
        raise ValueError(f"slice factor k={k} exceeds axis length {shape[axis]}")
    idx = np.arange(shape[axis])
    line = ((idx - offset) % k == 0).astype(np.float64)
    expand = [1, 1, 1]
    expand[axis] = shape[axis]
    return np.broadcast_to(line.reshape(expand), shape).copy()


def observation_mask(spec: CorruptionSpec, shape: tuple) -> np.ndarray:
    """Image-space binary mask of acquired voxels for masking operators."""
    if spec.kind == "slice_mask":
        return slice_observation_mask(shape, spec.axis, spec.k, spec.offset)
    if spec.kind == "region_mask":
        if spec.mask.shape != tuple(shape):
            raise ValueError(f"mask shape {spec.mask.shape} != volume shape {tuple(shape)}")
        return np.asarray(spec.mask)
    raise ValueError("k-space undersampling has no voxel-space observation mask")


def _apply_mask(arr, mask: np.ndarray):
    if isinstance(arr, torch.Tensor):
        m = torch.from_numpy(np.array(mask)).to(dtype=arr.dtype, device=arr.device)
        return arr * m
    return arr * mask


def _apply_kspace(arr, keep: np.ndarray):
    if isinstance(arr, torch.Tensor):
        km = torch.from_numpy(np.array(keep)).to(dtype=arr.dtype, device=arr.device)
        spec = torch.fft.fftn(arr, dim=(-3, -2, -1))
        return torch.fft.ifftn(spec * km, dim=(-3, -2, -1)).real
    spec = np.fft.fftn(arr, axes=(-3, -2, -1))
    return np.fft.ifftn(spec * keep, axes=(-3, -2, -1)).real


def apply_corruption(spec: CorruptionSpec, x):
    """Apply the operator described by ``spec``.

    ``x`` may be a Volume (a Volume is returned), a numpy array, or a torch
    tensor (gradients flow; the maps are linear). Trailing 3 dims are spatial.
    """
    if isinstance(x, Volume):
        return x.with_data(apply_corruption(spec, x.data))
    shape = tuple(x.shape[-3:])
    if spec.kind == "slice_mask":
        mask = slice_observation_mask(shape, spec.axis, spec.k, spec.offset)
        return _apply_mask(x, mask)
    if spec.kind == "region_mask":
        if spec.mask.shape != shape:
            raise ValueError(f"mask shape {spec.mask.shape} != volume shape {shape}")
        return _apply_mask(x, spec.mask)
    if spec.keep.shape != shape:
        raise ValueError(f"keep mask shape {spec.keep.shape} != frequency grid {shape}")
    return _apply_kspace(x, spec.keep)


def slice_mask(v: Volume, axis: int, k: int, offset: int = 0):
    """Zero all slices except those at indices == offset (mod k) along axis.

    Returns the masked volume and the binary observation mask.
    """
    mask = slice_observation_mask(v.shape, axis, k, offset)
    return v.with_data(v.data * mask), mask


def region_mask(v: Volume, mask: np.ndarray) -> Volume:
    """Elementwise product of a volume with a binary observation mask."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != v.shape:
        raise ValueError(f"mask shape {m.shape} != volume shape {v.shape}")
    if not _is_binary(m):
        raise ValueError("observation mask must be binary (0/1)")
    return v.with_data(v.data * m)


def kspace_undersample(v: Volume, keep: np.ndarray) -> Volume:
    """Mask a volume's discrete Fourier transform and transform back.

    The keep mask is symmetrized about the DC bin first, so the operator is
    an exact linear idempotent projection on real volumes.
    """
    spec = kspace_spec(keep if np.asarray(keep).shape == v.shape else keep)
    if spec.keep.shape != v.shape:
        raise ValueError(f"keep mask shape {spec.keep.shape} != volume shape {v.shape}")
    return v.with_data(_apply_kspace(v.data, spec.keep))
