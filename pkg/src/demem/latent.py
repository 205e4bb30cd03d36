"""Latent arrays, soft spatial maps, and the flat binary container format.

A latent is a channels-by-height-by-width block of real values; everything in
the pipeline (states, noise, clean predictions, reference features) is one.
Arrays are stored float64 and marked read-only so value objects stay
immutable after construction.

Serialization container: magic ``CAPLAT1\\0``, three little-endian uint32
dims (C, H, W), then C*H*W little-endian float32 values in row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

CAPLAT_MAGIC = b"CAPLAT1\x00"


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Latent:
    """An immutable C x H x W real-valued latent block."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"latent must be 3-D (C,H,W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"latent dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, shape: tuple[int, int, int]) -> "Latent":
        return cls(np.zeros(shape))

    def allclose(self, other: "Latent", atol: float = 1e-12) -> bool:
        return self.shape == other.shape and bool(
            np.allclose(self.data, other.data, rtol=0.0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class SoftMap:
    """A 2-D spatial map with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"soft map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("soft map contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("soft map values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def require_same_shape(a: Latent, b: Latent, what: str = "latents") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} must share a shape: {a.shape} vs {b.shape}")


def save_latent(latent: Latent, path: str | Path) -> None:
    """Write a latent to the flat binary container."""
    c, h, w = latent.shape
    payload = latent.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(CAPLAT_MAGIC)
        fh.write(struct.pack("<III", c, h, w))
        fh.write(payload)


def load_latent(path: str | Path) -> Latent:
    """Read a latent from the flat binary container."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CAPLAT_MAGIC) + 12:
        raise FormatError(f"{path}: truncated latent container")
    if raw[: len(CAPLAT_MAGIC)] != CAPLAT_MAGIC:
        raise FormatError(f"{path}: bad magic for latent container")
    c, h, w = struct.unpack_from("<III", raw, len(CAPLAT_MAGIC))
    expected = len(CAPLAT_MAGIC) + 12 + 4 * c * h * w
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch (expected {expected} bytes, got {len(raw)})"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=len(CAPLAT_MAGIC) + 12)
    return Latent(flat.astype(np.float64).reshape(c, h, w))


def save_softmap(softmap: SoftMap, path: str | Path) -> None:
    save_latent(Latent(softmap.values[None, :, :]), path)


def load_softmap(path: str | Path) -> SoftMap:
    latent = load_latent(path)
    if latent.channels != 1:
        raise FormatError(f"{path}: expected a single-channel map container")
    # float32 round-trip can land a hair outside [0,1]; clip before validating
    return SoftMap(np.clip(latent.data[0], 0.0, 1.0))


def standardize_channels(latent: Latent, eps: float = 1e-12) -> Latent:
    """Shift/scale each channel to zero mean and unit variance.

    Channels with (near-)zero variance are only centered, never divided.
    """
    out = np.empty_like(latent.data)
    for c in range(latent.channels):
        chan = latent.data[c]
        centered = chan - chan.mean()
        std = centered.std()
        out[c] = centered / std if std > eps else centered
    return Latent(out)


def _convolve1d_replicate(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr)
    for k, weight in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(k, k + arr.shape[axis])
        out += weight * padded[tuple(sl)]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D normalized Gaussian taps with radius ceil(3*sigma)."""
    sigma = max(float(sigma), 1e-3)
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def gaussian_smooth(softmap: SoftMap, sigma: float) -> SoftMap:
    """Separable Gaussian blur with replicated edges.

    The kernel radius is ceil(3*sigma) and sigma is clamped to a 1e-3 floor.
    A convolution with a kernel that sums to one cannot leave [0, 1]; values
    are only rescaled by the maximum if float error pushes past 1.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kernel = gaussian_kernel(sigma)
    out = _convolve1d_replicate(softmap.values, kernel, axis=0)
    out = _convolve1d_replicate(out, kernel, axis=1)
    out = np.clip(out, 0.0, None)
    peak = out.max() if out.size else 0.0
    if peak > 1.0:
        out = out / peak
    return SoftMap(out)
