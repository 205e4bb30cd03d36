"""2-D frequency masks and the frequency-blended latent initialization.

The initial latent is built by mixing the high-frequency spectrum of a noise
draw with the low-frequency spectrum of a reference latent,

    x_init = IFFT( high * FFT(noise) + low * FFT(reference) ),

applied per channel. Masks are ideal (hard-cutoff) isotropic filters over
the unshifted FFT grid; the radial coordinate is normalized so that 1.0 sits
at the Nyquist frequency, which keeps the corner bins outside any cutoff in
(0, 1). Transforms use orthonormal scaling in both directions so spatial and
spectral energies agree without extra factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent import Latent, _freeze, require_same_shape

DEFAULT_CUTOFF = 0.25

# Largest tolerated |imag| after the inverse transform. The blended spectrum
# stays Hermitian because the radial masks are symmetric under frequency
# negation, so anything beyond float round-off indicates a bug upstream.
IMAG_RESIDUE_LIMIT = 1e-6


@dataclass(frozen=True, eq=False)
class FrequencyMaskPair:
    """Complementary low-pass / high-pass masks over an H x W FFT grid."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self) -> None:
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.ndim != 2 or low.shape != high.shape:
            raise ValueError("mask pair must be two 2-D arrays of equal shape")
        if low.min() < 0.0 or low.max() > 1.0 or high.min() < 0.0 or high.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        if np.max(np.abs(low + high - 1.0)) != 0.0:
            raise ValueError("masks must be exactly complementary (low + high == 1)")
        object.__setattr__(self, "low", _freeze(low))
        object.__setattr__(self, "high", _freeze(high))

    @property
    def shape(self) -> tuple[int, int]:
        return self.low.shape


def radial_frequency_grid(height: int, width: int) -> np.ndarray:
    """Nyquist-normalized radial frequency of each unshifted FFT bin."""
    fy = np.fft.fftfreq(height)
    fx = np.fft.fftfreq(width)
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2) / 0.5


def make_frequency_masks(height: int, width: int, cutoff: float = DEFAULT_CUTOFF) -> FrequencyMaskPair:
    """Ideal isotropic low/high mask pair with the given normalized cutoff.

    A bin belongs to the low mask iff its Nyquist-normalized radial
    frequency is <= cutoff; the zero-frequency bin is always low.
    """
    if height < 2 or width < 2:
        raise ValueError(f"mask grid must be at least 2x2, got {height}x{width}")
    if not 0.0 < cutoff < 1.0:
        raise ValueError(f"cutoff must lie in (0, 1), got {cutoff}")
    radius = radial_frequency_grid(height, width)
    low = (radius <= cutoff).astype(np.float64)
    return FrequencyMaskPair(low=low, high=1.0 - low)


def frequency_blend_init(eps: Latent, x_r: Latent, masks: FrequencyMaskPair) -> Latent:
    """Blend noise and reference spectra into one real-valued latent.

    Per channel the output spectrum is ``high * F(eps) + low * F(x_r)`` with
    orthonormal FFTs. The inverse transform must come back real; an imaginary
    residue above ``IMAG_RESIDUE_LIMIT`` raises instead of being discarded
    silently.
    """
    require_same_shape(eps, x_r, "noise and reference latents")
    if masks.shape != (eps.height, eps.width):
        raise ValueError(
            f"mask shape {masks.shape} does not match latent spatial dims "
            f"{(eps.height, eps.width)}"
        )
    out = np.empty_like(eps.data)
    worst_residue = 0.0
    for c in range(eps.channels):
        spec = masks.high * np.fft.fft2(eps.data[c], norm="ortho")
        spec += masks.low * np.fft.fft2(x_r.data[c], norm="ortho")
        spatial = np.fft.ifft2(spec, norm="ortho")
        worst_residue = max(worst_residue, float(np.abs(spatial.imag).max()))
        out[c] = spatial.real
    if worst_residue >= IMAG_RESIDUE_LIMIT:
        raise RuntimeError(
            f"blended spectrum lost Hermitian symmetry (imag residue {worst_residue:.3e})"
        )
    return Latent(out)
