"""64-bit DCT perceptual hashes and the hash-corpus container.

Recipe (pinned so the corpus file format stays stable): area-average the
grayscale image to 32x32, take the orthonormal 2-D DCT-II, keep the top-left
8x8 low-frequency block in row-major order, and set bit i when coefficient i
exceeds the median of the 63 non-DC coefficients. The DC bit (i = 0) is
always 0, and bit 0 of the block maps to the most significant bit of the
hash. Positive rescaling of the image leaves the hash unchanged.

Corpus container: magic ``CAPPH1\\0\\0``, little-endian uint64 count, then
count little-endian uint64 hashes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.fft import dctn

from .errors import FormatError

CAPPH_MAGIC = b"CAPPH1\x00\x00"
HASH_BITS = 64
HALF_MAX_DISTANCE = 32.0
_RESIZE_SIDE = 32
_BLOCK = 8


def area_resize(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Exact box-average resize of a 2-D array (fractional bins supported)."""
    src = np.asarray(arr, dtype=np.float64)
    if src.ndim != 2:
        raise ValueError("area resize expects a 2-D array")
    out_h, out_w = out_shape

    def weights(n_in: int, n_out: int) -> np.ndarray:
        w = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            first, last = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(first, min(last, n_in)):
                w[i, j] = min(hi, j + 1) - max(lo, j)
        return w / w.sum(axis=1, keepdims=True)

    return weights(src.shape[0], out_h) @ src @ weights(src.shape[1], out_w).T


def phash64(image: np.ndarray) -> int:
    """64-bit perceptual hash of a grayscale 2-D array (at least 32x32)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("phash expects a 2-D grayscale array")
    if img.shape[0] < _RESIZE_SIDE or img.shape[1] < _RESIZE_SIDE:
        raise ValueError(f"phash needs at least {_RESIZE_SIDE}x{_RESIZE_SIDE} input, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("phash input must be finite")
    small = area_resize(img, (_RESIZE_SIDE, _RESIZE_SIDE))
    coeffs = dctn(small, norm="ortho")
    block = coeffs[:_BLOCK, :_BLOCK].reshape(-1)
    median = float(np.median(block[1:]))
    # scale-relative epsilon: float dust around the median (e.g. the all-zero
    # AC block of a constant image) must not set bits, and scaling the whole
    # block by a > 0 scales the epsilon identically, preserving invariance
    eps = 1e-12 * float(np.abs(block).max())
    value = 0
    for i in range(1, HASH_BITS):
        if block[i] > median + eps:
            value |= 1 << (HASH_BITS - 1 - i)
    return value


def hamming64(a: int, b: int) -> int:
    return ((a ^ b) & (2**HASH_BITS - 1)).bit_count()


def uniqueness_score(h: int, corpus: list[int] | tuple[int, ...] | np.ndarray) -> float:
    """Minimum half-max-normalized Hamming distance to the corpus, in [0, 1].

    Distances are divided by 32 (half of the 64-bit maximum) and clipped, so
    anything at least 32 bits away saturates at 1.
    """
    hashes = list(corpus)
    if len(hashes) == 0:
        raise ValueError("uniqueness needs a non-empty hash corpus")
    return min(min(hamming64(h, int(other)) / HALF_MAX_DISTANCE, 1.0) for other in hashes)


def save_phash_corpus(hashes: list[int] | tuple[int, ...], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(CAPPH_MAGIC)
        fh.write(struct.pack("<Q", len(hashes)))
        for h in hashes:
            fh.write(struct.pack("<Q", int(h) & (2**HASH_BITS - 1)))


def load_phash_corpus(path: str | Path) -> list[int]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CAPPH_MAGIC) + 8:
        raise FormatError(f"{path}: truncated hash corpus")
    if raw[: len(CAPPH_MAGIC)] != CAPPH_MAGIC:
        raise FormatError(f"{path}: bad magic for hash corpus")
    (count,) = struct.unpack_from("<Q", raw, len(CAPPH_MAGIC))
    expected = len(CAPPH_MAGIC) + 8 + 8 * count
    if len(raw) != expected:
        raise FormatError(f"{path}: corpus size mismatch (expected {expected} bytes)")
    return list(struct.unpack_from(f"<{count}Q", raw, len(CAPPH_MAGIC) + 8))


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Collapse an (H, W) or (H, W, 3) array to grayscale luma."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"cannot convert array of shape {arr.shape} to grayscale")


def load_image_gray(path: str | Path) -> np.ndarray:
    """Load an image file as a float grayscale array (0..255)."""
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)
