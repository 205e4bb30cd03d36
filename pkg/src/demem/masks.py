"""Spatial localization of suspect regions: attention aggregation, mask
intersection, and a synthetic stand-in for model-derived anomaly maps.

The real anomaly extraction needs a pretrained backbone, so this module works
against two pluggable soft maps: an anomaly map (high where the generation
looks copied) and a concept map (high where the queried concept lives). Their
product, thresholded at tau, gives the binary injection mask. An all-zero
result falls back to thresholding the anomaly map alone at 0.5; if that is
still empty the caller gets an ``EmptyMaskError`` and decides whether to skip
injection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import EmptyMaskError, FormatError
from .latent import Latent, SoftMap, gaussian_smooth, load_latent

CONCEPT_SMOOTH_SIGMA = 1.5
BE_FALLBACK_THRESHOLD = 0.5
DEFAULT_PATCH_WINDOW = 4

MaskProvider = Callable[[Latent], SoftMap]


@dataclass(frozen=True, eq=False)
class AttentionStack:
    """Cross-attention tensors plus the token/word bookkeeping.

    Each entry is one (layer, timestep) record shaped (heads, queries,
    tokens); entries may differ in head count and query resolution but must
    agree on the token axis. ``token_spans[i]`` is the prompt-word index that
    token i belongs to.
    """

    entries: tuple[np.ndarray, ...]
    token_spans: tuple[int, ...]
    concept_token_ids: frozenset[int]

    def __post_init__(self) -> None:
        if len(self.entries) == 0:
            raise ValueError("attention stack needs at least one entry")
        n_tok = None
        frozen = []
        for entry in self.entries:
            arr = np.asarray(entry, dtype=np.float64)
            if arr.ndim != 3:
                raise ValueError("each attention entry must be (heads, queries, tokens)")
            if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
                raise ValueError("attention values must be finite and non-negative")
            if n_tok is None:
                n_tok = arr.shape[2]
            elif arr.shape[2] != n_tok:
                raise ValueError("entries disagree on the token axis")
            arr.setflags(write=False)
            frozen.append(arr)
        if len(self.token_spans) != n_tok:
            raise ValueError(f"token_spans must cover all {n_tok} tokens")
        if any(s < 0 for s in self.token_spans):
            raise ValueError("token_spans entries must be non-negative word indices")
        bad = [i for i in self.concept_token_ids if not 0 <= i < n_tok]
        if bad:
            raise ValueError(f"concept token ids out of range: {bad}")
        object.__setattr__(self, "entries", tuple(frozen))
        object.__setattr__(self, "token_spans", tuple(int(s) for s in self.token_spans))
        object.__setattr__(self, "concept_token_ids", frozenset(self.concept_token_ids))

    @property
    def n_tokens(self) -> int:
        return len(self.token_spans)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A strictly binary H x W mask plus the threshold that produced it."""

    values: np.ndarray
    tau: float
    fallback_used: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def area_fraction(self) -> float:
        return float(self.values.mean())


def resize_bilinear(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Endpoint-aligned bilinear resize of a 2-D array (identity when sizes match)."""
    src = np.asarray(arr, dtype=np.float64)
    if src.ndim != 2:
        raise ValueError("bilinear resize expects a 2-D array")
    out_h, out_w = out_shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output shape must be positive, got {out_shape}")

    def axis_coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.linspace(0.0, n_in - 1.0, n_out)

    ys = axis_coords(src.shape[0], out_h)
    xs = axis_coords(src.shape[1], out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, src.shape[0] - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, src.shape[1] - 1)
    y1 = np.minimum(y0 + 1, src.shape[0] - 1)
    x1 = np.minimum(x0 + 1, src.shape[1] - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _minmax_unit(arr: np.ndarray) -> np.ndarray:
    # A constant map normalizes to all-ones: uniform concept presence should
    # not erase the mask.
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0.0:
        return np.ones_like(arr)
    return (arr - lo) / (hi - lo)


def aggregate_concept_attention(stack: AttentionStack, out_shape: tuple[int, int]) -> SoftMap:
    """Head/entry/token-averaged concept attention as a smoothed soft map.

    Per entry, the attention received by the concept tokens is averaged over
    heads and tokens and reshaped onto the entry's square query grid; grids
    are resized to ``out_shape`` before averaging across entries because
    entries may carry different resolutions. The averaged map is min-max
    normalized, Gaussian-smoothed (sigma 1.5), and re-pinned so its peak is 1.
    """
    if not stack.concept_token_ids:
        raise ValueError("concept token set must be non-empty")
    ids = sorted(stack.concept_token_ids)
    accum = np.zeros(out_shape, dtype=np.float64)
    for entry in stack.entries:
        q = entry.shape[1]
        side = math.isqrt(q)
        if side * side != q:
            raise ValueError(f"query axis of size {q} is not a square spatial grid")
        per_query = entry[:, :, ids].mean(axis=(0, 2))
        accum += resize_bilinear(per_query.reshape(side, side), out_shape)
    mean_map = accum / len(stack.entries)
    smoothed = gaussian_smooth(SoftMap(_minmax_unit(mean_map)), CONCEPT_SMOOTH_SIGMA)
    peak = float(smoothed.values.max())
    if peak <= 0.0:
        return smoothed
    return SoftMap(smoothed.values / peak)


def product_threshold(m_anomaly: SoftMap, m_concept: SoftMap, tau: float) -> np.ndarray:
    """Raw intersection mask (before any fallback): product > tau."""
    if m_anomaly.shape != m_concept.shape:
        raise ValueError(
            f"soft maps must share a shape: {m_anomaly.shape} vs {m_concept.shape}"
        )
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return (m_anomaly.values * m_concept.values > tau).astype(np.uint8)


def intersect_masks(m_anomaly: SoftMap, m_concept: SoftMap, tau: float) -> BinaryMask:
    """Binarized intersection of the anomaly and concept maps.

    Falls back to ``m_anomaly > 0.5`` when the thresholded product is empty;
    raises ``EmptyMaskError`` if the fallback is empty too.
    """
    raw = product_threshold(m_anomaly, m_concept, tau)
    if raw.any():
        return BinaryMask(values=raw, tau=tau, fallback_used=False)
    fallback = (m_anomaly.values > BE_FALLBACK_THRESHOLD).astype(np.uint8)
    if fallback.any():
        return BinaryMask(values=fallback, tau=tau, fallback_used=True)
    raise EmptyMaskError("mask intersection and anomaly fallback are both all-zero")


def patch_similarity_map(
    gen_latent: Latent, target: Latent, window: int = DEFAULT_PATCH_WINDOW
) -> SoftMap:
    """Local patchwise cosine similarity between a generation and a target.

    For every spatial position, cosine similarity is computed between the
    window x window neighborhoods (across all channels, edges replicated)
    of the two latents; negative similarities clip to zero. High values mean
    the generation locally matches the target.
    """
    if gen_latent.shape != target.shape:
        raise ValueError(
            f"latents must share a shape: {gen_latent.shape} vs {target.shape}"
        )
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    pb = (window - 1) // 2
    pa = window - 1 - pb
    pad = ((0, 0), (pb, pa), (pb, pa))
    a = np.pad(gen_latent.data, pad, mode="edge")
    b = np.pad(target.data, pad, mode="edge")
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window), axis=(1, 2))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window), axis=(1, 2))
    num = np.einsum("chwij,chwij->hw", wa, wb)
    na = np.sqrt(np.einsum("chwij,chwij->hw", wa, wa))
    nb = np.sqrt(np.einsum("chwij,chwij->hw", wb, wb))
    denom = na * nb
    cos = np.zeros_like(num)
    ok = denom > 0.0
    cos[ok] = num[ok] / denom[ok]
    # both neighborhoods exactly zero counts as a perfect local match
    cos[(na == 0.0) & (nb == 0.0)] = 1.0
    return SoftMap(np.clip(cos, 0.0, 1.0))


def make_patch_similarity_provider(
    target: Latent, window: int = DEFAULT_PATCH_WINDOW
) -> MaskProvider:
    """Anomaly-map provider flagging where a generation matches ``target``."""

    def provider(gen_latent: Latent) -> SoftMap:
        return patch_similarity_map(gen_latent, target, window)

    return provider


def constant_map_provider(shape: tuple[int, int], value: float = 1.0) -> MaskProvider:
    """Provider that ignores the generation and returns a constant map."""
    fixed = SoftMap(np.full(shape, value))

    def provider(_: Latent) -> SoftMap:
        return fixed

    return provider


def save_binary_mask(mask: BinaryMask, path: str | Path) -> None:
    """Persist a binary mask as a single-channel latent container."""
    from .latent import save_softmap

    save_softmap(SoftMap(mask.values.astype(np.float64)), path)


def load_binary_mask(path: str | Path, tau: float, fallback_used: bool = False) -> BinaryMask:
    """Read a mask container back; the threshold is caller-supplied metadata."""
    from .latent import load_softmap

    soft = load_softmap(path)
    values = np.rint(soft.values)
    if np.max(np.abs(soft.values - values)) > 1e-6:
        raise FormatError(f"{path}: container does not hold a binary mask")
    return BinaryMask(values=values.astype(np.uint8), tau=tau, fallback_used=fallback_used)


def load_attention_stack(directory: str | Path) -> tuple[AttentionStack, list[str] | None]:
    """Load a stack from a directory of latent containers plus a manifest.

    ``manifest.json`` must list ``entries`` (file names, each a heads x
    queries x tokens container), ``token_spans`` and ``concept_token_ids``;
    an optional ``words`` list is returned alongside for query extraction.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"{directory}: missing manifest.json")
    doc = json.loads(manifest_path.read_text())
    try:
        entry_files = doc["entries"]
        token_spans = [int(s) for s in doc["token_spans"]]
        concept_ids = frozenset(int(i) for i in doc["concept_token_ids"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: invalid manifest: {exc}") from exc
    entries = [load_latent(directory / name).data for name in entry_files]
    words = doc.get("words")
    if words is not None:
        words = [str(w) for w in words]
    stack = AttentionStack(
        entries=tuple(entries), token_spans=tuple(token_spans), concept_token_ids=concept_ids
    )
    return stack, words
