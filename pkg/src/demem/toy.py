"""Desk-scale experiment construction with a planted memorized sample.

The setup mimics the structure of the real problem: every interesting latent
shares a common "semantic" pattern (what the conditioning asks for), the
planted memorized sample adds its own idiosyncratic detail pattern on top,
and the reference latent carries the same semantics with different details.
Mitigation should then strip the memorized details (copy-similarity drops)
without losing the semantics (alignment holds), which is exactly what the
paired-run tests measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoisers import (
    ConditioningSpec,
    Denoiser,
    GaussianMixture,
    GaussianMixtureDenoiser,
    MemorizationSpec,
    MemorizingDenoiser,
)
from .diffusion import NoiseSchedule, make_schedule
from .latent import Latent, SoftMap, gaussian_smooth
from .masks import make_patch_similarity_provider
from .metrics import ExperimentSetup
from .pipeline import Providers

DEFAULT_SHAPE = (4, 16, 16)


def smooth_latent(shape: tuple[int, int, int], rng: np.random.Generator, cutoff: float = 0.3) -> Latent:
    """A random latent with only low-frequency content, unit RMS per channel."""
    c, h, w = shape
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    keep = (np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2) / 0.5) <= cutoff
    out = np.empty(shape)
    for ch in range(c):
        spec = np.fft.fft2(rng.standard_normal((h, w))) * keep
        plane = np.fft.ifft2(spec).real
        rms = np.sqrt(np.mean(plane**2))
        out[ch] = plane / rms if rms > 0 else plane
    return Latent(out)


def _orthogonalize(candidate: Latent, references: list[Latent]) -> Latent:
    """Remove the components of ``candidate`` along each reference latent."""
    flat = candidate.data.reshape(-1).copy()
    for ref in references:
        basis = ref.data.reshape(-1)
        denom = float(basis @ basis)
        if denom > 0:
            flat -= (flat @ basis) / denom * basis
    rms = np.sqrt(np.mean(flat**2))
    if rms > 0:
        flat /= rms
    return Latent(flat.reshape(candidate.shape))


@dataclass(frozen=True)
class ToyWorld:
    """The constructed environment plus the pieces tests like to inspect."""

    setup: ExperimentSetup
    gm: GaussianMixture
    base_denoiser: Denoiser
    sched: NoiseSchedule
    semantic: Latent
    mem_target: Latent
    x_r: Latent


def make_toy_world(
    seed: int = 0,
    shape: tuple[int, int, int] = DEFAULT_SHAPE,
    w_max: float = 0.8,
    strength_mode: str = "ramp",
    memorize: bool = True,
    sched: NoiseSchedule | None = None,
    quirk_scale: float = 1.5,
    mem_scale: float = 0.5,
) -> ToyWorld:
    """Build the planted-memorization environment.

    The detail patterns live in the low-frequency band that the blended
    initialization replaces, so the init stage has a real lever on them.
    ``memorize=False`` leaves the plain mixture denoiser in place, which is
    useful for clean convergence checks.
    """
    rng = np.random.default_rng(seed)
    sched = sched or make_schedule()

    semantic = smooth_latent(shape, rng)
    mem_quirk = _orthogonalize(smooth_latent(shape, rng, cutoff=0.2), [semantic])
    ref_quirk = _orthogonalize(smooth_latent(shape, rng, cutoff=0.2), [semantic, mem_quirk])
    mem_target = Latent(mem_scale * (semantic.data + quirk_scale * mem_quirk.data))
    x_r = Latent(semantic.data + quirk_scale * ref_quirk.data)

    mode_a = _orthogonalize(smooth_latent(shape, rng), [semantic])
    mode_b = _orthogonalize(smooth_latent(shape, rng), [semantic, mode_a])
    gm = GaussianMixture(
        means=(
            Latent(semantic.data + 0.5 * mode_a.data),
            Latent(semantic.data + 0.5 * mode_b.data),
        ),
        variances=np.array([1.0, 1.0]),
        weights=np.array([0.55, 0.45]),
    )
    base = GaussianMixtureDenoiser(gm, sched)
    denoiser: Denoiser = base
    if memorize:
        denoiser = MemorizingDenoiser(
            base=base,
            spec=MemorizationSpec(target=mem_target, w_max=w_max, mode=strength_mode),
            sched=sched,
        )

    prompt_vector = semantic.data.reshape(-1)
    prompt_vector = prompt_vector / np.linalg.norm(prompt_vector)
    cond = ConditioningSpec(
        prompt_vector=prompt_vector,
        component_weights=np.array([1.5, 0.5]),
    )

    concept_map = _concept_map_from(semantic)
    providers = Providers(
        anomaly=make_patch_similarity_provider(mem_target),
        concept=lambda _latent, _m=concept_map: _m,
        scorer=_make_prompt_scorer(prompt_vector),
    )
    setup = ExperimentSetup(
        denoiser=denoiser,
        sched=sched,
        x_r=x_r,
        mem_target=mem_target,
        cond=cond,
        providers=providers,
    )
    return ToyWorld(
        setup=setup,
        gm=gm,
        base_denoiser=base,
        sched=sched,
        semantic=semantic,
        mem_target=mem_target,
        x_r=x_r,
    )


def _concept_map_from(semantic: Latent) -> SoftMap:
    """Concept support map: where the semantic pattern has spatial energy.

    Squaring before the blur keeps the map peaky so intersection masks stay
    partial instead of saturating the whole grid.
    """
    magnitude = np.abs(semantic.data).mean(axis=0)
    lo, hi = magnitude.min(), magnitude.max()
    unit = np.ones_like(magnitude) if hi - lo <= 0 else (magnitude - lo) / (hi - lo)
    return gaussian_smooth(SoftMap(unit**2), 1.5)


def _make_prompt_scorer(prompt_vector: np.ndarray):
    def scorer(latent: Latent, _cond) -> float:
        flat = latent.data.reshape(-1)
        norm = np.linalg.norm(flat)
        if norm == 0.0:
            return 0.0
        return float(flat @ prompt_vector / norm)

    return scorer
