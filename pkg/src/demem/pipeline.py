"""End-to-end generation: blended init, reverse loop, localized injection.

A mitigated run proceeds in four stages: build the initial latent from the
frequency blend of noise and reference spectra, resolve the injection window
(fixed, or discovered from a preliminary vanilla pass), run the reverse loop
with guidance, and inside the window replace the clean prediction with the
masked convex blend

    x0' = (1 - delta * m) * x0_hat + delta * m * x_r

before taking the reverse step. The step reuses the noise prediction already
computed for the step; the denoiser is not re-run on the modified latent.

``run_vanilla`` is an independent plain loop with no injection code path at
all, so the delta=0 no-op identity can be checked against a genuinely
separate implementation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoisers import ConditioningSpec, Denoiser
from .diffusion import NoiseSchedule, cfg_combine, ddim_step, predict_x0
from .errors import EmptyMaskError
from .frequency import frequency_blend_init, make_frequency_masks
from .latent import Latent, require_same_shape, save_latent, standardize_channels
from .masks import BinaryMask, MaskProvider, intersect_masks
from .window import (
    DEFAULT_WINDOW,
    AlignmentScorer,
    InjectionWindow,
    alignment_trace,
    find_window,
    map_window_to_ddim,
)

log = logging.getLogger(__name__)

AUTO_WINDOW = "auto"


@dataclass(frozen=True)
class InjectionConfig:
    """Knobs for one generation.

    ``window`` is either a (t_low, t_high) pair on the full timestep scale or
    ``"auto"`` to discover it from a preliminary vanilla pass. ``cutoff`` of
    0 disables the frequency-blended init even when ``use_freq_init`` is on.
    """

    delta: float = 0.1
    tau: float = 0.1
    cutoff: float = 0.25
    seed: int = 0
    eta: float = 0.0
    cfg_scale: float = 7.5
    window: tuple[int, int] | str = (DEFAULT_WINDOW.t_low, DEFAULT_WINDOW.t_high)
    use_freq_init: bool = True
    use_injection: bool = True
    mask_recompute: str = "per_step"  # or "once"

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.cutoff < 1.0:
            raise ValueError(f"cutoff must lie in [0, 1) (0 disables), got {self.cutoff}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if isinstance(self.window, str):
            if self.window != AUTO_WINDOW:
                raise ValueError(f"window must be a pair or '{AUTO_WINDOW}', got {self.window!r}")
        else:
            lo, hi = self.window
            if lo > hi:
                raise ValueError(f"window bounds must satisfy low <= high, got {self.window}")
            object.__setattr__(self, "window", (int(lo), int(hi)))
        if self.mask_recompute not in ("per_step", "once"):
            raise ValueError(f"unknown mask_recompute mode {self.mask_recompute!r}")


@dataclass(frozen=True)
class Providers:
    """Pluggable pieces the pipeline consumes read-only."""

    anomaly: MaskProvider
    concept: MaskProvider
    scorer: AlignmentScorer


@dataclass(frozen=True)
class StepRecord:
    step: int
    injected: bool
    mask_area_fraction: float
    mask_fallback: bool = False


@dataclass(frozen=True)
class GenerationResult:
    final_latent: Latent
    trajectory_meta: tuple[StepRecord, ...]
    window_used: InjectionWindow
    fallback_used: bool


def inject(x_hat0: Latent, x_r: Latent, mask: BinaryMask, delta: float) -> Latent:
    """Masked convex blend of the clean prediction and the reference latent.

    The mask broadcasts across channels. ``delta=0`` returns the clean
    prediction unchanged (bit-exact), and cells where the mask is 0 are never
    touched.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    require_same_shape(x_hat0, x_r, "clean prediction and reference")
    if mask.shape != (x_hat0.height, x_hat0.width):
        raise ValueError(
            f"mask shape {mask.shape} does not match latent spatial dims "
            f"{(x_hat0.height, x_hat0.width)}"
        )
    if delta == 0.0 or not mask.values.any():
        return x_hat0
    m = mask.values.astype(np.float64)[None, :, :]
    blended = (1.0 - delta * m) * x_hat0.data + delta * m * x_r.data
    out = np.where(m > 0.0, blended, x_hat0.data)
    return Latent(out)


def _guided_noise(
    denoiser: Denoiser,
    x: Latent,
    t: int,
    cond: ConditioningSpec | None,
    scale: float,
) -> Latent:
    if cond is None:
        return denoiser.predict_noise(x, t, None)
    eps_uncond = denoiser.predict_noise(x, t, None)
    eps_cond = denoiser.predict_noise(x, t, cond)
    return cfg_combine(eps_uncond, eps_cond, scale)


def _check_eta(cfg: InjectionConfig, sched: NoiseSchedule) -> None:
    # the sigma table is baked at schedule construction; a diverging config
    # knob would silently change nothing, so reject the mismatch outright
    if cfg.eta != sched.eta:
        raise ValueError(
            f"config eta {cfg.eta} does not match the schedule's eta {sched.eta}; "
            "rebuild the schedule with the intended eta"
        )


def _maybe_dump(latent: Latent, t: int, dump_dir: str | Path | None) -> None:
    if dump_dir is None:
        return
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    save_latent(latent, dump_dir / f"step_{t:04d}.caplat")


def run_vanilla(
    denoiser: Denoiser,
    cond: ConditioningSpec | None,
    cfg: InjectionConfig,
    sched: NoiseSchedule,
    shape: tuple[int, int, int],
    dump_dir: str | Path | None = None,
) -> tuple[Latent, list[tuple[int, Latent]]]:
    """Plain reverse run from a seeded noise draw; no interventions.

    Returns the final clean latent and the per-step (t, x0_hat) records.
    """
    _check_eta(cfg, sched)
    rng = np.random.default_rng(cfg.seed)
    x = Latent(rng.standard_normal(shape))
    steps = sched.ddim_steps
    records: list[tuple[int, Latent]] = []
    x0_hat = x
    for i, t in enumerate(int(s) for s in steps):
        _maybe_dump(x, t, dump_dir)
        eps_pred = _guided_noise(denoiser, x, t, cond, cfg.cfg_scale)
        x0_hat = predict_x0(x, eps_pred, t, sched)
        records.append((t, x0_hat))
        if i + 1 < len(steps):
            t_prev = int(steps[i + 1])
            noise = Latent(rng.standard_normal(shape)) if sched.sigma[t] > 0.0 else None
            x = ddim_step(x0_hat, eps_pred, t, t_prev, sched, noise)
    return x0_hat, records


def _resolve_window(
    cfg: InjectionConfig,
    denoiser: Denoiser,
    cond: ConditioningSpec | None,
    sched: NoiseSchedule,
    shape: tuple[int, int, int],
    providers: Providers,
) -> InjectionWindow:
    if cfg.window != AUTO_WINDOW:
        lo, hi = cfg.window  # type: ignore[misc]
        return InjectionWindow(lo, hi)
    _, records = run_vanilla(denoiser, cond, cfg, sched, shape)
    trace = alignment_trace(records, providers.scorer, cond)
    window = find_window(trace)
    if window.defaulted:
        log.warning("alignment trace was degenerate; using the default window")
    return window


def run_mitigated(
    denoiser: Denoiser,
    x_r: Latent,
    cond: ConditioningSpec | None,
    providers: Providers,
    cfg: InjectionConfig,
    sched: NoiseSchedule,
    dump_dir: str | Path | None = None,
) -> GenerationResult:
    """Full mitigated generation.

    The reference latent is standardized per channel before the spectral
    blend (it is mixed with unit-variance noise there) but injected at its
    native scale. An empty-mask failure at some step downgrades that step to
    a vanilla one and is recorded in the trajectory metadata.
    """
    shape = x_r.shape
    _check_eta(cfg, sched)
    rng = np.random.default_rng(cfg.seed)
    eps = Latent(rng.standard_normal(shape))
    if cfg.use_freq_init and cfg.cutoff > 0.0:
        masks = make_frequency_masks(shape[1], shape[2], cfg.cutoff)
        x = frequency_blend_init(eps, standardize_channels(x_r), masks)
    else:
        x = eps

    window = _resolve_window(cfg, denoiser, cond, sched, shape, providers)
    window_steps = map_window_to_ddim(window, sched) if cfg.use_injection else frozenset()

    steps = sched.ddim_steps
    meta: list[StepRecord] = []
    any_fallback = False
    cached_mask: BinaryMask | None = None
    x0_hat = x
    for i, t in enumerate(int(s) for s in steps):
        _maybe_dump(x, t, dump_dir)
        eps_pred = _guided_noise(denoiser, x, t, cond, cfg.cfg_scale)
        x0_hat = predict_x0(x, eps_pred, t, sched)
        injected = False
        area = 0.0
        fallback = False
        if cfg.use_injection and t in window_steps:
            try:
                if cfg.mask_recompute == "once" and cached_mask is not None:
                    mask = cached_mask
                else:
                    mask = intersect_masks(
                        providers.anomaly(x0_hat), providers.concept(x0_hat), cfg.tau
                    )
                    cached_mask = mask
                x0_hat = inject(x0_hat, x_r, mask, cfg.delta)
                injected = True
                area = mask.area_fraction
                fallback = mask.fallback_used
                any_fallback = any_fallback or fallback
            except EmptyMaskError:
                log.warning("empty mask at step %d; skipping injection for this step", t)
        meta.append(StepRecord(step=t, injected=injected, mask_area_fraction=area, mask_fallback=fallback))
        if i + 1 < len(steps):
            t_prev = int(steps[i + 1])
            noise = Latent(rng.standard_normal(shape)) if sched.sigma[t] > 0.0 else None
            x = ddim_step(x0_hat, eps_pred, t, t_prev, sched, noise)

    return GenerationResult(
        final_latent=x0_hat,
        trajectory_meta=tuple(meta),
        window_used=window,
        fallback_used=any_fallback,
    )
