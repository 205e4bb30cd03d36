"""Noise schedules, forward diffusion, and deterministic/stochastic reverse steps.

The schedule is a plain value object holding the per-timestep beta/alpha
tables plus the decreasing subsequence of timesteps visited at inference.
Reverse stepping uses the non-Markovian update

    x_prev = sqrt(abar_prev) * x0_hat
             + sqrt(1 - abar_prev - sigma_t^2) * eps_pred
             + sigma_t * noise.

Note the sigma^2 inside the direction coefficient: some write-ups omit it,
but including it makes eta=0 exactly deterministic and keeps the eta=1 case
variance-consistent, so that is the form implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError
from .latent import Latent, require_same_shape

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_DDIM_COUNT = 50


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep diffusion tables plus the inference-time step sequence."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    ddim_steps: np.ndarray  # strictly decreasing, ends at (or near) 0
    eta: float

    def __post_init__(self) -> None:
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        steps = np.asarray(self.ddim_steps, dtype=np.int64)
        if steps.size < 1 or np.any(np.diff(steps) >= 0):
            raise ValueError("ddim_steps must be non-empty and strictly decreasing")
        if steps[0] >= self.T or steps[-1] < 0:
            raise ValueError("ddim_steps must lie inside [0, T)")
        steps.setflags(write=False)
        object.__setattr__(self, "ddim_steps", steps)
        if np.any(self.alpha_bar <= 0.0) or np.any(self.alpha_bar > 1.0):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def alpha_bar_prev(self, t: int) -> float:
        """Cumulative alpha one step before t, with the t=0 convention of 1."""
        return float(self.alpha_bar[t - 1]) if t > 0 else 1.0


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    ddim_count: int = DEFAULT_DDIM_COUNT,
    eta: float = 0.0,
) -> NoiseSchedule:
    """Linear-beta schedule with a uniformly strided inference subsequence."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if not 1 <= ddim_count <= T:
        raise ValueError(f"ddim_count must lie in [1, T], got {ddim_count}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - alpha_bar)) * np.sqrt(1.0 - alpha)
    stride = T // ddim_count
    steps = (np.arange(ddim_count, dtype=np.int64) * stride)[::-1]
    return NoiseSchedule(
        T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma,
        ddim_steps=steps, eta=float(eta),
    )


def _check_step(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T})")


def forward_diffuse(x0: Latent, t: int, eps: Latent, sched: NoiseSchedule) -> Latent:
    """Closed-form forward noising: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_step(t, sched)
    require_same_shape(x0, eps, "clean latent and noise")
    abar = sched.alpha_bar[t]
    return Latent(np.sqrt(abar) * x0.data + np.sqrt(1.0 - abar) * eps.data)


def predict_x0(x_t: Latent, eps_pred: Latent, t: int, sched: NoiseSchedule) -> Latent:
    """Invert the forward closed form to estimate the clean latent."""
    _check_step(t, sched)
    require_same_shape(x_t, eps_pred, "state and noise prediction")
    abar = sched.alpha_bar[t]
    return Latent((x_t.data - np.sqrt(1.0 - abar) * eps_pred.data) / np.sqrt(abar))


def ddim_step(
    x_hat0: Latent,
    eps_pred: Latent,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    noise: Latent | None = None,
) -> Latent:
    """One reverse step from timestep t to t_prev (t_prev < t)."""
    _check_step(t, sched)
    _check_step(t_prev, sched)
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got t_prev={t_prev}, t={t}")
    require_same_shape(x_hat0, eps_pred, "clean prediction and noise prediction")
    abar_prev = sched.alpha_bar[t_prev]
    sigma_t = sched.sigma[t]
    direction_sq = 1.0 - abar_prev - sigma_t**2
    if direction_sq < 0.0:
        raise ScheduleError(
            f"direction term is imaginary at t={t}: 1 - abar_prev - sigma^2 = {direction_sq:.3e}"
        )
    out = np.sqrt(abar_prev) * x_hat0.data + np.sqrt(direction_sq) * eps_pred.data
    if sigma_t > 0.0:
        if noise is None:
            raise ValueError("stochastic step (sigma > 0) requires a noise latent")
        require_same_shape(x_hat0, noise, "clean prediction and step noise")
        out = out + sigma_t * noise.data
    return Latent(out)


def cfg_combine(eps_uncond: Latent, eps_cond: Latent, scale: float) -> Latent:
    """Guidance extrapolation: uncond + scale * (cond - uncond)."""
    require_same_shape(eps_uncond, eps_cond, "guidance branches")
    return Latent(eps_uncond.data + scale * (eps_cond.data - eps_uncond.data))
