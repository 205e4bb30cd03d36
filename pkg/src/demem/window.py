"""Locating the feature-injection timestep window from an alignment trace.

During denoising the alignment between the evolving clean prediction and the
conditioning rises, then degrades once fine detail starts locking in. The
window upper bound is the first step (in run order, large t to small t) whose
score exceeds the trace mean; the lower bound is the first step where the
per-step alignment gain collapses below mean - 1.5 * std of the gains.

Orientation: timesteps decrease along a run, and the derivative here is the
score change per unit of timestep decrease, d_i = (s[i+1] - s[i]) /
(t[i] - t[i+1]), aligned to the later-processed step t[i+1]. A collapse in
alignment therefore shows up as a strongly negative derivative, which is what
the 1.5-sigma rule catches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .denoisers import ConditioningSpec
from .diffusion import NoiseSchedule
from .latent import Latent

# Dataset-averaged default window on the 1000-step scale, used when a trace
# is degenerate or when the caller does not supply one.
DEFAULT_WINDOW_LOW = 141
DEFAULT_WINDOW_HIGH = 341

AlignmentScorer = Callable[[Latent, ConditioningSpec | None], float]


@dataclass(frozen=True, eq=False)
class SimilarityTrace:
    """Alignment scores over a run, ordered by decreasing timestep."""

    timesteps: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        steps = np.asarray(self.timesteps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if steps.ndim != 1 or steps.shape != vals.shape:
            raise ValueError("timesteps and values must be 1-D arrays of equal length")
        if steps.size == 0:
            raise ValueError("trace must be non-empty")
        if np.any(np.diff(steps) >= 0):
            raise ValueError("timesteps must be strictly decreasing (run order)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("trace values must be finite")
        steps.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "timesteps", steps)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.timesteps.size)


@dataclass(frozen=True)
class InjectionWindow:
    """Closed timestep interval [t_low, t_high] where injection is applied."""

    t_low: int
    t_high: int
    defaulted: bool = False

    def __post_init__(self) -> None:
        if self.t_low > self.t_high:
            raise ValueError(f"need t_low <= t_high, got ({self.t_low}, {self.t_high})")


DEFAULT_WINDOW = InjectionWindow(DEFAULT_WINDOW_LOW, DEFAULT_WINDOW_HIGH)


def alignment_trace(
    run_latents: Sequence[tuple[int, Latent]],
    scorer: AlignmentScorer,
    cond: ConditioningSpec | None,
) -> SimilarityTrace:
    """Score each step of a recorded run, preserving run order."""
    if len(run_latents) == 0:
        raise ValueError("cannot build a trace from an empty run")
    if len(run_latents) < 3:
        raise ValueError("alignment trace needs at least 3 steps")
    steps = np.array([t for t, _ in run_latents], dtype=np.int64)
    vals = np.array([float(scorer(latent, cond)) for _, latent in run_latents])
    return SimilarityTrace(timesteps=steps, values=vals)


def trace_derivative(trace: SimilarityTrace) -> SimilarityTrace:
    """Per-step alignment gain, aligned to the later-processed step."""
    if len(trace) < 2:
        raise ValueError("derivative needs at least 2 trace points")
    dt = (trace.timesteps[:-1] - trace.timesteps[1:]).astype(np.float64)
    ds = trace.values[1:] - trace.values[:-1]
    return SimilarityTrace(timesteps=trace.timesteps[1:], values=ds / dt)


def find_window(trace: SimilarityTrace, default: InjectionWindow = DEFAULT_WINDOW) -> InjectionWindow:
    """Apply the mean-crossing and derivative-drop rules to a trace.

    Degenerate traces (no value ever exceeds the mean, i.e. constant) return
    the supplied default window with ``defaulted=True``. If the derivative
    never falls below mean - 1.5*std, the lower bound is the last scheduled
    step; if the drop happens before the mean crossing, the lower bound is
    clamped up to the upper bound.
    """
    if len(trace) < 3:
        raise ValueError("window localization needs at least 3 trace points")
    mean_s = float(trace.values.mean())
    above = np.nonzero(trace.values > mean_s)[0]
    if above.size == 0:
        return replace(default, defaulted=True)
    t_high = int(trace.timesteps[above[0]])

    deriv = trace_derivative(trace)
    mu = float(deriv.values.mean())
    sd = float(deriv.values.std())
    crossings = np.nonzero(deriv.values < mu - 1.5 * sd)[0]
    if crossings.size == 0:
        t_low = int(trace.timesteps[-1])
    else:
        t_low = int(deriv.timesteps[crossings[0]])
    if t_low > t_high:
        t_low = t_high
    return InjectionWindow(t_low=t_low, t_high=t_high)


def map_window_to_ddim(window: InjectionWindow, sched: NoiseSchedule) -> frozenset[int]:
    """Scheduled timesteps falling inside the window.

    An interval that contains no scheduled step widens to the single nearest
    one (ties resolved toward the larger timestep), so the result is never
    empty.
    """
    if window.t_low < 0 or window.t_high >= sched.T:
        raise ValueError(
            f"window ({window.t_low}, {window.t_high}) outside schedule range [0, {sched.T})"
        )
    inside = [int(t) for t in sched.ddim_steps if window.t_low <= t <= window.t_high]
    if inside:
        return frozenset(inside)
    center = 0.5 * (window.t_low + window.t_high)
    nearest = min(sched.ddim_steps, key=lambda t: (abs(t - center), -t))
    return frozenset({int(nearest)})


def trace_to_csv(trace: SimilarityTrace, path: str | Path) -> None:
    """Dump a trace as CSV with header ``step,score``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "score"])
        for t, s in zip(trace.timesteps, trace.values):
            writer.writerow([int(t), repr(float(s))])


def trace_from_csv(path: str | Path) -> SimilarityTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "score"]:
            raise ValueError(f"{path}: expected header 'step,score', got {header}")
        rows = [(int(r[0]), float(r[1])) for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: trace file has no rows")
    steps = np.array([r[0] for r in rows], dtype=np.int64)
    vals = np.array([r[1] for r in rows])
    return SimilarityTrace(timesteps=steps, values=vals)
