"""Analytic desk-scale denoisers.

Instead of a trained network, noise prediction comes from closed-form
posterior means. A Gaussian-mixture prior diffused to time t admits an exact
E[x0 | x_t]; inverting the clean-latent formula turns that into a noise
prediction. A wrapper blends any base denoiser with the unique prediction
that pins the clean estimate to a planted target latent, which is how a
"memorizing" model is simulated.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .diffusion import NoiseSchedule
from .latent import Latent, load_latent, save_latent

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ConditioningSpec:
    """Synthetic conditioning: a prompt-direction vector and optional
    per-component tilts applied to mixture weights on the conditional branch."""

    prompt_vector: np.ndarray | None = None
    component_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("prompt_vector", "component_weights"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.asarray(val, dtype=np.float64)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite 1-D vector")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.component_weights is not None and np.any(self.component_weights < 0.0):
            raise ValueError("component_weights must be non-negative")


class Denoiser(Protocol):
    """Deterministic noise-prediction function over latents."""

    def predict_noise(self, x_t: Latent, t: int, cond: ConditioningSpec | None) -> Latent:
        ...


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Isotropic Gaussian mixture over latents.

    Variances may be zero (a point mass); the diffused posterior stays well
    defined because the noising variance 1 - abar_t is strictly positive.
    """

    means: tuple[Latent, ...]
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        if len(self.means) == 0:
            raise ValueError("mixture needs at least one component")
        shape = self.means[0].shape
        for m in self.means:
            if m.shape != shape:
                raise ValueError("all component means must share a shape")
        var = np.asarray(self.variances, dtype=np.float64)
        wts = np.asarray(self.weights, dtype=np.float64)
        if var.shape != (len(self.means),) or wts.shape != (len(self.means),):
            raise ValueError("variances and weights must have one entry per component")
        if np.any(var < 0.0):
            raise ValueError("variances must be non-negative")
        if np.any(wts <= 0.0):
            raise ValueError("weights must be positive")
        if abs(wts.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1 within {WEIGHT_SUM_TOL}")
        var.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "means", tuple(self.means))
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "weights", wts)

    @property
    def n_components(self) -> int:
        return len(self.means)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.means[0].shape


def mixture_posterior_mean(
    gm: GaussianMixture,
    x_t: Latent,
    t: int,
    sched: NoiseSchedule,
    cond: ConditioningSpec | None = None,
) -> Latent:
    """Exact E[x0 | x_t] for the mixture diffused to time t.

    Component responsibilities come from the marginal likelihoods
    N(x_t; sqrt(abar)*mu_k, (abar*s_k^2 + 1 - abar) I) evaluated in log space;
    each component contributes its conjugate-Gaussian posterior mean. If every
    responsibility underflows to nothing the function falls back to uniform
    responsibilities and emits a warning.
    """
    if gm.latent_shape != x_t.shape:
        raise ValueError(
            f"mixture is over {gm.latent_shape} latents, got state {x_t.shape}"
        )
    abar = float(sched.alpha_bar[t])
    dim = x_t.data.size
    x = x_t.data
    weights = gm.weights
    if cond is not None and cond.component_weights is not None:
        if cond.component_weights.shape != (gm.n_components,):
            raise ValueError("conditioning tilt must have one entry per component")
        tilted = weights * cond.component_weights
        total = tilted.sum()
        if total > 0.0:
            weights = tilted / total

    log_resp = np.empty(gm.n_components)
    post_means = []
    for k, mean in enumerate(gm.means):
        marg_var = abar * gm.variances[k] + (1.0 - abar)
        diff = x - np.sqrt(abar) * mean.data
        log_resp[k] = (
            np.log(weights[k])
            - 0.5 * dim * np.log(2.0 * np.pi * marg_var)
            - 0.5 * float(np.sum(diff * diff)) / marg_var
        )
        post_means.append(
            (np.sqrt(abar) * gm.variances[k] * x + (1.0 - abar) * mean.data) / marg_var
        )

    peak = log_resp.max()
    if not np.isfinite(peak):
        warnings.warn(
            "all mixture responsibilities underflowed; using uniform fallback",
            RuntimeWarning,
            stacklevel=2,
        )
        resp = np.full(gm.n_components, 1.0 / gm.n_components)
    else:
        resp = np.exp(log_resp - peak)
        resp /= resp.sum()

    out = np.zeros_like(x)
    for k in range(gm.n_components):
        out += resp[k] * post_means[k]
    return Latent(out)


@dataclass(frozen=True, eq=False)
class GaussianMixtureDenoiser:
    """Noise prediction implied by the exact mixture posterior mean."""

    gm: GaussianMixture
    sched: NoiseSchedule

    def predict_noise(self, x_t: Latent, t: int, cond: ConditioningSpec | None) -> Latent:
        x0_hat = mixture_posterior_mean(self.gm, x_t, t, self.sched, cond)
        abar = float(self.sched.alpha_bar[t])
        eps = (x_t.data - np.sqrt(abar) * x0_hat.data) / np.sqrt(1.0 - abar)
        return Latent(eps)


@dataclass(frozen=True, eq=False)
class MemorizationSpec:
    """A planted training sample and a timestep-dependent pull strength."""

    target: Latent
    w_max: float
    mode: str = "ramp"  # "ramp": 0 at t=T rising to w_max at t=0; "constant": w_max

    def __post_init__(self) -> None:
        if not 0.0 <= self.w_max <= 1.0:
            raise ValueError(f"w_max must lie in [0, 1], got {self.w_max}")
        if self.mode not in ("ramp", "constant"):
            raise ValueError(f"unknown strength mode {self.mode!r}")

    def strength(self, t: int, T: int) -> float:
        if self.mode == "constant":
            return self.w_max
        return self.w_max * (T - t) / T


@dataclass(frozen=True, eq=False)
class MemorizingDenoiser:
    """Blend a base denoiser with the prediction that recreates a target.

    The target-seeking prediction (x_t - sqrt(abar)*target)/sqrt(1-abar) is
    the unique noise estimate whose implied clean latent equals the target,
    so strength 1 reproduces it exactly at every step.
    """

    base: Denoiser
    spec: MemorizationSpec
    sched: NoiseSchedule

    def predict_noise(self, x_t: Latent, t: int, cond: ConditioningSpec | None) -> Latent:
        if self.spec.target.shape != x_t.shape:
            raise ValueError("memorization target shape does not match the state")
        w = self.spec.strength(t, self.sched.T)
        abar = float(self.sched.alpha_bar[t])
        eps_mem = (x_t.data - np.sqrt(abar) * self.spec.target.data) / np.sqrt(1.0 - abar)
        if w >= 1.0:
            return Latent(eps_mem)
        eps_base = self.base.predict_noise(x_t, t, cond)
        return Latent((1.0 - w) * eps_base.data + w * eps_mem)


def save_gaussian_mixture(gm: GaussianMixture, directory: str | Path, name: str = "gm") -> Path:
    """Write a mixture as a JSON document plus one latent file per mean."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    components = []
    for k, mean in enumerate(gm.means):
        mean_file = f"{name}_mean_{k:03d}.caplat"
        save_latent(mean, directory / mean_file)
        components.append(
            {
                "mean_file": mean_file,
                "variance": float(gm.variances[k]),
                "weight": float(gm.weights[k]),
            }
        )
    path = directory / f"{name}.json"
    path.write_text(json.dumps({"components": components}, indent=2, sort_keys=True))
    return path


def load_gaussian_mixture(path: str | Path) -> GaussianMixture:
    """Load a mixture document; mean paths resolve relative to the document."""
    path = Path(path)
    doc = json.loads(path.read_text())
    comps = doc.get("components")
    if not isinstance(comps, list) or not comps:
        raise ValueError(f"{path}: mixture document needs a non-empty 'components' list")
    means, variances, weights = [], [], []
    for comp in comps:
        means.append(load_latent(path.parent / comp["mean_file"]))
        variances.append(float(comp["variance"]))
        weights.append(float(comp["weight"]))
    return GaussianMixture(means=tuple(means), variances=np.array(variances), weights=np.array(weights))
