"""Desk-scale evaluation analogs and the ablation sweep harness.

The neural copy-detection and prompt-alignment scores used at full scale
need pretrained encoders, so this module reports clearly-named analogs
computed on latents: ``sscd_analog`` is the cosine between the flattened
final latent and the planted target, ``align_analog`` the cosine against the
conditioning vector. They are analogs, never presented as the originals.

The sweep runs the full pipeline over a Cartesian grid of (init, injection)
modes x delta x tau x seeds, records one row per cell, and can checkpoint
each cell to disk so an interrupted sweep resumes without recomputing.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .denoisers import ConditioningSpec, Denoiser
from .diffusion import NoiseSchedule
from .errors import UndefinedMetricError
from .latent import Latent
from .pipeline import GenerationResult, InjectionConfig, Providers, run_mitigated

log = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "delta",
    "tau",
    "init",
    "injection",
    "seed",
    "sscd_analog",
    "align_analog",
    "mask_area_mean",
    "window_low",
    "window_high",
    "fallback_rate",
]

# The ablation rows mirrored by default: init-only, injection-only, both.
DEFAULT_ABLATION_MODES = [(True, False), (False, True), (True, True)]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("cosine is undefined for zero-norm inputs")
    return float(a @ b / (na * nb))


def sscd_analog(final: Latent, target: Latent) -> float:
    """Cosine between flattened latents; the copy-detection stand-in."""
    if final.shape != target.shape:
        raise ValueError(f"latents must share a shape: {final.shape} vs {target.shape}")
    return _cosine(final.data.reshape(-1), target.data.reshape(-1))


def align_analog(final: Latent, prompt_vector: np.ndarray) -> float:
    """Cosine between the flattened latent and the conditioning vector."""
    vec = np.asarray(prompt_vector, dtype=np.float64).reshape(-1)
    flat = final.data.reshape(-1)
    if flat.size != vec.size:
        raise ValueError(f"vector dim {vec.size} does not match latent size {flat.size}")
    return _cosine(flat, vec)


@dataclass(frozen=True)
class RunMetrics:
    sscd_analog: float
    align_analog: float
    config: dict
    seed: int


@dataclass(frozen=True)
class ExperimentSetup:
    """Everything needed to execute one configured generation."""

    denoiser: Denoiser
    sched: NoiseSchedule
    x_r: Latent
    mem_target: Latent
    cond: ConditioningSpec
    providers: Providers

    def run_once(self, cfg: InjectionConfig, seed: int) -> dict:
        """Run the pipeline and reduce the result to one sweep row."""
        cfg = replace(cfg, seed=seed)
        result = run_mitigated(self.denoiser, self.x_r, self.cond, self.providers, cfg, self.sched)
        return self.row_from_result(cfg, seed, result)

    def run_metrics(self, cfg: InjectionConfig, seed: int) -> RunMetrics:
        """Like ``run_once`` but packaged with a reproducing config snapshot."""
        row = self.run_once(cfg, seed)
        cfg = replace(cfg, seed=seed)
        snapshot = {
            "delta": cfg.delta, "tau": cfg.tau, "cutoff": cfg.cutoff,
            "eta": cfg.eta, "cfg_scale": cfg.cfg_scale,
            "window": list(cfg.window) if isinstance(cfg.window, tuple) else cfg.window,
            "use_freq_init": cfg.use_freq_init, "use_injection": cfg.use_injection,
            "mask_recompute": cfg.mask_recompute,
        }
        return RunMetrics(
            sscd_analog=row["sscd_analog"],
            align_analog=row["align_analog"],
            config=snapshot,
            seed=seed,
        )

    def row_from_result(self, cfg: InjectionConfig, seed: int, result: GenerationResult) -> dict:
        injected = [rec for rec in result.trajectory_meta if rec.injected]
        mask_area_mean = (
            float(np.mean([rec.mask_area_fraction for rec in injected])) if injected else 0.0
        )
        fallback_rate = (
            float(np.mean([1.0 if rec.mask_fallback else 0.0 for rec in injected]))
            if injected
            else 0.0
        )
        return {
            "delta": cfg.delta,
            "tau": cfg.tau,
            "init": cfg.use_freq_init,
            "injection": cfg.use_injection,
            "seed": seed,
            "sscd_analog": sscd_analog(result.final_latent, self.mem_target),
            "align_analog": align_analog(result.final_latent, self.cond.prompt_vector),
            "mask_area_mean": mask_area_mean,
            "window_low": result.window_used.t_low,
            "window_high": result.window_used.t_high,
            "fallback_rate": fallback_rate,
        }


RunOnce = Callable[[InjectionConfig, int], dict]


def _cell_key(delta: float, tau: float, init: bool, injection: bool, seed: int) -> str:
    return f"d{delta!r}_t{tau!r}_i{int(init)}_j{int(injection)}_s{seed}"


def ablation_sweep(
    run_once: RunOnce,
    base_cfg: InjectionConfig,
    deltas: list[float],
    taus: list[float],
    modes: list[tuple[bool, bool]] | None = None,
    seeds: list[int] | None = None,
    checkpoint_dir: str | Path | None = None,
    workers: int = 1,
) -> list[dict]:
    """Run the full grid and return one row per cell, in grid order.

    Grid order is modes x deltas x taus x seeds. A failing cell is recorded
    with an ``error`` field and the sweep continues. With ``checkpoint_dir``
    each finished cell is persisted as JSON and reloaded on a rerun instead
    of being recomputed, so interrupted sweeps resume where they stopped.
    """
    if not deltas or not taus:
        raise ValueError("sweep grid needs at least one delta and one tau")
    modes = modes if modes is not None else list(DEFAULT_ABLATION_MODES)
    seeds = seeds if seeds is not None else [0]
    if not modes or not seeds:
        raise ValueError("sweep grid needs at least one mode and one seed")
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    cells = [
        (init, injection, delta, tau, seed)
        for init, injection in modes
        for delta in deltas
        for tau in taus
        for seed in seeds
    ]

    def execute(cell) -> dict:
        init, injection, delta, tau, seed = cell
        key = _cell_key(delta, tau, init, injection, seed)
        if checkpoint_dir is not None:
            ckpt = checkpoint_dir / f"{key}.json"
            if ckpt.is_file():
                return json.loads(ckpt.read_text())
        cfg = replace(base_cfg, delta=delta, tau=tau, use_freq_init=init, use_injection=injection)
        try:
            row = run_once(cfg, seed)
        except Exception as exc:  # noqa: BLE001 - per-cell isolation
            log.warning("sweep cell %s failed: %s", key, exc)
            row = {
                "delta": delta,
                "tau": tau,
                "init": init,
                "injection": injection,
                "seed": seed,
                "error": str(exc),
            }
        if checkpoint_dir is not None:
            write_json_atomic(row, checkpoint_dir / f"{key}.json")
        return row

    if workers <= 1:
        return [execute(cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(execute, cell) for cell in cells]
        return [f.result() for f in futures]  # gathered in grid order


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    """Write sweep rows with the pinned column order; failed cells keep their
    grid coordinates and leave metric columns empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(row.get(col)) for col in SWEEP_COLUMNS])


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summarize_sweep(rows: list[dict]) -> dict:
    """Per-cell (delta, tau, init, injection) means and stds across seeds."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["delta"], row["tau"], row["init"], row["injection"])
        groups.setdefault(key, []).append(row)
    cells = []
    for (delta, tau, init, injection), members in groups.items():
        ok = [m for m in members if "error" not in m]
        cell = {
            "delta": delta,
            "tau": tau,
            "init": init,
            "injection": injection,
            "n_seeds": len(members),
            "n_failed": len(members) - len(ok),
        }
        for metric in ("sscd_analog", "align_analog", "mask_area_mean", "fallback_rate"):
            vals = np.array([m[metric] for m in ok], dtype=np.float64)
            cell[f"{metric}_mean"] = float(vals.mean()) if vals.size else None
            cell[f"{metric}_std"] = float(vals.std()) if vals.size else None
        cells.append(cell)
    return {"cells": cells}


def write_json_atomic(payload, path: str | Path) -> None:
    """Serialize to JSON via a temp file + rename so readers never see a
    partial document."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)
