#!/usr/bin/env python3
"""Compute and freeze the test-fixture margins.

Every quantity here comes from a deterministic run (fixed seeds, eta=0), so
the committed numbers are exactly reproducible by the test suite. Rerun this
script only when the underlying toy world or pipeline defaults change, and
commit the regenerated tests/fixtures/calibration.json.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from demem import (  # noqa: E402
    InjectionConfig,
    Latent,
    align_analog,
    alignment_trace,
    make_toy_world,
    phash64,
    run_mitigated,
    run_vanilla,
    sscd_analog,
)
from demem.masks import patch_similarity_map  # noqa: E402
from demem.phash import hamming64  # noqa: E402

N_PAIRED_SEEDS = 100


def mitigation_margins() -> dict:
    world = make_toy_world(seed=0)
    wins = 0
    sscd_drops, align_mit, align_van = [], [], []
    for seed in range(N_PAIRED_SEEDS):
        cfg = InjectionConfig(seed=seed)
        result = run_mitigated(
            world.setup.denoiser, world.x_r, world.setup.cond, world.setup.providers,
            cfg, world.sched,
        )
        final_van, _ = run_vanilla(
            world.setup.denoiser, world.setup.cond, cfg, world.sched, world.x_r.shape
        )
        s_mit = sscd_analog(result.final_latent, world.mem_target)
        s_van = sscd_analog(final_van, world.mem_target)
        wins += int(s_mit < s_van)
        sscd_drops.append(s_van - s_mit)
        align_mit.append(align_analog(result.final_latent, world.setup.cond.prompt_vector))
        align_van.append(align_analog(final_van, world.setup.cond.prompt_vector))
    mean_align_drop = float(np.mean(align_van) - np.mean(align_mit))
    return {
        "n_seeds": N_PAIRED_SEEDS,
        "win_rate": wins / N_PAIRED_SEEDS,
        "mean_sscd_drop": float(np.mean(sscd_drops)),
        "mean_align_drop": mean_align_drop,
        # allowed degradation: the observed drop plus a small determinism buffer
        "align_drop_margin": max(mean_align_drop, 0.0) + 0.005,
    }


def memorization_pull_margin() -> dict:
    """Cosine gain of the memorizing run over the clean-base run (seed-paired)."""
    world = make_toy_world(seed=0)
    gains = []
    for seed in range(20):
        cfg = InjectionConfig(seed=seed)
        final_mem, _ = run_vanilla(
            world.setup.denoiser, world.setup.cond, cfg, world.sched, world.x_r.shape
        )
        final_base, _ = run_vanilla(
            world.base_denoiser, world.setup.cond, cfg, world.sched, world.x_r.shape
        )
        gains.append(
            sscd_analog(final_mem, world.mem_target) - sscd_analog(final_base, world.mem_target)
        )
    return {"n_seeds": 20, "min_gain": float(np.min(gains)), "mean_gain": float(np.mean(gains))}


def trace_shape() -> dict:
    world = make_toy_world(seed=0)
    _, records = run_vanilla(
        world.setup.denoiser, world.setup.cond, InjectionConfig(seed=0),
        world.sched, world.x_r.shape,
    )
    trace = alignment_trace(records, world.setup.providers.scorer, world.setup.cond)
    peak = int(np.argmax(trace.values))
    return {
        "peak_index": peak,
        "drop_after_peak": float(trace.values[peak] - trace.values[-1]),
        "rise_before_peak": float(trace.values[peak] - trace.values[0]),
    }


def patch_similarity_noise() -> dict:
    rng = np.random.default_rng(2024)
    target = Latent(rng.standard_normal((4, 16, 16)))
    per_seed_max = []
    for _ in range(100):
        noise = Latent(rng.standard_normal((4, 16, 16)))
        per_seed_max.append(float(patch_similarity_map(noise, target).values.max()))
    return {
        "n_seeds": 100,
        "max_over_seeds": float(np.max(per_seed_max)),
        "mean_of_max": float(np.mean(per_seed_max)),
    }


def phash_random_pairs() -> dict:
    rng = np.random.default_rng(99)
    distances = []
    for _ in range(1000):
        a = phash64(rng.random((32, 32)))
        b = phash64(rng.random((32, 32)))
        distances.append(hamming64(a, b))
    return {
        "n_pairs": 1000,
        "min_distance": int(np.min(distances)),
        "mean_distance": float(np.mean(distances)),
    }


def main() -> None:
    fixture = {
        "mitigation": mitigation_margins(),
        "memorization_pull": memorization_pull_margin(),
        "trace_shape": trace_shape(),
        "patch_similarity_noise": patch_similarity_noise(),
        "phash_random_pairs": phash_random_pairs(),
    }
    out = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "calibration.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fixture, indent=2, sort_keys=True))
    print(json.dumps(fixture, indent=2, sort_keys=True))
    print(f"\nwrote {out}")


if __name__ == "__main__":
    main()
