#!/usr/bin/env python3
"""Walkthrough: finding when to intervene from the alignment trace.

A planted-memorization run first builds prompt-aligned structure, then the
pull toward the memorized sample degrades alignment. The window finder reads
exactly that story off the trace: the upper bound is the first step whose
score clears the trace mean, the lower bound is where the per-step alignment
gain collapses below mean - 1.5 * std of the gains.
"""

from pathlib import Path

import numpy as np

from demem import (
    InjectionConfig,
    SimilarityTrace,
    alignment_trace,
    find_window,
    make_toy_world,
    map_window_to_ddim,
    run_vanilla,
    trace_derivative,
    trace_to_csv,
)

world = make_toy_world(seed=0)
_, records = run_vanilla(
    world.setup.denoiser, world.setup.cond, InjectionConfig(seed=0),
    world.sched, world.x_r.shape,
)
trace = alignment_trace(records, world.setup.providers.scorer, world.setup.cond)

print("=== alignment trace of a memorizing run (sampled) ===")
for i in range(0, len(trace), 6):
    t, s = int(trace.timesteps[i]), float(trace.values[i])
    bar = "#" * int(max(s, 0) * 40)
    print(f"t={t:4d}  s={s:+.3f}  {bar}")

deriv = trace_derivative(trace)
mu, sd = float(deriv.values.mean()), float(deriv.values.std())
print()
print(f"derivative mean {mu:+.5f}, std {sd:.5f}, drop threshold {mu - 1.5 * sd:+.5f}")

window = find_window(trace)
print(f"window found: [{window.t_low}, {window.t_high}] (defaulted={window.defaulted})")
if window.t_low == int(trace.timesteps[-1]):
    print("this run degrades gently, so no single step breaches the collapse")
    print("threshold and the lower bound falls back to the last scheduled step")

print()
print("=== a trace with an actual collapse, for contrast ===")
sharp = SimilarityTrace(
    timesteps=np.array([901, 701, 501, 301, 101]),
    values=np.array([0.10, 0.20, 0.30, 0.31, 0.05]),
)
w2 = find_window(sharp)
print(f"scores {[float(v) for v in sharp.values]} over steps {[int(t) for t in sharp.timesteps]}")
print(f"window found: [{w2.t_low}, {w2.t_high}]  (the 0.31 -> 0.05 collapse pins t_low)")

steps = sorted(map_window_to_ddim(window, world.sched), reverse=True)
print(f"\nscheduled steps inside the toy run's window: {len(steps)} of {len(world.sched.ddim_steps)}")

out = Path("demo_trace.csv")
trace_to_csv(trace, out)
print(f"trace written to {out} (header step,score)")
