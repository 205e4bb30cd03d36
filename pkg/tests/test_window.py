import numpy as np
import pytest

from demem.diffusion import make_schedule
from demem.latent import Latent
from demem.toy import make_toy_world
from demem.window import (
    DEFAULT_WINDOW,
    InjectionWindow,
    SimilarityTrace,
    alignment_trace,
    find_window,
    map_window_to_ddim,
    trace_derivative,
    trace_from_csv,
    trace_to_csv,
)


def oracle_find_window(steps, values, default=(141, 341)):
    """Literal exhaustive-scan restatement of the two localization rules.

    Written with plain loops and explicit running sums so it shares no code
    path with the implementation under test.
    """
    n = len(values)
    mean_s = sum(values) / n
    t_high = None
    for i in range(n):
        if values[i] > mean_s:
            t_high = steps[i]
            break
    if t_high is None:
        return default[0], default[1], True

    derivs = []
    d_steps = []
    for i in range(n - 1):
        derivs.append((values[i + 1] - values[i]) / (steps[i] - steps[i + 1]))
        d_steps.append(steps[i + 1])
    mu = sum(derivs) / len(derivs)
    var = sum((d - mu) ** 2 for d in derivs) / len(derivs)
    threshold = mu - 1.5 * var**0.5
    t_low = None
    for i in range(len(derivs)):
        if derivs[i] < threshold:
            t_low = d_steps[i]
            break
    if t_low is None:
        t_low = steps[-1]
    if t_low > t_high:
        t_low = t_high
    return t_low, t_high, False


def random_trace(rng, min_len=10, max_len=100):
    n = int(rng.integers(min_len, max_len + 1))
    steps = np.sort(rng.choice(np.arange(1000), size=n, replace=False))[::-1]
    values = rng.uniform(-1.0, 1.0, size=n)
    return steps.astype(np.int64), values


class TestSimilarityTrace:
    def test_requires_decreasing_steps(self):
        with pytest.raises(ValueError):
            SimilarityTrace(timesteps=np.array([10, 20, 30]), values=np.zeros(3))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SimilarityTrace(timesteps=np.array([30, 20]), values=np.array([0.1, np.nan]))

    def test_csv_round_trip(self, tmp_path):
        trace = SimilarityTrace(
            timesteps=np.array([900, 500, 100]), values=np.array([0.125, -0.5, 0.999])
        )
        path = tmp_path / "trace.csv"
        trace_to_csv(trace, path)
        assert path.read_text().splitlines()[0] == "step,score"
        back = trace_from_csv(path)
        np.testing.assert_array_equal(back.timesteps, trace.timesteps)
        np.testing.assert_array_equal(back.values, trace.values)


class TestAlignmentTrace:
    def test_constant_scorer(self, rng):
        latents = [(t, Latent(rng.standard_normal((1, 2, 2)))) for t in (900, 500, 100)]
        trace = alignment_trace(latents, lambda latent, cond: 0.5, None)
        np.testing.assert_array_equal(trace.values, [0.5, 0.5, 0.5])

    def test_requires_three_steps(self, rng):
        latents = [(900, Latent(rng.standard_normal((1, 2, 2))))]
        with pytest.raises(ValueError):
            alignment_trace(latents, lambda latent, cond: 0.0, None)
        with pytest.raises(ValueError):
            alignment_trace([], lambda latent, cond: 0.0, None)

    def test_converging_run_reaches_alignment_one(self, rng):
        # single point-mass component: every clean prediction is its mean,
        # so alignment with the mean direction is exactly 1 along the run
        from demem.denoisers import GaussianMixture, GaussianMixtureDenoiser
        from demem.pipeline import InjectionConfig, run_vanilla

        sched = make_schedule()
        mean = Latent(rng.standard_normal((1, 4, 4)))
        gm = GaussianMixture(means=(mean,), variances=np.array([0.0]), weights=np.array([1.0]))
        den = GaussianMixtureDenoiser(gm, sched)
        prompt = mean.data.reshape(-1) / np.linalg.norm(mean.data)

        def scorer(latent, cond):
            flat = latent.data.reshape(-1)
            return float(flat @ prompt / np.linalg.norm(flat))

        _, records = run_vanilla(den, None, InjectionConfig(seed=5), sched, (1, 4, 4))
        trace = alignment_trace(records, scorer, None)
        assert trace.values[-1] == pytest.approx(1.0, abs=1e-9)

    def test_converging_run_trace_rises_and_settles(self):
        # clean mixture world (no planted pull): prompt alignment climbs as
        # the posterior takes over, then settles into a flat tail with no
        # sharp collapse (contrast with the memorizing run below)
        from demem.pipeline import InjectionConfig, run_vanilla

        world = make_toy_world(seed=0, memorize=False)
        _, records = run_vanilla(
            world.setup.denoiser, world.setup.cond, InjectionConfig(seed=1),
            world.sched, world.x_r.shape,
        )
        trace = alignment_trace(records, world.setup.providers.scorer, world.setup.cond)
        assert trace.values[-1] > trace.values[0] + 0.05
        assert np.all(np.diff(trace.values) > -0.02)  # gentle everywhere
        late = trace.values[-5:]
        assert late.max() - late.min() < 0.01  # flat tail

    def test_toy_memorizing_run_rises_then_drops(self, calibration):
        # qualitative shape check against the frozen simulator fixture
        world = make_toy_world(seed=0)
        from demem.pipeline import InjectionConfig, run_vanilla

        _, records = run_vanilla(
            world.setup.denoiser, world.setup.cond, InjectionConfig(seed=0),
            world.sched, world.x_r.shape,
        )
        trace = alignment_trace(records, world.setup.providers.scorer, world.setup.cond)
        fix = calibration["trace_shape"]
        peak_idx = int(np.argmax(trace.values))
        assert peak_idx == fix["peak_index"]
        assert 0 < peak_idx < len(trace) - 1  # interior rise-then-drop shape
        assert float(trace.values[peak_idx] - trace.values[-1]) == pytest.approx(
            fix["drop_after_peak"], abs=1e-9
        )
        assert fix["drop_after_peak"] > 0.0


class TestTraceDerivative:
    def test_constant_trace_zero_derivative(self):
        trace = SimilarityTrace(timesteps=np.array([900, 500, 100]), values=np.full(3, 0.2))
        deriv = trace_derivative(trace)
        np.testing.assert_array_equal(deriv.values, np.zeros(2))
        np.testing.assert_array_equal(deriv.timesteps, [500, 100])

    def test_linear_gain_constant_derivative(self):
        # score rising by 0.1 per 100 steps of denoising progress
        steps = np.array([900, 800, 700, 600])
        values = 0.1 * (900 - steps) / 100.0
        deriv = trace_derivative(SimilarityTrace(timesteps=steps, values=values))
        np.testing.assert_allclose(deriv.values, 0.001)


class TestFindWindow:
    def test_worked_example_matches_oracle(self):
        steps = [901, 701, 501, 301, 101]
        values = [0.1, 0.2, 0.3, 0.31, 0.05]
        t_low, t_high, defaulted = oracle_find_window(steps, values)
        # frozen oracle output: mean 0.192 is first exceeded at step 701 and
        # the collapse onto step 101 breaches the 1.5-sigma rule
        assert (t_low, t_high, defaulted) == (101, 701, False)
        window = find_window(
            SimilarityTrace(timesteps=np.array(steps), values=np.array(values))
        )
        assert (window.t_low, window.t_high, window.defaulted) == (101, 701, False)

    def test_constant_trace_returns_default(self):
        trace = SimilarityTrace(timesteps=np.array([900, 500, 100]), values=np.full(3, 0.4))
        window = find_window(trace)
        assert window.defaulted
        assert (window.t_low, window.t_high) == (DEFAULT_WINDOW.t_low, DEFAULT_WINDOW.t_high)

    def test_default_window_values(self):
        assert (DEFAULT_WINDOW.t_low, DEFAULT_WINDOW.t_high) == (141, 341)

    def test_oracle_equivalence_quick(self, rng):
        for _ in range(150):
            steps, values = random_trace(rng)
            expected = oracle_find_window(list(steps), list(values))
            window = find_window(SimilarityTrace(timesteps=steps, values=values))
            assert (window.t_low, window.t_high, window.defaulted) == expected

    def test_positive_affine_invariance_quick(self, rng):
        for _ in range(150):
            steps, values = random_trace(rng)
            a = float(rng.uniform(0.05, 0.45))
            b = float(rng.uniform(-0.5, 0.5))
            w1 = find_window(SimilarityTrace(timesteps=steps, values=values))
            w2 = find_window(SimilarityTrace(timesteps=steps, values=a * values + b))
            assert (w1.t_low, w1.t_high, w1.defaulted) == (w2.t_low, w2.t_high, w2.defaulted)

    def test_ordering_always_holds(self, rng):
        for _ in range(200):
            steps, values = random_trace(rng, min_len=3, max_len=12)
            window = find_window(SimilarityTrace(timesteps=steps, values=values))
            assert window.t_low <= window.t_high


class TestMapWindowToDdim:
    def test_default_window_on_default_schedule(self):
        sched = make_schedule()
        # oracle: enumerate the 50 strided steps and keep those in [141, 341]
        expected = {t for t in range(0, 1000, 20) if 141 <= t <= 341}
        got = map_window_to_ddim(InjectionWindow(141, 341), sched)
        assert got == frozenset(expected)
        assert len(got) == 10

    def test_full_range_covers_all_steps(self):
        sched = make_schedule()
        got = map_window_to_ddim(InjectionWindow(0, 999), sched)
        assert got == frozenset(int(t) for t in sched.ddim_steps)
        assert len(got) == 50

    def test_empty_interval_widens_to_nearest(self):
        sched = make_schedule()
        got = map_window_to_ddim(InjectionWindow(9, 11), sched)
        assert got == frozenset({20})  # 10 is equidistant to 0 and 20; larger wins
        got = map_window_to_ddim(InjectionWindow(101, 105), sched)
        assert got == frozenset({100})

    def test_out_of_range_window_rejected(self):
        sched = make_schedule()
        with pytest.raises(ValueError):
            map_window_to_ddim(InjectionWindow(0, 1000), sched)


def test_window_ordering_validated():
    with pytest.raises(ValueError):
        InjectionWindow(400, 100)
