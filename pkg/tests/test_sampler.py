import numpy as np
import pytest
from scipy import stats

from lsmu.errors import ConfigError, DivergenceError, NumericError
from lsmu.sampler import (
    ChainState,
    Param,
    ParamSpace,
    RemcConfig,
    Stage,
    exchange_accept_prob,
    exchange_step,
    geometric_ladder,
    mh_step,
    read_chain,
    run_remc,
    select_initial,
    write_chain,
)


def gauss_target(x, rng):
    return -0.5 * float(np.sum(x**2))


def bimodal_target(x, rng):
    # two narrow modes at +-2 separated by a deep valley
    return float(np.logaddexp(-0.5 * ((x[0] - 2) / 0.2) ** 2, -0.5 * ((x[0] + 2) / 0.2) ** 2))


def state(x, ll, beta=1.0, seed=0, step=0.5):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return ChainState(x, ll, beta, np.random.default_rng(seed), np.full(x.shape, step))


class TestParamSpace:
    def test_reflection_stays_in_box(self):
        sp = ParamSpace([Param("a", 0.0, 1.0), Param("b", -2.0, 2.0)])
        pts = np.random.default_rng(0).normal(0, 10, (1000, 2))
        assert all(sp.contains(sp.reflect(p)) for p in pts)
        np.testing.assert_allclose(sp.reflect([1.2, -2.5]), [0.8, -1.5])

    def test_bad_bounds(self):
        with pytest.raises(ConfigError):
            Param("a", 1.0, 1.0)
        with pytest.raises(ConfigError):
            ParamSpace([Param("a", 0, 1), Param("a", 0, 1)])

    def test_blocks(self):
        sp = ParamSpace([Param("a", 0, 1, "m"), Param("b", 0, 1, "s"), Param("c", 0, 1, "m")])
        assert sp.blocks == {"m": [0, 2], "s": [1]}
        with pytest.raises(ConfigError):
            sp.indices(["zzz"])


class TestMhStep:
    def setup_method(self):
        self.space = ParamSpace([Param("x", -10.0, 10.0)])

    def test_zero_step_always_accepted(self):
        s = state(0.3, gauss_target(np.array([0.3]), None), step=0.0)
        for _ in range(20):
            mh_step(s, gauss_target, self.space)
        assert s.n_acc == 20

    def test_beta_zero_accepts_everything(self):
        s = state(0.0, 0.0, beta=0.0, step=3.0)
        for _ in range(200):
            mh_step(s, gauss_target, self.space)
        assert s.n_acc == 200

    def test_gaussian_moments(self):
        s = state(0.0, 0.0, step=2.4)
        xs = np.empty(50_000)
        for i in range(xs.size):
            mh_step(s, gauss_target, self.space)
            xs[i] = s.x[0]
        assert abs(xs.mean()) < 0.05
        assert 0.9 <= xs.var() <= 1.1

    def test_acceptance_matches_metropolis_rate(self):
        # from a fixed point the acceptance rate equals E[min(1, exp(dL))]
        rng = np.random.default_rng(1)
        x0, step = 1.0, 1.0
        z = rng.standard_normal(400_000)
        expected = np.mean(np.minimum(1, np.exp(-0.5 * ((x0 + step * z) ** 2 - x0**2))))
        s = state(x0, gauss_target(np.array([x0]), None), step=step, seed=2)
        n = 20_000
        acc = 0
        for _ in range(n):
            s.x, s.log_lik = np.array([x0]), gauss_target(np.array([x0]), None)
            before = s.n_acc
            mh_step(s, gauss_target, self.space)
            acc += s.n_acc - before
        se = np.sqrt(expected * (1 - expected) / n)
        assert abs(acc / n - expected) < 4 * se

    def test_divergent_proposal_rejected_and_counted(self):
        def bad(x, rng):
            raise DivergenceError("boom", dimension=0)

        s = state(0.0, 0.0)
        mh_step(s, bad, self.space)
        assert s.n_errors == 1 and s.n_acc == 0 and s.x[0] == 0.0

    def test_constraint_rejection(self):
        s = state(0.0, 0.0, step=1.0)
        for _ in range(50):
            mh_step(s, gauss_target, self.space, constraint=lambda x: x[0] < 0.5)
        assert s.x[0] < 0.5

    def test_state_requires_finite_loglik(self):
        with pytest.raises(NumericError):
            state(0.0, -np.inf)


class TestExchange:
    def test_equal_betas_always_swap(self):
        assert exchange_accept_prob(0.5, 0.5, -3.0, 10.0) == 1.0
        a, b = state(1.0, -1.0, beta=0.5), state(2.0, -9.0, beta=0.5)
        rng = np.random.default_rng(0)
        assert all(exchange_step(a, b, rng) for _ in range(100))

    def test_equal_loglik_always_swap(self):
        assert exchange_accept_prob(1.0, 0.1, -2.0, -2.0) == 1.0

    def test_swap_moves_configurations(self):
        a, b = state(1.0, -1.0, beta=1.0), state(2.0, -0.5, beta=0.1)
        exchange_step(a, b, np.random.default_rng(0))
        assert a.x[0] == 2.0 and a.log_lik == -0.5 and a.beta == 1.0

    def test_ladder(self):
        b = geometric_ladder(8, 0.02)
        assert b[0] == 1.0 and b[-1] == pytest.approx(0.02)
        assert np.all(np.diff(b) < 0)


def small_config(**kw):
    base = dict(n_replicas=4, beta_min=0.1, stages=[Stage(40, 100)], burn_in=1000, thin=3)
    base.update(kw)
    return RemcConfig(**base)


class TestRunRemc:
    def test_sample_count_contract(self):
        cfg = RemcConfig.desk()
        assert cfg.total_samples == 10_000
        assert cfg.n_retained == (10_000 - 1_000) // 30 == 300
        full = RemcConfig.full_scale()
        assert full.n_replicas == 8
        assert (full.stages[0].n_exchanges, full.stages[0].samples_per_exchange) == (1000, 100)
        assert full.burn_in == 10_000 and full.thin == 30 and full.n_retained == 3000

    def test_returns_requested_count(self):
        sp = ParamSpace([Param("x", -5, 5)])
        cfg = small_config(stages=[Stage(10, 50)], burn_in=100, thin=7)
        res = run_remc(sp, gauss_target, cfg, seed=0)
        assert len(res.samples) == (500 - 100) // 7

    def test_flat_target_is_uniform(self):
        sp = ParamSpace([Param("a", 0.0, 2.0), Param("b", -1.0, 3.0)])
        res = run_remc(sp, lambda x, r: 0.0, small_config(thin=10), seed=1)
        for k, (lo, hi) in enumerate([(0, 2), (-1, 3)]):
            assert stats.kstest(res.samples[:, k], stats.uniform(lo, hi - lo).cdf).pvalue > 0.01

    def test_gaussian_target(self):
        sp = ParamSpace([Param("x", -6, 6), Param("y", -6, 6)])
        res = run_remc(sp, gauss_target, small_config(stages=[Stage(100, 100)]), seed=2)
        assert np.all(np.abs(res.samples.mean(0)) < 0.2)
        assert np.all(np.abs(res.samples.var(0) - 1) < 0.2)
        assert 0.15 < res.accept_rate[0] < 0.6

    def test_bimodal_coverage_needs_exchange(self):
        sp = ParamSpace([Param("x", -4, 4)])
        cfg = small_config(n_replicas=2, beta_min=0.01, init_step=0.03, stages=[Stage(100, 50)], burn_in=500, thin=5)
        pt = run_remc(sp, bimodal_target, cfg, seed=3, x0=[2.0])
        frac = np.mean(pt.samples[:, 0] > 0)
        assert 0.1 <= frac <= 0.9
        # same budget, a single beta=1 chain (both replicas at beta=1) stays in its mode
        single = run_remc(sp, bimodal_target, small_config(**{**cfg.__dict__, "beta_min": 1.0}), seed=3, x0=[2.0])
        assert np.mean(single.samples[:, 0] > 0) in (0.0, 1.0)

    def test_samples_in_box_and_constraint(self):
        sp = ParamSpace([Param("a", 0, 1), Param("b", 0, 1)])
        res = run_remc(sp, lambda x, r: 0.0, small_config(), seed=4, x0=[0.2, 0.5],
                       constraint=lambda x: x[0] < x[1])
        assert np.all((res.samples >= 0) & (res.samples <= 1))
        assert np.all(res.samples[:, 0] < res.samples[:, 1])

    def test_deterministic_across_threads(self):
        sp = ParamSpace([Param("x", -6, 6), Param("y", -6, 6)])

        def noisy(x, rng):
            return gauss_target(x, rng) + 0.1 * rng.standard_normal()

        a = run_remc(sp, noisy, small_config(), seed=5)
        b = run_remc(sp, noisy, small_config(), seed=5)
        c = run_remc(sp, noisy, small_config(n_threads=3), seed=5)
        assert np.array_equal(a.samples, b.samples) and np.array_equal(a.samples, c.samples)
        assert np.array_equal(a.log_lik, c.log_lik)

    def test_refresh_unsticks_noisy_target(self):
        sp = ParamSpace([Param("x", -6, 6)])

        def very_noisy(x, rng):
            return gauss_target(x, rng) + 5.0 * rng.standard_normal()

        stale = run_remc(sp, very_noisy, small_config(), seed=7)
        fresh = run_remc(sp, very_noisy, small_config(refresh_interval=1), seed=7)
        assert fresh.accept_rate[0] > 2 * stale.accept_rate[0]
        threaded = run_remc(sp, very_noisy, small_config(refresh_interval=3, n_threads=2), seed=7)
        serial = run_remc(sp, very_noisy, small_config(refresh_interval=3), seed=7)
        assert np.array_equal(threaded.samples, serial.samples)

    def test_refresh_keeps_exact_target_unchanged(self):
        sp = ParamSpace([Param("x", -6, 6)])
        a = run_remc(sp, gauss_target, small_config(), seed=8)
        b = run_remc(sp, gauss_target, small_config(refresh_interval=5), seed=8)
        assert np.array_equal(a.samples, b.samples)

    def test_staged_schedule_freezes_inactive_block(self):
        sp = ParamSpace([Param("m", -3, 3, "means"), Param("r", -1, 1, "corr")])
        cfg = small_config(stages=[Stage(10, 50, ["means"], {"r": 0.0}), Stage(10, 50)], burn_in=0, thin=1)
        res = run_remc(sp, gauss_target, cfg, seed=6)
        assert np.all(res.samples[:500, 1] == 0.0)
        assert np.any(res.samples[500:, 1] != 0.0)

    def test_persistent_init_failure_aborts(self):
        def bad(x, rng):
            raise DivergenceError("always", dimension=2)

        with pytest.raises(NumericError, match="initial vector"):
            run_remc(ParamSpace([Param("x", 0, 1)]), bad, small_config(), seed=0)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            RemcConfig(n_replicas=1)
        with pytest.raises(ConfigError):
            RemcConfig(stages=[Stage(1, 10)], burn_in=10)
        with pytest.raises(ConfigError):
            run_remc(ParamSpace([Param("x", 0, 1)]), gauss_target, small_config(), seed=0, x0=[2.0])


class TestSelectInitial:
    def test_exact_match(self):
        cand = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        params = np.array([[10.0], [11.0], [12.0]])
        assert select_initial([[1.0, 1.0]], cand, params)[0] == 11.0

    def test_tie_goes_to_lower_index(self):
        cand = np.array([[0.0], [2.0]])
        assert select_initial([[1.0]], cand, [[5.0], [6.0]])[0] == 5.0

    def test_uses_mean_of_observations(self):
        cand = np.array([[0.0], [1.0], [3.0]])
        assert select_initial([[0.0], [2.0]], cand, [[0.0], [1.0], [2.0]])[0] == 1.0

    def test_empty(self):
        with pytest.raises(ConfigError):
            select_initial([[0.0]], np.empty((0, 1)), np.empty((0, 1)))


def test_chain_file_round_trip(tmp_path):
    sp = ParamSpace([Param("a", 0, 1), Param("b", 0, 1)])
    res = run_remc(sp, lambda x, r: -float(np.sum(x)), small_config(), seed=7)
    p, side = write_chain(tmp_path / "chain.csv", res, {"seed": 7})
    names, x, ll = read_chain(p)
    assert names == ["a", "b"]
    np.testing.assert_array_equal(x, res.samples)
    np.testing.assert_array_equal(ll, res.log_lik)
    assert '"seed": 7' in side.read_text()
