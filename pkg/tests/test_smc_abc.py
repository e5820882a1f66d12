import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnpe.core import BoxPrior, RngState
from pnpe.models import GaussToyConfig, GaussToyModel, SimulationError
from pnpe.smc_abc import (
    BoxReparam,
    ParticleSet,
    SmcConfig,
    adapt_num_moves,
    discrepancy,
    initialize,
    mad_scale,
    mcmc_move_sweep,
    smc_abc_run,
)

S_OBS = np.array([0.4])


def test_discrepancy_examples():
    assert discrepancy([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert discrepancy([3.0, 4.0], [0.0, 0.0], np.ones(2)) == 5.0
    with pytest.raises(ValueError):
        discrepancy([1.0], [1.0, 2.0])


def test_discrepancy_matches_loop():
    g = np.random.default_rng(0)
    for _ in range(20):
        s, s_obs, scale = g.normal(size=7), g.normal(size=7), g.uniform(0.1, 3, 7)
        acc = 0.0
        for a, b, c in zip(s, s_obs, scale):
            acc += ((a - b) / c) ** 2
        assert discrepancy(s, s_obs, scale) == pytest.approx(math.sqrt(acc), rel=1e-14)


def test_mad_scale():
    x = np.array([[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]])
    assert np.array_equal(mad_scale(x), [1.0, 1.0])
    x = np.array([[0.0], [1.0], [3.0], [10.0]])
    assert mad_scale(x)[0] == pytest.approx(np.median(np.abs(x - np.median(x))))


def test_adapt_num_moves_examples():
    assert adapt_num_moves(0.5, 0.01) == 7
    assert adapt_num_moves(0.99, 0.01) == 1
    assert adapt_num_moves(0.01, 0.01, max_moves=1000) == 459
    assert adapt_num_moves(0.001, 0.01) == 500  # clamped at R_max
    assert adapt_num_moves(0.0, 0.01) == 500
    assert adapt_num_moves(1.0, 0.01) == 1
    with pytest.raises(ValueError):
        adapt_num_moves(1.5, 0.01)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-4, 0.5))
def test_adapt_num_moves_is_smallest_sufficient(p, c):
    r = adapt_num_moves(p, c, max_moves=10**9)
    # R moves leave a particle unmoved with probability <= c (up to rounding)
    assert (1 - p) ** r <= c * (1 + 1e-6)
    if r > 1:
        assert (1 - p) ** (r - 1) > c * (1 - 1e-6)


def test_initialize_sorted_and_deterministic(toy):
    cfg = SmcConfig(n_particles=1000)
    a = initialize(toy.prior, toy, S_OBS, cfg, RngState(2))
    b = initialize(toy.prior, toy, S_OBS, cfg, RngState(2))
    assert a.n == 1000 and a.total_sims == 1000
    assert np.all(np.diff(a.rho) >= 0)
    assert a.epsilon == a.rho.max()
    assert a.theta.tobytes() == b.theta.tobytes() and a.rho.tobytes() == b.rho.tobytes()


class _Failing(GaussToyModel):
    def simulate_summaries(self, thetas, rng):
        out = super().simulate_summaries(thetas, rng)
        out[3] = np.nan
        return out


def test_initialize_failure_carries_theta():
    m = _Failing()
    with pytest.raises(SimulationError) as err:
        initialize(m.prior, m, S_OBS, SmcConfig(n_particles=10), 0)
    assert err.value.theta is not None


def _toy_set(toy, n=200, seed=0):
    return initialize(toy.prior, toy, S_OBS, SmcConfig(n_particles=n), seed)


def test_sweep_infinite_epsilon_accepts_all(toy):
    ps = _toy_set(toy)
    ps.theta[:] = 0.0  # far from the box edges
    idx = np.arange(ps.n)
    res = mcmc_move_sweep(ps, idx, np.inf, np.eye(1) * 1e-4, 3, toy.prior, toy, S_OBS, 1)
    assert res.accepted == 3 * ps.n
    assert res.sims == 3 * ps.n
    assert res.particles.total_sims == ps.total_sims + 3 * ps.n


def test_sweep_outside_box_never_accepted(toy):
    ps = _toy_set(toy)
    ps.theta[:] = 2.999
    idx = np.arange(ps.n)
    # a large shift pushes nearly every proposal out; those must all be rejected without simulating
    res = mcmc_move_sweep(ps, idx, np.inf, np.eye(1) * 100.0, 1, toy.prior, toy, S_OBS, 4)
    assert np.all(toy.prior.contains(res.particles.theta))
    assert res.accepted == res.sims
    assert res.sims < ps.n


def test_sweep_non_psd_covariance_regularised(toy):
    ps = _toy_set(toy, n=20)
    res = mcmc_move_sweep(ps, np.arange(20), np.inf, np.zeros((1, 1)), 1, toy.prior, toy, S_OBS, 0)
    assert res.steps == 1


def test_sweep_acceptance_matches_independent_kernel(toy):
    """Compare acceptance with a plain per-particle loop implementing the same kernel."""
    ps = _toy_set(toy, n=400, seed=3)
    eps = float(np.median(ps.rho))
    ps.theta[:] = ps.theta[: ps.n // 2].repeat(2, axis=0)
    ps.rho[:] = ps.rho[: ps.n // 2].repeat(2)
    var = 0.05
    idx = np.arange(ps.n)
    n_steps = 25
    res = mcmc_move_sweep(ps, idx, eps, np.eye(1) * var, n_steps, toy.prior, toy, S_OBS, 10)
    rate = res.accepted / (n_steps * ps.n)

    g = np.random.default_rng(99)
    cfg = toy.cfg
    acc = 0
    for i in range(ps.n):
        th = ps.theta[i, 0]
        for _ in range(n_steps):
            prop = th + math.sqrt(var) * g.standard_normal()
            if not -3 <= prop <= 3:
                continue
            s = prop + math.sqrt(cfg.noise_var) * g.standard_normal(cfg.n_obs).mean()
            if abs(s - S_OBS[0]) / ps.scale[0] < eps:
                th = prop
                acc += 1
    rate2 = acc / (n_steps * ps.n)
    se = math.sqrt(rate * (1 - rate) / (n_steps * ps.n)) * math.sqrt(2)
    # chains are autocorrelated; allow 3 se on a doubled variance
    assert abs(rate - rate2) < 3 * se * math.sqrt(2)


def test_box_reparam_roundtrip():
    prior = BoxPrior([-1, 0], [1, 1])
    rp = BoxReparam(prior, logit=True)
    th = prior.sample(50, 0)
    assert np.allclose(rp.to_theta(rp.to_u(th)), th, atol=1e-12)
    ident = BoxReparam(prior, logit=False)
    assert np.array_equal(ident.to_u(th), th)


def test_run_invariants(toy):
    cfg = SmcConfig(n_particles=400)
    ps = smc_abc_run(toy.prior, toy, S_OBS, cfg, RngState(8))
    eps = [h.epsilon for h in ps.history]
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    assert np.all(ps.rho <= ps.epsilon)
    assert np.all(np.isfinite(toy.prior.logpdf(ps.theta)))
    assert np.all(np.diff(ps.rho) >= 0)
    assert ps.total_sims == cfg.n_particles + sum(h.sims for h in ps.history)
    assert ps.history[-1].acceptance < cfg.min_acceptance or not ps.converged
    # moves per particle reconcile with the history
    for h in ps.history:
        assert h.sims <= h.moves * cfg.n_drop
    # R_{t+1} trial steps are half of the previous R
    for prev, cur in zip(ps.history, ps.history[1:]):
        assert cur.trial_moves == math.ceil(adapt_num_moves(prev.trial_acceptance, cfg.move_tuning) / 2)


def test_one_iteration_definition(toy):
    cfg = SmcConfig(n_particles=1000, max_iterations=1, min_acceptance=None, target_epsilon=1e-12)
    init = initialize(toy.prior, toy, S_OBS, cfg, RngState(5))
    ps = smc_abc_run(toy.prior, toy, S_OBS, cfg, RngState(5))
    assert not ps.converged
    h = ps.history[0]
    assert h.epsilon == init.rho[499]
    # the 500 kept particles are untouched: their (theta, rho) pairs survive
    kept = {(float(t[0]), float(r)) for t, r in zip(init.theta[:500], init.rho[:500])}
    now = {(float(t[0]), float(r)) for t, r in zip(ps.theta, ps.rho)}
    assert kept <= now


def test_no_moves_reduces_to_resampling(toy):
    cfg = SmcConfig(n_particles=300, initial_trial_moves=0, max_moves=0, min_acceptance=None, target_epsilon=0.0, max_iterations=4)
    init = initialize(toy.prior, toy, S_OBS, cfg, RngState(6))
    ps = smc_abc_run(toy.prior, toy, S_OBS, cfg, RngState(6))
    assert ps.total_sims == 300
    assert set(ps.theta[:, 0].tolist()) <= set(init.theta[:, 0].tolist())


def test_run_deterministic(toy):
    cfg = SmcConfig(n_particles=200)
    a = smc_abc_run(toy.prior, toy, S_OBS, cfg, RngState(1))
    b = smc_abc_run(toy.prior, toy, S_OBS, cfg, RngState(1))
    assert a.theta.tobytes() == b.theta.tobytes()
    assert a.to_dict() == b.to_dict()


def test_config_validation():
    with pytest.raises(ValueError):
        SmcConfig(target_epsilon=None, min_acceptance=None)
    with pytest.raises(ValueError):
        SmcConfig(drop_fraction=1.0)
    with pytest.raises(ValueError):
        SmcConfig(move_tuning=0.0)
