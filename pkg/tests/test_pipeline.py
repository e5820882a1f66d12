import json
import math

import numpy as np
import pytest

from pnpe.core import RngState
from pnpe.models import GaussToyConfig, GaussToyModel, generate_observed
from pnpe.pipeline import (
    RunPlan,
    StageError,
    posterior_predictive,
    predictive_quantiles,
    run_npe,
    run_plan,
    run_pnpe,
    run_snpe_baseline,
)
from pnpe.smc_abc import SmcConfig
from pnpe.train import TrainConfig

FAST = TrainConfig(patience=20)
S_OBS = np.array([0.387])


@pytest.fixture(scope="module")
def toy_pnpe():
    toy = GaussToyModel()
    return run_pnpe(RunPlan("PNPE", toy, S_OBS, seed=1, smc=SmcConfig(n_particles=300), train=FAST))


def test_plan_validation():
    toy = GaussToyModel()
    with pytest.raises(ValueError):
        RunPlan("PNPE", toy, S_OBS)
    with pytest.raises(ValueError):
        RunPlan("SNPE", toy, S_OBS, smc=SmcConfig())
    with pytest.raises(ValueError):
        RunPlan("APT", toy, S_OBS)
    with pytest.raises(ValueError):
        RunPlan("NPE", toy, S_OBS, rounds=2)
    with pytest.raises(ValueError):
        RunPlan("BSL", toy, S_OBS)
    with pytest.raises(ValueError):
        run_snpe_baseline(RunPlan("SNPE", toy, S_OBS))


def test_pnpe_toy_recovers_posterior(toy_pnpe):
    mean, var = GaussToyModel().analytic_posterior(S_OBS)
    m = toy_pnpe.manifest
    assert abs(m["posterior_mean"][0] - mean) < 0.1 * math.sqrt(var)
    assert abs(m["posterior_sd"][0] / math.sqrt(var) - 1) < 0.1


def test_pnpe_manifest_accounting(toy_pnpe):
    m = toy_pnpe.manifest
    assert m["total_sims"] == m["n_abc"] + sum(m["round_sims"])
    assert m["n_abc"] == toy_pnpe.particles.total_sims
    assert [s["stage"] for s in m["stages"]][:3] == ["smc_abc", "fit_qg", "npe_round_1"]
    assert "wall_seconds" not in json.dumps(m)
    assert set(toy_pnpe.timings) >= {"smc_abc", "fit_qg", "npe_round_1"}


def test_snpe_budget_matches_and_agrees(toy_pnpe):
    toy = GaussToyModel()
    plan = RunPlan("SNPE", toy, S_OBS, seed=2, train=FAST, reference_n_abc=toy_pnpe.manifest["n_abc"])
    snpe = run_snpe_baseline(plan)
    assert snpe.total_sims == toy_pnpe.total_sims
    # both runs are held to the analytic posterior, which bounds their disagreement
    mean, var = toy.analytic_posterior(S_OBS)
    sd = math.sqrt(var)
    for m in (toy_pnpe.manifest, snpe.manifest):
        assert abs(m["posterior_mean"][0] - mean) < 0.1 * sd
        assert abs(m["posterior_sd"][0] / sd - 1) < 0.1


def test_abc_only_budget_mode_schedule():
    toy = GaussToyModel()
    plan = RunPlan("SNPE", toy, S_OBS, seed=2, rounds=2, round_sims=600, train=TrainConfig(max_epochs=3), reference_n_abc=900, budget_mode="abc-only")
    res = run_snpe_baseline(plan)
    assert res.manifest["round_sims"] == [900, 600]
    plan.budget_mode = "match-total"
    res = run_snpe_baseline(plan)
    assert res.manifest["round_sims"] == [1500, 600]


def test_npe_run_and_reproducibility():
    toy = GaussToyModel()
    plan = RunPlan("NPE", toy, S_OBS, seed=5, round_sims=1000, train=TrainConfig(max_epochs=5), n_posterior=2000)
    a = run_npe(plan)
    b = run_plan(RunPlan("NPE", toy, S_OBS, seed=5, round_sims=1000, train=TrainConfig(max_epochs=5), n_posterior=2000))
    assert json.dumps(a.manifest, sort_keys=True) == json.dumps(b.manifest, sort_keys=True)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.predictive.to_csv() == b.predictive.to_csv()


def test_stage_errors_are_labelled():
    toy = GaussToyModel()
    plan = RunPlan("NPE", toy, S_OBS, seed=0, round_sims=1, train=TrainConfig(max_epochs=1))
    with pytest.raises(StageError) as err:
        run_npe(plan)
    assert err.value.stage == "npe_round_1"


def test_quantiles_match_sort_based():
    g = np.random.default_rng(0)
    for n in (100, 101, 999, 1000):
        s = g.normal(size=(n, 3))
        rep = predictive_quantiles(s, np.zeros(3))
        srt = np.sort(s, axis=0)
        for p, q in ((0.05, rep.q05), (0.5, rep.q50), (0.95, rep.q95)):
            k = math.ceil(n * p) - 1
            assert np.array_equal(q, srt[k])
        assert np.all(rep.q05 <= rep.q50) and np.all(rep.q50 <= rep.q95)
        assert np.array_equal(rep.covered, (rep.q05 <= 0) & (0 <= rep.q95))


def test_point_mass_predictive_is_degenerate():
    toy = GaussToyModel(GaussToyConfig(noise_var=0.0))
    rep = posterior_predictive(np.full((5, 1), 0.25), toy, [0.25], 200, 0)
    assert rep.q05[0] == rep.q50[0] == rep.q95[0] == 0.25
    assert rep.covered[0]
    with pytest.raises(ValueError):
        posterior_predictive(np.zeros((5, 1)), toy, [0.0], 99, 0)


def test_predictive_calibration_at_truth():
    toy = GaussToyModel()
    hits = 0
    reps = 400
    root = RngState(9)
    for r in range(reps):
        obs = generate_observed(toy, (0.5,), root.child(r, 0))
        rep = posterior_predictive(np.full((1, 1), 0.5), toy, obs.summary, 1000, root.child(r, 1))
        hits += int(rep.covered[0])
    rate = hits / reps
    assert abs(rate - 0.9) < 3 * math.sqrt(0.09 / reps)


def test_predictive_from_particles(toy_pnpe):
    rep = posterior_predictive(toy_pnpe.particles, GaussToyModel(), S_OBS, 500, 1)
    assert rep.n_pred == 500 and rep.covered[0]
