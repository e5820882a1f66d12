import math

import numpy as np
import pytest

from pnpe.core import RngState
from pnpe.flows import FlowArch, FlowModel
from pnpe.models import GaussToyModel
from pnpe.train import (
    DegenerateCorpusError,
    NonFiniteLossError,
    TrainConfig,
    TrainingCorpus,
    fit_flow,
    fit_unconditional_flow,
    history_csv,
    importance_weights,
    loss_and_gradient,
)

FAST = TrainConfig(patience=20)


def small_flow(seed=0):
    arch = FlowArch(dim=2, context_dim=1, n_layers=1, n_bins=4, hidden=(8,))
    f = FlowModel(arch, rng=seed)
    f.set_flat(np.random.default_rng(seed).normal(0, 0.5, f.n_params))
    return f


def fd_gradient_check(flow, batch, n_coords, seed, h=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    _, grad = loss_and_gradient(flow, batch)
    base = flow.get_flat()
    coords = np.random.default_rng(seed).choice(base.size, size=min(n_coords, base.size), replace=False)
    worst = 0.0
    for j in coords:
        v = base.copy()
        v[j] += h
        flow.set_flat(v)
        up, _ = loss_and_gradient(flow, batch)
        v[j] -= 2 * h
        flow.set_flat(v)
        dn, _ = loss_and_gradient(flow, batch)
        fd = (up - dn) / (2 * h)
        err = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-6)
        worst = max(worst, err)
    flow.set_flat(base)
    return worst, len(coords)


def test_identity_loss_single_record():
    f = FlowModel(FlowArch(dim=1), rng=0)
    loss, grad = loss_and_gradient(f, TrainingCorpus(np.zeros((1, 1))))
    assert loss == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert loss == pytest.approx(0.9189, abs=1e-4)
    assert grad.shape == (f.n_params,)


def test_gradient_matches_finite_differences():
    f = small_flow(3)
    g = np.random.default_rng(0)
    batch = TrainingCorpus(g.normal(size=(64, 2)), g.normal(size=(64, 1)), g.uniform(0.5, 2, 64))
    worst, n = fd_gradient_check(f, batch, 200, seed=1)
    assert n >= 100
    assert worst < 1e-4


def test_duplicating_records_leaves_loss_unchanged():
    f = small_flow(1)
    g = np.random.default_rng(2)
    th, c, w = g.normal(size=(10, 2)), g.normal(size=(10, 1)), g.uniform(0.5, 2, 10)
    a, _ = loss_and_gradient(f, TrainingCorpus(th, c, w))
    b, _ = loss_and_gradient(f, TrainingCorpus(np.vstack([th, th]), np.vstack([c, c]), np.r_[w, w]))
    assert a == pytest.approx(b, rel=1e-12)


def test_non_finite_loss_reports_index():
    f = small_flow(0)
    th = np.zeros((5, 2))
    th[3, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        loss_and_gradient(f, TrainingCorpus(th, np.zeros((5, 1))))
    assert err.value.index == 3


def test_importance_weights():
    lt = np.zeros(1000)
    lq = np.random.default_rng(0).normal(size=1000)
    w = importance_weights(lt, lq)
    assert w.mean() == pytest.approx(1.0)
    raw = np.exp(-lq)
    assert np.argmax(w) in np.nonzero(raw >= np.percentile(raw, 99.5))[0]
    assert np.sum(w == w.max()) >= 5  # the top 0.5% share the clipped value
    assert np.allclose(importance_weights(np.zeros(5), np.zeros(5)), 1.0)


def test_corpus_split_disjoint_and_exhaustive():
    c = TrainingCorpus(np.arange(100.0)[:, None])
    tr, va = c.split(0.1, 0)
    assert len(va) == 10
    assert set(tr) | set(va) == set(range(100)) and not set(tr) & set(va)
    with pytest.raises(ValueError):
        TrainingCorpus(np.zeros((3, 1)), weights=np.array([1.0, 0.0, 1.0]))


def test_recovers_known_normal():
    x = np.random.default_rng(0).normal(3.0, 0.5, (5000, 1))
    f = fit_unconditional_flow(x, cfg=FAST, rng=RngState(1))
    s = f.sample(100_000, rng=2)
    assert abs(s.mean() - 3.0) < 0.05
    assert abs(s.std() - 0.5) < 0.05


def test_best_snapshot_and_history():
    x = np.random.default_rng(1).gamma(2.0, 1.0, (2000, 1))
    f = fit_unconditional_flow(x, cfg=TrainConfig(patience=5, max_epochs=40), rng=0)
    vals = [h["val_loss"] for h in f.history]
    assert f.best_val_loss == min(vals)
    assert vals[f.best_epoch - 1] == f.best_val_loss
    assert history_csv(f.history).count("\n") == len(f.history) + 1


def test_patience_zero_stops_after_first_non_improving_epoch():
    x = np.random.default_rng(1).normal(size=(600, 1))
    f = fit_unconditional_flow(x, cfg=TrainConfig(patience=0, max_epochs=200), rng=0)
    vals = [h["val_loss"] for h in f.history]
    assert all(b < a for a, b in zip(vals[:-2], vals[1:-1]))
    assert vals[-1] >= min(vals[:-1])


def test_training_deterministic():
    x = np.random.default_rng(1).normal(size=(500, 2))
    cfg = TrainConfig(max_epochs=5)
    a = fit_unconditional_flow(x, cfg=cfg, rng=RngState(3))
    b = fit_unconditional_flow(x, cfg=cfg, rng=RngState(3))
    assert a.get_flat().tobytes() == b.get_flat().tobytes()


def test_degenerate_corpus_rejected():
    with pytest.raises(DegenerateCorpusError):
        fit_unconditional_flow(np.ones((100, 2)), cfg=TrainConfig(max_epochs=2))


def test_conditional_toy_posterior():
    toy = GaussToyModel()
    g = np.random.default_rng(4)
    th = toy.prior.sample(10_000, g)
    s = toy.simulate_summaries(th, g)
    f = fit_flow(TrainingCorpus(th, s), FlowArch.conditional(1, 1), FAST, RngState(5))
    s_obs = np.array([0.387])
    mean, var = toy.analytic_posterior(s_obs)
    x = f.sample(50_000, s_obs, 6)
    assert abs(x.mean() - mean) < 0.1 * math.sqrt(var)
    assert abs(x.std() / math.sqrt(var) - 1) < 0.1


@pytest.mark.parametrize("arch", [FlowArch.unconditional(7), FlowArch.conditional(7, 7), FlowArch.conditional(1, 1)])
def test_gradient_check_pipeline_architectures(arch):
    f = FlowModel(arch, rng=0)
    f.set_flat(np.random.default_rng(7).normal(0, 0.1, f.n_params))
    g = np.random.default_rng(8)
    ctx = g.normal(size=(32, arch.context_dim)) if arch.context_dim else None
    batch = TrainingCorpus(g.normal(size=(32, arch.dim)), ctx, g.uniform(0.5, 2, 32))
    worst, n = fd_gradient_check(f, batch, 120, seed=2)
    assert n >= 100
    assert worst < 1e-4
